//! Per-channel graph encoder: projection, layer-summed propagation over the
//! normalized user-item graph, then one smoothing pass over the item graph.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::data::{Dataset, FeatureMatrix, Modality};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::params::{Channel, ModelParams, CHANNELS};

/// Item content inputs as `f64`, one `num_items × feat_dim` block per
/// modality. A dropped modality is represented by an all-zero block.
#[derive(Clone, Debug)]
pub struct ContentInputs {
    pub visual: Array2<f64>,
    pub text: Array2<f64>,
}

impl ContentInputs {
    pub fn from_features(visual: &FeatureMatrix, text: &FeatureMatrix) -> Result<Self> {
        if visual.rows != text.rows {
            return Err(Error::Dimension(format!(
                "visual features have {} rows, text features {}",
                visual.rows, text.rows
            )));
        }
        let to_array = |fm: &FeatureMatrix| {
            Array2::from_shape_fn((fm.rows, fm.cols), |(r, c)| fm.data[r * fm.cols + c] as f64)
        };
        Ok(ContentInputs {
            visual: to_array(visual),
            text: to_array(text),
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        let get = |m: Modality| {
            ds.features
                .get(&m)
                .ok_or_else(|| Error::Config(format!("dataset has no {m:?} features")))
        };
        Self::from_features(get(Modality::Visual)?, get(Modality::Text)?)
    }

    pub fn channel(&self, channel: Channel) -> Option<&Array2<f64>> {
        match channel {
            Channel::Id => None,
            Channel::Visual => Some(&self.visual),
            Channel::Text => Some(&self.text),
        }
    }

    pub fn drop_visual(&mut self) {
        self.visual.fill(0.0);
    }

    pub fn drop_text(&mut self) {
        self.text.fill(0.0);
    }
}

/// Static graphs the encoder reads, with cached transposes for the
/// backward pass.
#[derive(Clone, Debug)]
pub struct Graphs {
    pub bipartite: SparseGraph,
    pub item_graph: SparseGraph,
    bipartite_t: SparseGraph,
    item_graph_t: SparseGraph,
}

impl Graphs {
    pub fn new(bipartite: SparseGraph, item_graph: SparseGraph) -> Result<Self> {
        if bipartite.rows() != bipartite.cols() {
            return Err(Error::Dimension("bipartite graph must be square".into()));
        }
        if item_graph.rows() != item_graph.cols() || item_graph.rows() > bipartite.rows() {
            return Err(Error::Dimension(format!(
                "item graph {}x{} incompatible with {} nodes",
                item_graph.rows(),
                item_graph.cols(),
                bipartite.rows()
            )));
        }
        Ok(Graphs {
            bipartite_t: bipartite.transpose(),
            item_graph_t: item_graph.transpose(),
            bipartite,
            item_graph,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.bipartite.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_graph.rows()
    }

    pub fn num_users(&self) -> usize {
        self.num_nodes() - self.num_items()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    /// Learn the projection bias; when off the bias stays at its initial zero.
    pub proj_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            proj_bias: true,
        }
    }
}

/// Final per-channel states with users stacked above items.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelEmbeddings {
    pub num_users: usize,
    /// One `(num_users + num_items) × dim` matrix per channel.
    pub nodes: [Array2<f64>; 3],
}

impl ChannelEmbeddings {
    pub fn num_nodes(&self) -> usize {
        self.nodes[0].nrows()
    }

    pub fn num_items(&self) -> usize {
        self.num_nodes() - self.num_users
    }

    pub fn dim(&self) -> usize {
        self.nodes[0].ncols()
    }

    pub fn users(&self, channel: Channel) -> ArrayView2<'_, f64> {
        self.nodes[channel.index()].slice(s![..self.num_users, ..])
    }

    pub fn items(&self, channel: Channel) -> ArrayView2<'_, f64> {
        self.nodes[channel.index()].slice(s![self.num_users.., ..])
    }

    /// Concatenated `3·dim` representation of one node.
    pub fn concat(&self, node: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(3 * self.dim());
        for m in &self.nodes {
            out.extend(m.row(node).iter());
        }
        out
    }
}

/// Layer-0 node states `[P_u ; W x_i + b]` (the id channel uses the item
/// table directly).
pub fn channel_input(params: &ModelParams, inputs: &ContentInputs, channel: Channel) -> Array2<f64> {
    let users = &params.user_tables[channel.index()];
    let items = match (params.projection(channel), inputs.channel(channel)) {
        (Some(proj), Some(x)) => {
            assert_eq!(x.ncols(), proj.weight.nrows(), "feature width mismatch");
            let mut out = x.dot(&proj.weight);
            out += &proj.bias;
            out
        }
        _ => params.item_id_table.clone(),
    };
    ndarray::concatenate(Axis(0), &[users.view(), items.view()]).expect("same width")
}

/// `Σ_{ℓ=0}^{layers} Âˡ h0`.
pub fn propagate_layer_sum(h0: ArrayView2<f64>, adj: &SparseGraph, layers: usize) -> Array2<f64> {
    let mut acc = h0.to_owned();
    let mut state = h0.to_owned();
    for _ in 0..layers {
        state = adj.spmm(state.view());
        acc += &state;
    }
    acc
}

/// One pass of the row-normalized item graph. Items with no neighbors keep
/// their state.
pub fn smooth_items(z_items: ArrayView2<f64>, item_graph: &SparseGraph) -> Array2<f64> {
    let mut out = item_graph.spmm(z_items);
    for r in 0..item_graph.rows() {
        if item_graph.row_len(r) == 0 {
            out.row_mut(r).assign(&z_items.row(r));
        }
    }
    out
}

/// Adjoint of [`smooth_items`].
fn smooth_items_adjoint(grad_out: ArrayView2<f64>, graphs: &Graphs) -> Array2<f64> {
    let mut grad_in = graphs.item_graph_t.spmm(grad_out);
    for r in 0..graphs.item_graph.rows() {
        if graphs.item_graph.row_len(r) == 0 {
            let mut row = grad_in.row_mut(r);
            row += &grad_out.row(r);
        }
    }
    grad_in
}

fn encode_channel(
    params: &ModelParams,
    inputs: &ContentInputs,
    graphs: &Graphs,
    cfg: &EncoderConfig,
    channel: Channel,
) -> Array2<f64> {
    let h0 = channel_input(params, inputs, channel);
    let mut z = propagate_layer_sum(h0.view(), &graphs.bipartite, cfg.layers);
    let num_users = graphs.num_users();
    let smoothed = smooth_items(z.slice(s![num_users.., ..]), &graphs.item_graph);
    z.slice_mut(s![num_users.., ..]).assign(&smoothed);
    z
}

pub fn encode(
    params: &ModelParams,
    inputs: &ContentInputs,
    graphs: &Graphs,
    cfg: &EncoderConfig,
) -> ChannelEmbeddings {
    let [a, b, c] = CHANNELS.map(|ch| encode_channel(params, inputs, graphs, cfg, ch));
    ChannelEmbeddings {
        num_users: graphs.num_users(),
        nodes: [a, b, c],
    }
}

/// Accumulates parameter gradients given `∂L/∂Z` for each channel.
pub fn encode_backward(
    inputs: &ContentInputs,
    graphs: &Graphs,
    cfg: &EncoderConfig,
    grad_z: &[Array2<f64>; 3],
    grads: &mut ModelParams,
) {
    let num_users = graphs.num_users();
    for channel in CHANNELS {
        let mut g = grad_z[channel.index()].clone();
        let g_items = smooth_items_adjoint(g.slice(s![num_users.., ..]), graphs);
        g.slice_mut(s![num_users.., ..]).assign(&g_items);
        let g0 = propagate_layer_sum(g.view(), &graphs.bipartite_t, cfg.layers);

        grads.user_tables[channel.index()] += &g0.slice(s![..num_users, ..]);
        let g_items = g0.slice(s![num_users.., ..]);
        match (grads.projection_mut(channel), inputs.channel(channel)) {
            (Some(proj), Some(x)) => {
                proj.weight += &x.t().dot(&g_items);
                if cfg.proj_bias {
                    proj.bias += &g_items.sum_axis(Axis(0));
                }
            }
            _ => grads.item_id_table += &g_items,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, Split};
    use crate::params::ModelShape;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(nu: usize, ni: usize, d: usize) -> ModelShape {
        ModelShape {
            num_users: nu,
            num_items: ni,
            dim: d,
            bands: 1,
            visual_dim: 2,
            text_dim: 3,
            with_coeff: false,
        }
    }

    fn inputs(ni: usize, rng: &mut ChaCha8Rng) -> ContentInputs {
        ContentInputs {
            visual: Array2::from_shape_fn((ni, 2), |_| rng.random_range(-1.0..1.0)),
            text: Array2::from_shape_fn((ni, 3), |_| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn id_channel_items_are_the_item_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ModelParams::init(&shape(2, 3, 4), &mut rng);
        let h0 = channel_input(&p, &inputs(3, &mut rng), Channel::Id);
        assert_eq!(h0.slice(s![2.., ..]), p.item_id_table);
        assert_eq!(h0.slice(s![..2, ..]), p.user_tables[0]);
    }

    #[test]
    fn projection_is_affine() {
        let mut p = ModelParams::zeros(&shape(1, 2, 2));
        p.visual_proj.weight = array![[1.0, 0.0], [0.0, 1.0]];
        p.visual_proj.bias = array![0.5, -0.5];
        let x = ContentInputs {
            visual: array![[0.0, 0.0], [1.0, 0.0]],
            text: Array2::zeros((2, 3)),
        };
        let h0 = channel_input(&p, &x, Channel::Visual);
        assert_eq!(h0.row(1), array![0.5, -0.5]);
        assert_eq!(h0.row(2), array![1.5, -0.5]);

        p.visual_proj.bias.fill(0.0);
        let h0 = channel_input(&p, &x, Channel::Visual);
        assert_eq!(h0.row(1), array![0.0, 0.0]);
    }

    #[test]
    fn layer_sum_examples() {
        let h0 = array![[1.0, 2.0], [3.0, 5.0]];
        let empty = SparseGraph::empty(2, 2);
        assert_eq!(propagate_layer_sum(h0.view(), &empty, 2), h0);

        let edge = SparseGraph::from_rows(2, 2, vec![vec![(1, 1.0)], vec![(0, 1.0)]]).unwrap();
        let out = propagate_layer_sum(h0.view(), &edge, 2);
        // u0 = 2x + y, i0 = x + 2y
        assert_eq!(out.row(0), array![2.0 * 1.0 + 3.0, 2.0 * 2.0 + 5.0]);
        assert_eq!(out.row(1), array![1.0 + 2.0 * 3.0, 2.0 + 2.0 * 5.0]);

        assert_eq!(propagate_layer_sum(h0.view(), &edge, 0), h0);
    }

    #[test]
    fn smoothing_examples() {
        let z = array![[0.0, 0.0], [1.0, 2.0], [3.0, 4.0], [7.0, 7.0]];
        let g = SparseGraph::from_rows(
            4,
            4,
            vec![vec![(1, 1.0)], vec![(1, 0.5), (2, 0.5)], vec![], vec![(0, 1.0)]],
        )
        .unwrap();
        let out = smooth_items(z.view(), &g);
        assert_eq!(out.row(0), z.row(1));
        assert_eq!(out.row(1), array![2.0, 3.0]);
        assert_eq!(out.row(2), z.row(2));
        assert_eq!(out.row(3), z.row(0));
    }

    #[test]
    fn empty_graphs_encode_to_channel_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(&shape(3, 4, 8), &mut rng);
        let x = inputs(4, &mut rng);
        let graphs = Graphs::new(SparseGraph::empty(7, 7), SparseGraph::empty(4, 4)).unwrap();
        let z = encode(&p, &x, &graphs, &EncoderConfig::default());
        for ch in CHANNELS {
            assert_eq!(z.nodes[ch.index()], channel_input(&p, &x, ch));
        }
        assert_eq!(z.users(Channel::Text).dim(), (3, 8));
        assert_eq!(z.items(Channel::Visual).dim(), (4, 8));
        assert_eq!(z.concat(0).len(), 24);
    }

    fn random_setup(seed: u64) -> (ModelParams, ContentInputs, Graphs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (nu, ni) = (4, 5);
        let mut its = Vec::new();
        for _ in 0..10 {
            its.push(Interaction {
                user: rng.random_range(0..nu),
                item: rng.random_range(0..ni),
                split: Split::Train,
            });
        }
        let ds = Dataset::from_interactions(nu, ni, its).unwrap();
        let adj = crate::graph::build_normalized_bipartite(&ds);
        let rows = (0..ni)
            .map(|i| {
                let j = (i + 1) % ni;
                let k = (i + 2) % ni;
                if i == 0 {
                    vec![]
                } else {
                    vec![(j, 0.3f32), (k, 0.7f32)]
                }
            })
            .collect();
        let item_graph = SparseGraph::from_rows(ni, ni, rows).unwrap();
        let p = ModelParams::init(&shape(nu, ni, 3), &mut rng);
        let x = inputs(ni, &mut rng);
        (p, x, Graphs::new(adj, item_graph).unwrap())
    }

    #[test]
    fn encode_is_deterministic() {
        let (p, x, g) = random_setup(9);
        let cfg = EncoderConfig::default();
        assert_eq!(encode(&p, &x, &g, &cfg), encode(&p, &x, &g, &cfg));
    }

    proptest! {
        #[test]
        fn layer_sum_matches_explicit_terms(seed in any::<u64>()) {
            let (p, x, g) = random_setup(seed);
            let h0 = channel_input(&p, &x, Channel::Text);
            let a1 = g.bipartite.spmm(h0.view());
            let a2 = g.bipartite.spmm(a1.view());
            let expected = &h0 + &a1 + &a2;
            let got = propagate_layer_sum(h0.view(), &g.bipartite, 2);
            for (a, b) in got.iter().zip(expected.iter()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn encode_scales_with_tables(seed in any::<u64>()) {
            let (mut p, x, g) = random_setup(seed);
            p.visual_proj.bias.fill(0.0);
            p.text_proj.bias.fill(0.0);
            let cfg = EncoderConfig::default();
            let base = encode(&p, &x, &g, &cfg);
            let mut scaled = p.clone();
            for t in scaled.tensors_mut() {
                if t.name.starts_with("user_table") || t.name == "item_id_table" || t.name.ends_with("weight") {
                    t.data.iter_mut().for_each(|v| *v *= 2.0);
                }
            }
            let twice = encode(&scaled, &x, &g, &cfg);
            for ch in 0..3 {
                for (a, b) in twice.nodes[ch].iter().zip(base.nodes[ch].iter()) {
                    prop_assert!((a - 2.0 * b).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn backward_is_adjoint_of_forward(seed in any::<u64>()) {
            // <grad_z, dZ/dθ · v> == <grads, v> for random v: check on the item table.
            let (p, x, g) = random_setup(seed);
            let cfg = EncoderConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
            let n = g.num_nodes();
            let grad_z = [0, 1, 2].map(|_| Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0)));
            let mut grads = p.zeros_like();
            encode_backward(&x, &g, &cfg, &grad_z, &mut grads);

            let dir = Array2::from_shape_fn(p.item_id_table.dim(), |_| rng.random_range(-1.0..1.0));
            let mut p_dir = p.zeros_like();
            p_dir.item_id_table = dir.clone();
            let z = encode(&p_dir, &x, &g, &cfg);
            let lhs: f64 = (&z.nodes[0] * &grad_z[0]).sum();
            let rhs: f64 = (&grads.item_id_table * &dir).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
