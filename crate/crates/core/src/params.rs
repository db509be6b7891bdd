//! Trainable tensors of the model.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// The three representation streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    Id,
    Visual,
    Text,
}

pub const CHANNELS: [Channel; 3] = [Channel::Id, Channel::Visual, Channel::Text];

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::Id => 0,
            Channel::Visual => 1,
            Channel::Text => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Id => "id",
            Channel::Visual => "visual",
            Channel::Text => "text",
        }
    }
}

/// Sizes needed to allocate a [`ModelParams`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub num_users: usize,
    pub num_items: usize,
    pub dim: usize,
    pub bands: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub with_coeff: bool,
}

/// Affine map from item features to the latent channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `feat_dim × dim`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Per-pair residual coefficient parameters of the conservative control.
#[derive(Clone, Debug, PartialEq)]
pub struct CoeffParams {
    pub beta_u: Array1<f64>,
    pub beta_i: Array1<f64>,
    pub a_s: f64,
    pub a_b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Per-channel user preference tables, `num_users × dim`.
    pub user_tables: [Array2<f64>; 3],
    pub item_id_table: Array2<f64>,
    pub visual_proj: Projection,
    pub text_proj: Projection,
    /// `3·dim × bands`
    pub gate_weight: Array2<f64>,
    pub gate_bias: Array1<f64>,
    pub rho: f64,
    pub band_logits: Array1<f64>,
    pub coeff: Option<CoeffParams>,
}

/// Borrowed view of one named tensor.
pub struct TensorRef<'a> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: &'static str,
    pub data: &'a mut [f64],
}

pub const RHO_INIT: f64 = 0.5;

impl ModelParams {
    /// Tables and projection weights are drawn from `U(-1/√dim, 1/√dim)`;
    /// biases, gate weights, band logits and coefficients start at zero and
    /// `rho` at 0.5.
    pub fn init(shape: &ModelShape, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (shape.dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let mut table = |rows: usize| Array2::from_shape_simple_fn((rows, shape.dim), || dist.sample(rng));
        let user_tables = [
            table(shape.num_users),
            table(shape.num_users),
            table(shape.num_users),
        ];
        let item_id_table = table(shape.num_items);
        let visual_weight = table(shape.visual_dim);
        let text_weight = table(shape.text_dim);
        let mut params = Self::zeros(shape);
        params.user_tables = user_tables;
        params.item_id_table = item_id_table;
        params.visual_proj.weight = visual_weight;
        params.text_proj.weight = text_weight;
        params.rho = RHO_INIT;
        params
    }

    pub fn zeros(shape: &ModelShape) -> Self {
        let d = shape.dim;
        let proj = |feat: usize| Projection {
            weight: Array2::zeros((feat, d)),
            bias: Array1::zeros(d),
        };
        ModelParams {
            user_tables: [
                Array2::zeros((shape.num_users, d)),
                Array2::zeros((shape.num_users, d)),
                Array2::zeros((shape.num_users, d)),
            ],
            item_id_table: Array2::zeros((shape.num_items, d)),
            visual_proj: proj(shape.visual_dim),
            text_proj: proj(shape.text_dim),
            gate_weight: Array2::zeros((3 * d, shape.bands)),
            gate_bias: Array1::zeros(shape.bands),
            rho: 0.0,
            band_logits: Array1::zeros(shape.bands),
            coeff: shape.with_coeff.then(|| CoeffParams {
                beta_u: Array1::zeros(shape.num_users),
                beta_i: Array1::zeros(shape.num_items),
                a_s: 0.0,
                a_b: 0.0,
            }),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            num_users: self.user_tables[0].nrows(),
            num_items: self.item_id_table.nrows(),
            dim: self.item_id_table.ncols(),
            bands: self.band_logits.len(),
            visual_dim: self.visual_proj.weight.nrows(),
            text_dim: self.text_proj.weight.nrows(),
            with_coeff: self.coeff.is_some(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    pub fn dim(&self) -> usize {
        self.item_id_table.ncols()
    }

    pub fn num_bands(&self) -> usize {
        self.band_logits.len()
    }

    pub fn projection(&self, channel: Channel) -> Option<&Projection> {
        match channel {
            Channel::Id => None,
            Channel::Visual => Some(&self.visual_proj),
            Channel::Text => Some(&self.text_proj),
        }
    }

    pub fn projection_mut(&mut self, channel: Channel) -> Option<&mut Projection> {
        match channel {
            Channel::Id => None,
            Channel::Visual => Some(&mut self.visual_proj),
            Channel::Text => Some(&mut self.text_proj),
        }
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn arr<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a ndarray::Array<f64, D>,
        ) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: a.shape().to_vec(),
                data: a.as_slice().expect("standard layout"),
            }
        }
        fn scalar<'a>(name: &'static str, v: &'a f64) -> TensorRef<'a> {
            TensorRef {
                name,
                shape: vec![],
                data: std::slice::from_ref(v),
            }
        }
        let mut out = vec![
            arr("user_table.id", &self.user_tables[0]),
            arr("user_table.visual", &self.user_tables[1]),
            arr("user_table.text", &self.user_tables[2]),
            arr("item_id_table", &self.item_id_table),
            arr("proj.visual.weight", &self.visual_proj.weight),
            arr("proj.visual.bias", &self.visual_proj.bias),
            arr("proj.text.weight", &self.text_proj.weight),
            arr("proj.text.bias", &self.text_proj.bias),
            arr("gate.weight", &self.gate_weight),
            arr("gate.bias", &self.gate_bias),
            scalar("gate.rho", &self.rho),
            arr("band_logits", &self.band_logits),
        ];
        if let Some(c) = &self.coeff {
            out.push(arr("coeff.beta_u", &c.beta_u));
            out.push(arr("coeff.beta_i", &c.beta_i));
            out.push(scalar("coeff.a_s", &c.a_s));
            out.push(scalar("coeff.a_b", &c.a_b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        fn arr<'a, D: ndarray::Dimension>(
            name: &'static str,
            a: &'a mut ndarray::Array<f64, D>,
        ) -> TensorMut<'a> {
            TensorMut {
                name,
                data: a.as_slice_mut().expect("standard layout"),
            }
        }
        fn scalar<'a>(name: &'static str, v: &'a mut f64) -> TensorMut<'a> {
            TensorMut {
                name,
                data: std::slice::from_mut(v),
            }
        }
        let [ut_id, ut_v, ut_t] = &mut self.user_tables;
        let mut out = vec![
            arr("user_table.id", ut_id),
            arr("user_table.visual", ut_v),
            arr("user_table.text", ut_t),
            arr("item_id_table", &mut self.item_id_table),
            arr("proj.visual.weight", &mut self.visual_proj.weight),
            arr("proj.visual.bias", &mut self.visual_proj.bias),
            arr("proj.text.weight", &mut self.text_proj.weight),
            arr("proj.text.bias", &mut self.text_proj.bias),
            arr("gate.weight", &mut self.gate_weight),
            arr("gate.bias", &mut self.gate_bias),
            scalar("gate.rho", &mut self.rho),
            arr("band_logits", &mut self.band_logits),
        ];
        if let Some(c) = &mut self.coeff {
            out.push(arr("coeff.beta_u", &mut c.beta_u));
            out.push(arr("coeff.beta_i", &mut c.beta_i));
            out.push(scalar("coeff.a_s", &mut c.a_s));
            out.push(scalar("coeff.a_b", &mut c.a_b));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Rebuilds parameters from named tensors, e.g. a checkpoint payload.
    pub fn from_tensors(shape: &ModelShape, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut params = Self::zeros(shape);
        let expected: Vec<(&'static str, Vec<usize>)> = params
            .tensors()
            .iter()
            .map(|t| (t.name, t.shape.clone()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (dst, ((name, shape), (src_name, src_shape, src))) in params
            .tensors_mut()
            .into_iter()
            .zip(expected.iter().zip(tensors))
        {
            if name != src_name || shape != src_shape {
                return Err(Error::Format(format!(
                    "tensor `{src_name}` {src_shape:?} does not match `{name}` {shape:?}"
                )));
            }
            dst.data.copy_from_slice(src);
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(with_coeff: bool) -> ModelShape {
        ModelShape {
            num_users: 3,
            num_items: 4,
            dim: 64,
            bands: 3,
            visual_dim: 5,
            text_dim: 6,
            with_coeff,
        }
    }

    #[test]
    fn init_follows_documented_scheme() {
        let p = ModelParams::init(&shape(false), &mut ChaCha8Rng::seed_from_u64(1));
        let bound = 1.0 / 8.0;
        assert!(p.user_tables[0].iter().all(|v| v.abs() <= bound));
        assert!(p.item_id_table.iter().any(|v| *v != 0.0));
        assert!(p.gate_weight.iter().all(|v| *v == 0.0));
        assert!(p.band_logits.iter().all(|v| *v == 0.0));
        assert_eq!(p.rho, 0.5);
        assert_eq!(p.gate_weight.dim(), (192, 3));
        assert!(p.coeff.is_none());
    }

    #[test]
    fn tensor_views_cover_every_parameter() {
        let mut p = ModelParams::init(&shape(true), &mut ChaCha8Rng::seed_from_u64(2));
        let names: Vec<_> = p.tensors().iter().map(|t| t.name).collect();
        assert_eq!(names.len(), 16);
        let mut_names: Vec<_> = p.tensors_mut().iter().map(|t| t.name).collect();
        assert_eq!(names, mut_names);
        let total = 3 * 3 * 64 + 4 * 64 + 5 * 64 + 64 + 6 * 64 + 64 + 192 * 3 + 3 + 1 + 3 + 3 + 4 + 2;
        assert_eq!(p.param_count(), total);

        let dump: Vec<_> = p
            .tensors()
            .iter()
            .map(|t| (t.name.to_string(), t.shape.clone(), t.data.to_vec()))
            .collect();
        let back = ModelParams::from_tensors(&p.shape(), &dump).unwrap();
        assert_eq!(back, p);
    }
}
