//! Frequency bands over channel representations and the gated band fusion
//! that produces the final ranking embeddings.
//!
//! Each 64-dim channel block is split into `M` contiguous bands of an
//! orthonormal basis `V` (right singular vectors in descending order for
//! the SVD mode). For a node state `z`, the band slice is
//! `h_m = z V_m V_mᵀ`. Bands are concatenated across channels and fused as
//!
//! ```text
//! φ(z) = sigmoid(W_gᵀ z + b_g),  α_m = 1 + ρ·φ_m(z),  ω_m = sigmoid(a_m)
//! e    = Σ_m ω_m α_m h_m
//! ```
//!
//! Bases are computed on detached embeddings and held fixed between
//! refreshes, so the forward pass is linear in `z` through the band path.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::encoder::ChannelEmbeddings;
use crate::error::{Error, Result};
use crate::params::{ModelParams, CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandMode {
    Svd,
    /// Every band receives `Z / M`; no spectral separation.
    EqualCapacity,
    Gram,
    Dct,
    RandomOrtho,
}

impl BandMode {
    pub fn name(self) -> &'static str {
        match self {
            BandMode::Svd => "svd",
            BandMode::EqualCapacity => "equal",
            BandMode::Gram => "gram",
            BandMode::Dct => "dct",
            BandMode::RandomOrtho => "random",
        }
    }
}

impl FromStr for BandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(BandMode::Svd),
            "equal" | "equal_capacity" => Ok(BandMode::EqualCapacity),
            "gram" => Ok(BandMode::Gram),
            "dct" => Ok(BandMode::Dct),
            "random" | "random_ortho" => Ok(BandMode::RandomOrtho),
            other => Err(Error::Config(format!("unknown band mode `{other}`"))),
        }
    }
}

/// Contiguous band widths; the remainder goes to the leading bands
/// (64 into 3 gives 22/21/21).
pub fn band_widths(dim: usize, bands: usize) -> Result<Vec<usize>> {
    if bands == 0 || bands > dim {
        return Err(Error::Config(format!(
            "band count {bands} must lie in 1..={dim}"
        )));
    }
    let base = dim / bands;
    let extra = dim % bands;
    Ok((0..bands).map(|m| base + usize::from(m < extra)).collect())
}

/// Frozen per-channel band projectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSet {
    pub mode: BandMode,
    pub widths: Vec<usize>,
    /// Per channel `dim × dim` basis with directions as columns, or `None`
    /// for the equal-capacity control.
    pub bases: Option<[Array2<f64>; 3]>,
}

impl BandSet {
    pub fn num_bands(&self) -> usize {
        self.widths.len()
    }

    pub fn dim(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.widths
            .iter()
            .map(|&w| {
                let r = start..start + w;
                start += w;
                r
            })
            .collect()
    }

    /// Basis coordinates `Vᵀ z` of one channel vector.
    fn coords(&self, channel: usize, z: &[f64]) -> Vec<f64> {
        match &self.bases {
            Some(bases) => {
                let v = &bases[channel];
                (0..v.ncols())
                    .map(|k| v.column(k).iter().zip(z).map(|(a, b)| a * b).sum())
                    .collect()
            }
            None => z.to_vec(),
        }
    }

    /// `Σ_k coef_k · y_k · v_k`
    fn expand(&self, channel: usize, y: &[f64], coef: impl Fn(usize) -> f64) -> Vec<f64> {
        let bases = self.bases.as_ref().expect("expand requires a basis");
        let v = &bases[channel];
        let mut out = vec![0.0; v.nrows()];
        for (k, &yk) in y.iter().enumerate() {
            let w = coef(k) * yk;
            if w != 0.0 {
                for (o, &vk) in out.iter_mut().zip(v.column(k).iter()) {
                    *o += w * vk;
                }
            }
        }
        out
    }

    fn band_of(&self) -> Vec<usize> {
        self.ranges()
            .iter()
            .enumerate()
            .flat_map(|(m, r)| r.clone().map(move |_| m))
            .collect()
    }

    /// Band slice of a single channel vector.
    pub fn channel_slice(&self, channel: usize, z: &[f64], band: usize) -> Vec<f64> {
        match &self.bases {
            Some(_) => {
                let y = self.coords(channel, z);
                let range = self.ranges()[band].clone();
                self.expand(channel, &y, |k| if range.contains(&k) { 1.0 } else { 0.0 })
            }
            None => {
                let m = self.num_bands() as f64;
                z.iter().map(|v| v / m).collect()
            }
        }
    }

    /// Per-band concatenated slices `h^m_n = [h^{id,m}; h^{v,m}; h^{t,m}]`.
    pub fn band_slices(&self, z: &ChannelEmbeddings, node: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut out = vec![Vec::with_capacity(3 * d); self.num_bands()];
        let ranges = self.ranges();
        for ch in CHANNELS {
            let zc = z.nodes[ch.index()].row(node).to_vec();
            match &self.bases {
                Some(_) => {
                    let y = self.coords(ch.index(), &zc);
                    for (slot, range) in out.iter_mut().zip(&ranges) {
                        slot.extend(self.expand(ch.index(), &y, |k| if range.contains(&k) { 1.0 } else { 0.0 }));
                    }
                }
                None => {
                    for (m, slot) in out.iter_mut().enumerate() {
                        slot.extend(self.channel_slice(ch.index(), &zc, m));
                    }
                }
            }
        }
        out
    }
}

pub fn fit_bands(z: &ChannelEmbeddings, mode: BandMode, bands: usize, seed: u64) -> Result<BandSet> {
    let dim = z.dim();
    let widths = band_widths(dim, bands)?;
    let bases = match mode {
        BandMode::EqualCapacity => None,
        BandMode::Dct => {
            let b = dct_basis(dim);
            Some([b.clone(), b.clone(), b])
        }
        BandMode::RandomOrtho => {
            let b = random_orthogonal_basis(dim, seed);
            Some([b.clone(), b.clone(), b])
        }
        BandMode::Svd | BandMode::Gram => {
            let mut out = Vec::with_capacity(3);
            for ch in CHANNELS {
                let m = &z.nodes[ch.index()];
                let basis = if mode == BandMode::Svd {
                    svd_basis(m)
                } else {
                    gram_basis(m)
                };
                out.push(basis.ok_or_else(|| {
                    Error::Numeric(format!(
                        "{} decomposition did not converge for channel `{}`",
                        mode.name(),
                        ch.name()
                    ))
                })?);
            }
            let [a, b, c]: [Array2<f64>; 3] = out.try_into().expect("three channels");
            Some([a, b, c])
        }
    };
    Ok(BandSet {
        mode,
        widths,
        bases,
    })
}

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

/// Orders columns by descending `values` (stable on index) and makes the
/// largest-magnitude entry of every column positive.
fn ordered_basis(vectors: &DMatrix<f64>, values: &[f64]) -> Array2<f64> {
    let d = vectors.nrows();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut out = Array2::zeros((d, order.len()));
    for (k, &src) in order.iter().enumerate() {
        let col = vectors.column(src);
        let mut pivot = 0;
        for r in 1..d {
            if col[r].abs() > col[pivot].abs() {
                pivot = r;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            out[(r, k)] = sign * col[r];
        }
    }
    out
}

/// Right singular vectors of the stacked node matrix.
fn svd_basis(m: &Array2<f64>) -> Option<Array2<f64>> {
    let (n, d) = m.dim();
    // Pad short matrices so the thin SVD still yields a full basis.
    let mut a = to_dmatrix(m);
    if n < d {
        a = a.resize_vertically(d, 0.0);
    }
    let svd = a.try_svd(false, true, f64::EPSILON, 10_000)?;
    let v_t = svd.v_t?;
    let v = v_t.transpose();
    let values: Vec<f64> = svd.singular_values.iter().copied().collect();
    Some(ordered_basis(&v, &values))
}

/// Eigenvectors of `ZᵀZ`.
fn gram_basis(m: &Array2<f64>) -> Option<Array2<f64>> {
    let gram = m.t().dot(m);
    let eig = nalgebra::SymmetricEigen::try_new(to_dmatrix(&gram), f64::EPSILON, 10_000)?;
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    Some(ordered_basis(&eig.eigenvectors, &values))
}

/// Orthonormal DCT-II basis with columns ordered from low to high frequency.
pub fn dct_basis(dim: usize) -> Array2<f64> {
    let n = dim as f64;
    Array2::from_shape_fn((dim, dim), |(j, k)| {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        scale * (PI * (j as f64 + 0.5) * k as f64 / n).cos()
    })
}

/// Q factor of a seeded Gaussian matrix, with signs fixed by `diag(R) > 0`.
pub fn random_orthogonal_basis(dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    Array2::from_shape_fn((dim, dim), |(i, k)| {
        let sign = if r[(k, k)] < 0.0 { -1.0 } else { 1.0 };
        sign * q[(i, k)]
    })
}

/// Final ranking embeddings plus the gate activations that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedEmbeddings {
    pub num_users: usize,
    /// `(num_users + num_items) × 3·dim`
    pub e: Array2<f64>,
    /// Gate outputs `φ_m(z_n)`, `(num_users + num_items) × M`.
    pub phi: Array2<f64>,
}

impl FusedEmbeddings {
    pub fn user(&self, u: usize) -> ndarray::ArrayView1<'_, f64> {
        self.e.row(u)
    }

    pub fn item(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.e.row(self.num_users + i)
    }

    pub fn num_items(&self) -> usize {
        self.e.nrows() - self.num_users
    }

    /// Band gate values `α_m = 1 + ρ φ_m` for one node.
    pub fn alpha(&self, node: usize, rho: f64) -> Vec<f64> {
        self.phi.row(node).iter().map(|p| 1.0 + rho * p).collect()
    }

    /// Base scores of one user against every item.
    pub fn user_scores(&self, u: usize) -> Vec<f64> {
        let items = self.e.slice(ndarray::s![self.num_users.., ..]);
        items.dot(&self.user(u)).to_vec()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gate_logits(params: &ModelParams, zn: &[f64]) -> Vec<f64> {
    let w = &params.gate_weight;
    (0..w.ncols())
        .map(|m| {
            params.gate_bias[m]
                + w.column(m)
                    .iter()
                    .zip(zn)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

pub fn band_weights(params: &ModelParams) -> Vec<f64> {
    params.band_logits.iter().map(|&a| sigmoid(a)).collect()
}

/// Gated fusion of one node; returns `(e_n, φ_n)`.
fn fuse_node(z: &ChannelEmbeddings, bands: &BandSet, params: &ModelParams, omega: &[f64], node: usize) -> (Vec<f64>, Vec<f64>) {
    let zn = z.concat(node);
    let phi: Vec<f64> = gate_logits(params, &zn).into_iter().map(sigmoid).collect();
    let coef: Vec<f64> = omega
        .iter()
        .zip(&phi)
        .map(|(w, p)| w * (1.0 + params.rho * p))
        .collect();
    let d = z.dim();
    let mut e = Vec::with_capacity(3 * d);
    match &bands.bases {
        Some(_) => {
            let band_of = bands.band_of();
            for ch in 0..3 {
                let y = bands.coords(ch, &zn[ch * d..(ch + 1) * d]);
                e.extend(bands.expand(ch, &y, |k| coef[band_of[k]]));
            }
        }
        None => {
            let kappa = coef.iter().sum::<f64>() / bands.num_bands() as f64;
            e.extend(zn.iter().map(|v| kappa * v));
        }
    }
    (e, phi)
}

pub fn fuse(z: &ChannelEmbeddings, bands: &BandSet, params: &ModelParams) -> FusedEmbeddings {
    assert_eq!(params.num_bands(), bands.num_bands(), "gate/band count mismatch");
    assert_eq!(params.gate_weight.nrows(), 3 * z.dim(), "gate input width mismatch");
    let omega = band_weights(params);
    let n = z.num_nodes();
    let m = bands.num_bands();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|node| fuse_node(z, bands, params, &omega, node))
        .collect();
    let mut e = Array2::zeros((n, 3 * z.dim()));
    let mut phi = Array2::zeros((n, m));
    for (node, (en, pn)) in rows.into_iter().enumerate() {
        e.row_mut(node).assign(&ndarray::ArrayView1::from(&en));
        phi.row_mut(node).assign(&ndarray::ArrayView1::from(&pn));
    }
    FusedEmbeddings {
        num_users: z.num_users,
        e,
        phi,
    }
}

pub fn base_score(e: &FusedEmbeddings, u: usize, i: usize) -> f64 {
    e.user(u).dot(&e.item(i))
}

/// Upstream gradients arriving at one node's fused quantities.
#[derive(Clone, Debug, Default)]
pub struct NodeGrad {
    /// `∂L/∂e_n`, length `3·dim` (empty when zero).
    pub e: Vec<f64>,
    /// `∂L/∂h^m_n` per band, each `3·dim` (empty when zero).
    pub bands: Vec<Vec<f64>>,
    /// `∂L/∂α^m_n` from direct penalties on the gates (empty when zero).
    pub alpha: Vec<f64>,
}

/// Backward pass of [`fuse`] for the listed nodes. Gate and band-weight
/// gradients go to `grads`; channel-state gradients are added into `grad_z`.
pub fn fuse_backward(
    z: &ChannelEmbeddings,
    bands: &BandSet,
    params: &ModelParams,
    fused: &FusedEmbeddings,
    node_grads: &BTreeMap<usize, NodeGrad>,
    grads: &mut ModelParams,
    grad_z: &mut [Array2<f64>; 3],
) {
    let d = z.dim();
    let m_count = bands.num_bands();
    let omega = band_weights(params);
    let band_of = bands.band_of();
    let ranges = bands.ranges();

    for (&node, ng) in node_grads {
        let zn = z.concat(node);
        let phi: Vec<f64> = fused.phi.row(node).to_vec();
        let alpha: Vec<f64> = phi.iter().map(|p| 1.0 + params.rho * p).collect();
        let coef: Vec<f64> = omega.iter().zip(&alpha).map(|(w, a)| w * a).collect();

        // s_m = <∂L/∂e, h^m>
        let mut s = vec![0.0; m_count];
        let mut gz = vec![0.0; 3 * d];
        for ch in 0..3 {
            let zc = &zn[ch * d..(ch + 1) * d];
            let ge = (!ng.e.is_empty()).then(|| &ng.e[ch * d..(ch + 1) * d]);
            match &bands.bases {
                Some(_) => {
                    let y = bands.coords(ch, zc);
                    let mut gy_total = vec![0.0; d];
                    if let Some(ge) = ge {
                        let gy = bands.coords(ch, ge);
                        for k in 0..d {
                            s[band_of[k]] += gy[k] * y[k];
                            gy_total[k] += coef[band_of[k]] * gy[k];
                        }
                    }
                    for (m, gh) in ng.bands.iter().enumerate() {
                        if gh.is_empty() {
                            continue;
                        }
                        let gy = bands.coords(ch, &gh[ch * d..(ch + 1) * d]);
                        for k in ranges[m].clone() {
                            gy_total[k] += gy[k];
                        }
                    }
                    let back = bands.expand(ch, &gy_total, |_| 1.0);
                    for (g, b) in gz[ch * d..(ch + 1) * d].iter_mut().zip(back) {
                        *g += b;
                    }
                }
                None => {
                    let inv_m = 1.0 / m_count as f64;
                    let kappa = coef.iter().sum::<f64>() * inv_m;
                    if let Some(ge) = ge {
                        let dot: f64 = ge.iter().zip(zc).map(|(a, b)| a * b).sum();
                        for sm in s.iter_mut() {
                            *sm += dot * inv_m;
                        }
                        for (g, &v) in gz[ch * d..(ch + 1) * d].iter_mut().zip(ge) {
                            *g += kappa * v;
                        }
                    }
                    for gh in ng.bands.iter().filter(|gh| !gh.is_empty()) {
                        for (g, &v) in gz[ch * d..(ch + 1) * d].iter_mut().zip(&gh[ch * d..(ch + 1) * d]) {
                            *g += inv_m * v;
                        }
                    }
                }
            }
        }

        let mut g_logit = vec![0.0; m_count];
        for m in 0..m_count {
            let direct = ng.alpha.get(m).copied().unwrap_or(0.0);
            let g_alpha = omega[m] * s[m] + direct;
            grads.band_logits[m] += alpha[m] * s[m] * omega[m] * (1.0 - omega[m]);
            grads.rho += g_alpha * phi[m];
            g_logit[m] = g_alpha * params.rho * phi[m] * (1.0 - phi[m]);
        }
        for m in 0..m_count {
            if g_logit[m] == 0.0 {
                continue;
            }
            grads.gate_bias[m] += g_logit[m];
            let mut col = grads.gate_weight.column_mut(m);
            for (w, &zv) in col.iter_mut().zip(&zn) {
                *w += zv * g_logit[m];
            }
            for (g, w) in gz.iter_mut().zip(params.gate_weight.column(m).iter()) {
                *g += w * g_logit[m];
            }
        }

        for ch in 0..3 {
            let mut row = grad_z[ch].row_mut(node);
            for (dst, &g) in row.iter_mut().zip(&gz[ch * d..(ch + 1) * d]) {
                *dst += g;
            }
        }
    }
}

/// Frobenius norm of each band's reconstruction over all nodes of one channel.
pub fn band_energy(z: &ChannelEmbeddings, bands: &BandSet, channel: usize) -> Vec<f64> {
    let m = &z.nodes[channel];
    let mut energy = vec![0.0; bands.num_bands()];
    for row in m.axis_iter(Axis(0)) {
        let zr = row.to_vec();
        for (b, e) in energy.iter_mut().enumerate() {
            *e += bands
                .channel_slice(channel, &zr, b)
                .iter()
                .map(|v| v * v)
                .sum::<f64>();
        }
    }
    energy.into_iter().map(f64::sqrt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelShape;
    use crate::testutil::assert_close;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_embeddings(nu: usize, ni: usize, d: usize, seed: u64) -> ChannelEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = nu + ni;
        ChannelEmbeddings {
            num_users: nu,
            nodes: [0, 1, 2].map(|_| Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))),
        }
    }

    fn shape(nu: usize, ni: usize, d: usize, m: usize) -> ModelShape {
        ModelShape {
            num_users: nu,
            num_items: ni,
            dim: d,
            bands: m,
            visual_dim: 1,
            text_dim: 1,
            with_coeff: false,
        }
    }

    const BASIS_MODES: [BandMode; 4] = [BandMode::Svd, BandMode::Gram, BandMode::Dct, BandMode::RandomOrtho];

    #[test]
    fn widths_split_remainder_forward() {
        assert_eq!(band_widths(64, 3).unwrap(), vec![22, 21, 21]);
        assert_eq!(band_widths(64, 1).unwrap(), vec![64]);
        assert!(band_widths(64, 65).is_err());
        assert!(band_widths(64, 0).is_err());
    }

    #[test]
    fn rank_one_matrix_lives_in_first_band() {
        let (nu, ni, d) = (5, 7, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u: Vec<f64> = (0..nu + ni).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = Array2::from_shape_fn((nu + ni, d), |(r, c)| u[r] * v[c]);
        let z = ChannelEmbeddings {
            num_users: nu,
            nodes: [m.clone(), m.clone(), m],
        };
        let bands = fit_bands(&z, BandMode::Svd, 3, 0).unwrap();
        for node in 0..nu + ni {
            let zr = z.nodes[0].row(node).to_vec();
            let h1 = bands.channel_slice(0, &zr, 0);
            for (a, b) in h1.iter().zip(&zr) {
                assert_close(*a, *b, 1e-9);
            }
            for band in 1..3 {
                let norm: f64 = bands.channel_slice(0, &zr, band).iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm < 1e-5, "band {band} norm {norm}");
            }
        }
    }

    #[test]
    fn equal_capacity_slices_are_thirds() {
        let z = random_embeddings(3, 4, 6, 1);
        let bands = fit_bands(&z, BandMode::EqualCapacity, 3, 0).unwrap();
        assert!(bands.bases.is_none());
        let slices = bands.band_slices(&z, 2);
        let full = z.concat(2);
        for k in 0..full.len() {
            for s in &slices {
                assert_eq!(s[k], full[k] / 3.0);
            }
            let sum: f64 = slices.iter().map(|s| s[k]).sum();
            assert_close(sum, full[k], 1e-15);
        }
    }

    #[test]
    fn full_single_band_is_identity() {
        let z = random_embeddings(2, 3, 8, 4);
        for mode in BASIS_MODES {
            let bands = fit_bands(&z, mode, 1, 5).unwrap();
            let slices = bands.band_slices(&z, 1);
            for (a, b) in slices[0].iter().zip(z.concat(1)) {
                assert_close(*a, b, 1e-12);
            }
        }
        let zero = ChannelEmbeddings {
            num_users: 1,
            nodes: [0, 1, 2].map(|_| Array2::zeros((2, 8))),
        };
        let bands = fit_bands(&zero, BandMode::Dct, 3, 0).unwrap();
        assert!(bands.band_slices(&zero, 0).iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn neutral_gate_halves_the_embedding() {
        let z = random_embeddings(3, 4, 6, 8);
        let bands = fit_bands(&z, BandMode::Svd, 3, 0).unwrap();
        let mut params = ModelParams::zeros(&shape(3, 4, 6, 3));
        params.rho = 0.0;
        let fused = fuse(&z, &bands, &params);
        for node in 0..7 {
            for (a, b) in fused.e.row(node).iter().zip(z.concat(node)) {
                assert_close(*a, 0.5 * b, 1e-12);
            }
        }
    }

    #[test]
    fn saturated_band_weight_returns_gated_state() {
        let z = random_embeddings(2, 2, 4, 3);
        let bands = fit_bands(&z, BandMode::Svd, 1, 0).unwrap();
        let mut params = ModelParams::zeros(&shape(2, 2, 4, 1));
        params.rho = 0.5;
        params.band_logits[0] = 40.0;
        let fused = fuse(&z, &bands, &params);
        for node in 0..4 {
            let alpha = fused.alpha(node, params.rho)[0];
            assert_close(alpha, 1.25, 1e-12);
            for (a, b) in fused.e.row(node).iter().zip(z.concat(node)) {
                assert_close(*a, alpha * b, 1e-9);
            }
        }
    }

    #[test]
    fn base_score_is_inner_product() {
        let mut e = Array2::zeros((2, 4));
        e[(0, 0)] = 1.0;
        e[(0, 1)] = 2.0;
        e[(1, 0)] = 3.0;
        e[(1, 1)] = 1.0;
        let fused = FusedEmbeddings {
            num_users: 1,
            e,
            phi: Array2::zeros((2, 1)),
        };
        assert_eq!(base_score(&fused, 0, 0), 5.0);
        assert_eq!(fused.user_scores(0), vec![5.0]);
    }

    #[test]
    fn svd_energy_is_ordered() {
        let z = random_embeddings(20, 30, 16, 21);
        let bands = fit_bands(&z, BandMode::Svd, 3, 0).unwrap();
        for ch in 0..3 {
            let e = band_energy(&z, &bands, ch);
            assert!(e[0] >= e[1] && e[1] >= e[2], "{e:?}");
        }
    }

    #[test]
    fn equal_capacity_keeps_parameter_count() {
        let shape = shape(4, 5, 8, 3);
        let a = ModelParams::zeros(&shape);
        // Band mode never changes the parameter layout.
        let z = random_embeddings(4, 5, 8, 2);
        let svd = fit_bands(&z, BandMode::Svd, 3, 0).unwrap();
        let eq = fit_bands(&z, BandMode::EqualCapacity, 3, 0).unwrap();
        assert_eq!(svd.num_bands(), eq.num_bands());
        assert_eq!(a.param_count(), ModelParams::zeros(&shape).param_count());
    }

    #[test]
    fn svd_sign_convention_is_deterministic() {
        let z = random_embeddings(6, 6, 5, 30);
        let a = fit_bands(&z, BandMode::Svd, 2, 0).unwrap();
        let b = fit_bands(&z, BandMode::Svd, 2, 0).unwrap();
        assert_eq!(a, b);
        for basis in a.bases.as_ref().unwrap() {
            for col in basis.columns() {
                let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
                assert!(pivot > 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn bases_are_orthonormal_and_complete(seed in any::<u64>(), m in 1usize..5) {
            let z = random_embeddings(7, 9, 12, seed);
            for mode in BASIS_MODES {
                let bands = fit_bands(&z, mode, m, seed).unwrap();
                for basis in bands.bases.as_ref().unwrap() {
                    let gram = basis.t().dot(basis);
                    for ((r, c), v) in gram.indexed_iter() {
                        let expected = if r == c { 1.0 } else { 0.0 };
                        prop_assert!((v - expected).abs() < 1e-9);
                    }
                }
                for node in [0, 8, 15] {
                    let slices = bands.band_slices(&z, node);
                    let full = z.concat(node);
                    for k in 0..full.len() {
                        let sum: f64 = slices.iter().map(|s| s[k]).sum();
                        prop_assert!((sum - full[k]).abs() <= 1e-9 * (1.0 + full[k].abs()));
                    }
                    // idempotence: projecting a band slice again leaves it unchanged
                    for (b, s) in slices.iter().enumerate() {
                        let again = bands.channel_slice(0, &s[..12], b);
                        for (x, y) in again.iter().zip(&s[..12]) {
                            prop_assert!((x - y).abs() < 1e-9);
                        }
                    }
                }
            }
        }

        #[test]
        fn fuse_backward_matches_directional_derivative(seed in any::<u64>()) {
            let (nu, ni, d, m) = (2, 3, 4, 3);
            let z = random_embeddings(nu, ni, d, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            let mut params = ModelParams::zeros(&shape(nu, ni, d, m));
            params.gate_weight.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            params.gate_bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            params.band_logits.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            params.rho = 0.7;
            for mode in [BandMode::Svd, BandMode::EqualCapacity] {
                let bands = fit_bands(&z, mode, m, 0).unwrap();
                let fused = fuse(&z, &bands, &params);
                let node = 3;
                let ge: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
                // L = <ge, e_node>
                let mut grads = params.zeros_like();
                let mut grad_z = [0, 1, 2].map(|_| Array2::zeros((nu + ni, d)));
                let mut map = BTreeMap::new();
                map.insert(node, NodeGrad { e: ge.clone(), ..Default::default() });
                fuse_backward(&z, &bands, &params, &fused, &map, &mut grads, &mut grad_z);

                let loss = |p: &ModelParams, zz: &ChannelEmbeddings| -> f64 {
                    let f = fuse(zz, &bands, p);
                    f.e.row(node).iter().zip(&ge).map(|(a, b)| a * b).sum()
                };
                let h = 1e-6;
                let mut pp = params.clone();
                pp.rho += h;
                let mut pm = params.clone();
                pm.rho -= h;
                let fd = (loss(&pp, &z) - loss(&pm, &z)) / (2.0 * h);
                prop_assert!((fd - grads.rho).abs() < 1e-6 * (1.0 + fd.abs()));

                let mut zp = z.clone();
                zp.nodes[1][(node, 2)] += h;
                let mut zm = z.clone();
                zm.nodes[1][(node, 2)] -= h;
                let fd = (loss(&params, &zp) - loss(&params, &zm)) / (2.0 * h);
                prop_assert!((fd - grad_z[1][(node, 2)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
