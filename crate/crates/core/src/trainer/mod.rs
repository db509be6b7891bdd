//! Triple sampling, the composite objective with its reverse pass, and the
//! epoch loop with best-validation selection.

mod adam;
pub mod loss;

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use adam::{Adam, AdamConfig};

use crate::behavior::Residual;
use crate::calibrator::{
    calibrated_row, candidate_set_from_scores, conservative_logit, Calibration, CandidateSource, CoeffVariant,
    ScopeVariant,
};
use crate::data::{Dataset, Split};
use crate::encoder::{encode, encode_backward, ChannelEmbeddings, ContentInputs, EncoderConfig, Graphs};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, MetricsReport};
use crate::params::{CoeffParams, ModelParams, ModelShape};
use crate::spectral::{fit_bands, fuse, fuse_backward, sigmoid, BandMode, BandSet, FusedEmbeddings, NodeGrad};
use loss::{bpr_term, ib_node, loss_eta, loss_freq, Bands, FreqConfig, IbConfig};

/// Rejection attempts before a negative draw is abandoned.
pub const MAX_NEGATIVE_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub l2_reg: f64,
    pub lambda_base: f64,
    pub lambda_ib: f64,
    pub lambda_freq: f64,
    pub lambda_eta: f64,
    pub tau_eta: f64,
    pub alpha_ib: f64,
    pub mu_ib: f64,
    pub phi_plus: f64,
    pub tau_disc: f64,
    pub norm_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dim: usize,
    pub layers: usize,
    pub proj_bias: bool,
    pub bands: usize,
    #[serde(skip)]
    pub band_mode: BandMode,
    pub k_c_train: usize,
    pub k_c_eval: usize,
    pub lambda_b: f64,
    #[serde(skip)]
    pub scope: ScopeVariant,
    #[serde(skip)]
    pub coeff: CoeffVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            l2_reg: 1e-3,
            lambda_base: 0.2,
            lambda_ib: 1.0,
            lambda_freq: 0.001,
            lambda_eta: 0.0,
            tau_eta: 0.5,
            alpha_ib: 1.0,
            mu_ib: 1.0,
            phi_plus: 0.2,
            tau_disc: 0.2,
            norm_eps: 1e-8,
            epochs: 300,
            batch_size: 2048,
            seed: 2020,
            dim: 64,
            layers: 2,
            proj_bias: true,
            bands: 3,
            band_mode: BandMode::Svd,
            k_c_train: 200,
            k_c_eval: 200,
            lambda_b: 0.4,
            scope: ScopeVariant::Candidate,
            coeff: CoeffVariant::Fixed,
        }
    }
}

impl TrainConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            proj_bias: self.proj_bias,
        }
    }

    pub fn ib(&self) -> IbConfig {
        IbConfig {
            alpha_ib: self.alpha_ib,
            mu_ib: self.mu_ib,
            phi_plus: self.phi_plus,
        }
    }

    pub fn freq(&self) -> FreqConfig {
        FreqConfig {
            tau: self.tau_disc,
            eps: self.norm_eps,
        }
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            scope: self.scope,
            coeff: self.coeff,
            lambda_b: self.lambda_b,
            k_c: self.k_c_eval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr", self.lr),
            ("l2_reg", self.l2_reg),
            ("lambda_base", self.lambda_base),
            ("lambda_ib", self.lambda_ib),
            ("lambda_freq", self.lambda_freq),
            ("lambda_eta", self.lambda_eta),
            ("tau_eta", self.tau_eta),
            ("alpha_ib", self.alpha_ib),
            ("mu_ib", self.mu_ib),
            ("phi_plus", self.phi_plus),
            ("lambda_b", self.lambda_b),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.tau_disc <= 0.0 || self.norm_eps <= 0.0 {
            return Err(Error::Config("tau_disc and norm_eps must be positive".into()));
        }
        if self.batch_size == 0 || self.dim == 0 || self.k_c_train == 0 || self.k_c_eval == 0 {
            return Err(Error::Config("batch_size, dim and k_c must be at least 1".into()));
        }
        if self.bands == 0 || self.bands > self.dim {
            return Err(Error::Config(format!("bands must lie in 1..={}", self.dim)));
        }
        Ok(())
    }
}

/// Everything the trainer reads but never modifies.
#[derive(Clone, Copy)]
pub struct TrainInputs<'a> {
    pub ds: &'a Dataset,
    pub content: &'a ContentInputs,
    pub graphs: &'a Graphs,
    pub residual: &'a dyn Residual,
}

impl TrainInputs<'_> {
    pub fn model_shape(&self, cfg: &TrainConfig) -> ModelShape {
        ModelShape {
            num_users: self.ds.num_users,
            num_items: self.ds.num_items,
            dim: cfg.dim,
            bands: cfg.bands,
            visual_dim: self.content.visual.ncols(),
            text_dim: self.content.text.ncols(),
            with_coeff: cfg.coeff == CoeffVariant::Conservative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Triple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Uniform positive sampling over train interactions with rejection-sampled
/// negatives.
#[derive(Clone, Debug)]
pub struct Sampler {
    pairs: Vec<(usize, usize)>,
    warned: bool,
    pub skipped: usize,
}

impl Sampler {
    pub fn new(ds: &Dataset) -> Self {
        Sampler {
            pairs: ds.train_pairs(),
            warned: false,
            skipped: 0,
        }
    }

    pub fn num_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn sample(&mut self, ds: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Vec<Triple> {
        let mut out = Vec::with_capacity(batch_size);
        if self.pairs.is_empty() {
            return out;
        }
        for _ in 0..batch_size {
            let (user, pos) = self.pairs[rng.random_range(0..self.pairs.len())];
            let history = &ds.train_history[user];
            let neg = (0..MAX_NEGATIVE_TRIES)
                .map(|_| rng.random_range(0..ds.num_items))
                .find(|j| history.binary_search(j).is_err());
            match neg {
                Some(neg) => out.push(Triple { user, pos, neg }),
                None => {
                    self.skipped += 1;
                    if !self.warned {
                        warn!("user {user} has no sampleable negative after {MAX_NEGATIVE_TRIES} tries; skipping");
                        self.warned = true;
                    }
                }
            }
        }
        out
    }
}

/// One draw of [`Sampler::sample`] on a fresh sampler.
pub fn sample_batch(ds: &Dataset, batch_size: usize, rng: &mut impl Rng) -> Vec<Triple> {
    Sampler::new(ds).sample(ds, batch_size, rng)
}

/// Triples with detached scope flags and residual values attached.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    pub triples: Vec<Triple>,
    pub pos_in_scope: Vec<bool>,
    pub neg_in_scope: Vec<bool>,
    pub pos_b: Vec<f64>,
    pub neg_b: Vec<f64>,
}

/// Attaches train-scope flags computed from the detached `fused`
/// embeddings, one top-`k_c` scan per distinct batch user.
pub fn prepare_batch(
    triples: Vec<Triple>,
    fused: &FusedEmbeddings,
    residual: &dyn Residual,
    cfg: &TrainConfig,
) -> PreparedBatch {
    let (pos_in_scope, neg_in_scope) = match cfg.scope {
        ScopeVariant::Candidate => {
            let users: Vec<usize> = triples.iter().map(|t| t.user).collect::<BTreeSet<_>>().into_iter().collect();
            let sets: BTreeMap<usize, _> = users
                .par_iter()
                .map(|&u| {
                    let scores = fused.user_scores(u);
                    (u, candidate_set_from_scores(u, &scores, cfg.k_c_train, &[], CandidateSource::TrainDetached))
                })
                .collect();
            triples
                .iter()
                .map(|t| (sets[&t.user].contains(t.pos), sets[&t.user].contains(t.neg)))
                .unzip()
        }
        ScopeVariant::Global | ScopeVariant::NoTrainScope => (vec![true; triples.len()], vec![true; triples.len()]),
    };
    let pos_b = triples.iter().map(|t| residual.score(t.user, t.pos)).collect();
    let neg_b = triples.iter().map(|t| residual.score(t.user, t.neg)).collect();
    PreparedBatch {
        triples,
        pos_in_scope,
        neg_in_scope,
        pos_b,
        neg_b,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub rank: f64,
    pub base: f64,
    pub ib: f64,
    pub dec: f64,
    pub disc: f64,
    pub eta: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossParts {
    pub fn freq(&self) -> f64 {
        self.dec + self.disc
    }

    /// Weighted sum of the parts under `cfg`.
    pub fn combine(&self, cfg: &TrainConfig) -> f64 {
        self.rank
            + cfg.lambda_base * self.base
            + cfg.lambda_ib * self.ib
            + cfg.lambda_freq * self.freq()
            + cfg.lambda_eta * self.eta
            + self.reg
    }

    fn add_scaled(&mut self, other: &LossParts, w: f64) {
        self.rank += w * other.rank;
        self.base += w * other.base;
        self.ib += w * other.ib;
        self.dec += w * other.dec;
        self.disc += w * other.disc;
        self.eta += w * other.eta;
        self.reg += w * other.reg;
        self.total += w * other.total;
    }
}

/// Full forward pass: channel states and fused embeddings.
pub fn forward(
    params: &ModelParams,
    bands: &BandSet,
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
) -> (ChannelEmbeddings, FusedEmbeddings) {
    let z = encode(params, inputs.content, inputs.graphs, &cfg.encoder());
    let fused = fuse(&z, bands, params);
    (z, fused)
}

/// Fits bands on a detached encode of `params`.
pub fn refresh_bands(params: &ModelParams, inputs: &TrainInputs<'_>, cfg: &TrainConfig) -> Result<BandSet> {
    let z = encode(params, inputs.content, inputs.graphs, &cfg.encoder());
    fit_bands(&z, cfg.band_mode, cfg.bands, cfg.seed)
}

struct GradSink {
    dim3: usize,
    bands: usize,
    nodes: BTreeMap<usize, NodeGrad>,
}

impl GradSink {
    fn node(&mut self, n: usize) -> &mut NodeGrad {
        self.nodes.entry(n).or_default()
    }

    fn add_e(&mut self, n: usize, w: f64, v: ndarray::ArrayView1<'_, f64>) {
        let d = self.dim3;
        let g = self.node(n);
        if g.e.is_empty() {
            g.e = vec![0.0; d];
        }
        for (a, b) in g.e.iter_mut().zip(v.iter()) {
            *a += w * b;
        }
    }

    fn add_band(&mut self, n: usize, band: usize, w: f64, v: &[f64]) {
        let (d, m) = (self.dim3, self.bands);
        let g = self.node(n);
        if g.bands.is_empty() {
            g.bands = vec![Vec::new(); m];
        }
        if g.bands[band].is_empty() {
            g.bands[band] = vec![0.0; d];
        }
        for (a, b) in g.bands[band].iter_mut().zip(v) {
            *a += w * b;
        }
    }

    fn add_alpha(&mut self, n: usize, w: f64, v: &[f64]) {
        let m = self.bands;
        let g = self.node(n);
        if g.alpha.is_empty() {
            g.alpha = vec![0.0; m];
        }
        for (a, b) in g.alpha.iter_mut().zip(v) {
            *a += w * b;
        }
    }
}

/// Per-pair quantities of the calibrated score.
struct PairTerm {
    s_base: f64,
    correction: f64,
    /// `∂correction/∂s_base`
    dcorr_ds: f64,
    /// `∂correction/∂logit`
    dcorr_dlogit: f64,
    eta: f64,
    tanh_b: f64,
}

fn pair_term(
    coeff: Option<&CoeffParams>,
    user: usize,
    item: usize,
    s_base: f64,
    in_scope: bool,
    b: f64,
    lambda_b: f64,
) -> PairTerm {
    let scale = if in_scope { lambda_b * b } else { 0.0 };
    match coeff {
        None => PairTerm {
            s_base,
            correction: scale,
            dcorr_ds: 0.0,
            dcorr_dlogit: 0.0,
            eta: 1.0,
            tanh_b: b.tanh(),
        },
        Some(c) => {
            let eta = sigmoid(conservative_logit(c, user, item, s_base, b));
            let deta = eta * (1.0 - eta);
            let th = s_base.tanh();
            PairTerm {
                s_base,
                correction: scale * eta,
                dcorr_ds: scale * deta * c.a_s * (1.0 - th * th),
                dcorr_dlogit: scale * deta,
                eta,
                tanh_b: b.tanh(),
            }
        }
    }
}

/// Batch objective on precomputed forward state, optionally with the
/// gradient of `total` for every parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn objective(
    params: &ModelParams,
    bands: &BandSet,
    z: &ChannelEmbeddings,
    fused: &FusedEmbeddings,
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    batch: &PreparedBatch,
    want_grad: bool,
) -> Result<(LossParts, Option<ModelParams>)> {
    let coeff = match cfg.coeff {
        CoeffVariant::Fixed => None,
        CoeffVariant::Conservative => Some(params.coeff.as_ref().ok_or_else(|| {
            Error::Config("conservative coefficient requested but the model has no coefficient parameters".into())
        })?),
    };
    let nu = z.num_users;
    let m = bands.num_bands();
    let bsz = batch.triples.len();
    let mut parts = LossParts::default();
    let mut grads = params.zeros_like();
    if bsz == 0 {
        return Ok((parts, want_grad.then_some(grads)));
    }
    let inv_b = 1.0 / bsz as f64;
    let mut sink = GradSink {
        dim3: 3 * z.dim(),
        bands: m,
        nodes: BTreeMap::new(),
    };

    let terms: Vec<(PairTerm, PairTerm)> = batch
        .triples
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let eu = fused.user(t.user);
            let si = eu.dot(&fused.item(t.pos));
            let sj = eu.dot(&fused.item(t.neg));
            (
                pair_term(coeff, t.user, t.pos, si, batch.pos_in_scope[k], batch.pos_b[k], cfg.lambda_b),
                pair_term(coeff, t.user, t.neg, sj, batch.neg_in_scope[k], batch.neg_b[k], cfg.lambda_b),
            )
        })
        .collect();
    let mut deta = 0.0;
    if coeff.is_some() {
        let etas: Vec<f64> = terms.iter().flat_map(|(a, b)| [a.eta, b.eta]).collect();
        (parts.eta, deta) = loss_eta(&etas, cfg.tau_eta);
    }

    for (t, (pi, pj)) in batch.triples.iter().zip(&terms) {
        let delta = (pi.s_base + pi.correction) - (pj.s_base + pj.correction);
        let (l_rank, d_rank) = bpr_term(delta);
        let (l_base, d_base) = bpr_term(pi.s_base - pj.s_base);
        parts.rank += inv_b * l_rank;
        parts.base += inv_b * l_base;
        if !want_grad {
            continue;
        }
        let g_rank = inv_b * d_rank;
        let g_base = cfg.lambda_base * inv_b * d_base;
        let mut g_s = [g_rank * (1.0 + pi.dcorr_ds) + g_base, -g_rank * (1.0 + pj.dcorr_ds) - g_base];
        if let Some(c) = coeff {
            let gc = grads.coeff.as_mut().expect("coefficient gradients");
            for (slot, (p, item, sign)) in [(pi, t.pos, 1.0), (pj, t.neg, -1.0)].into_iter().enumerate() {
                let eta_grad = cfg.lambda_eta * deta * p.eta * (1.0 - p.eta);
                let g_logit = sign * g_rank * p.dcorr_dlogit + eta_grad;
                let th = p.s_base.tanh();
                g_s[slot] += eta_grad * c.a_s * (1.0 - th * th);
                gc.beta_u[t.user] += g_logit;
                gc.beta_i[item] += g_logit;
                gc.a_s += g_logit * th;
                gc.a_b += g_logit * p.tanh_b;
            }
        }
        let (u, i, j) = (t.user, nu + t.pos, nu + t.neg);
        sink.add_e(u, g_s[0], fused.e.row(i));
        sink.add_e(u, g_s[1], fused.e.row(j));
        sink.add_e(i, g_s[0], fused.e.row(u));
        sink.add_e(j, g_s[1], fused.e.row(u));
    }

    // Gate expansion over every node touched by the batch.
    let nodes: BTreeSet<usize> = batch
        .triples
        .iter()
        .flat_map(|t| [t.user, nu + t.pos, nu + t.neg])
        .collect();
    let inv_n = 1.0 / nodes.len() as f64;
    let ib_cfg = cfg.ib();
    for &n in &nodes {
        let (l, g) = ib_node(&fused.alpha(n, params.rho), &ib_cfg);
        parts.ib += inv_n * l;
        if want_grad && cfg.lambda_ib != 0.0 {
            sink.add_alpha(n, cfg.lambda_ib * inv_n, &g);
        }
    }

    if m > 1 {
        let (users, items): (Vec<Bands>, Vec<Bands>) = batch
            .triples
            .par_iter()
            .map(|t| (bands.band_slices(z, t.user), bands.band_slices(z, nu + t.pos)))
            .unzip();
        let out = loss_freq(&users, &items, &cfg.freq());
        parts.dec = out.dec;
        parts.disc = out.disc;
        if want_grad && cfg.lambda_freq != 0.0 {
            for (t, (gu, gi)) in batch.triples.iter().zip(out.grad_users.iter().zip(&out.grad_items)) {
                for band in 0..m {
                    sink.add_band(t.user, band, cfg.lambda_freq, &gu[band]);
                    sink.add_band(nu + t.pos, band, cfg.lambda_freq, &gi[band]);
                }
            }
        }
    }

    let users: BTreeSet<usize> = batch.triples.iter().map(|t| t.user).collect();
    let items: BTreeSet<usize> = batch.triples.iter().flat_map(|t| [t.pos, t.neg]).collect();
    let mut sq = 0.0;
    for &u in &users {
        for ch in 0..3 {
            sq += params.user_tables[ch].row(u).iter().map(|v| v * v).sum::<f64>();
        }
    }
    for &i in &items {
        sq += params.item_id_table.row(i).iter().map(|v| v * v).sum::<f64>();
    }
    parts.reg = cfg.l2_reg * inv_b * sq;
    parts.total = parts.combine(cfg);

    if !want_grad {
        return Ok((parts, None));
    }
    let w = 2.0 * cfg.l2_reg * inv_b;
    if w != 0.0 {
        for &u in &users {
            for ch in 0..3 {
                let row = params.user_tables[ch].row(u);
                grads.user_tables[ch].row_mut(u).scaled_add(w, &row);
            }
        }
        for &i in &items {
            grads.item_id_table.row_mut(i).scaled_add(w, &params.item_id_table.row(i));
        }
    }
    let n_nodes = z.num_nodes();
    let mut grad_z = [0, 1, 2].map(|_| Array2::zeros((n_nodes, z.dim())));
    fuse_backward(z, bands, params, fused, &sink.nodes, &mut grads, &mut grad_z);
    encode_backward(inputs.content, inputs.graphs, &cfg.encoder(), &grad_z, &mut grads);
    Ok((parts, Some(grads)))
}

/// [`objective`] with its own forward pass.
pub fn batch_objective(
    params: &ModelParams,
    bands: &BandSet,
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    batch: &PreparedBatch,
    want_grad: bool,
) -> Result<(LossParts, Option<ModelParams>)> {
    let (z, fused) = forward(params, bands, inputs, cfg);
    objective(params, bands, &z, &fused, inputs, cfg, batch, want_grad)
}

/// Full-sort evaluation of a parameter snapshot under `cal`.
pub fn evaluate_model(
    params: &ModelParams,
    bands: &BandSet,
    inputs: &TrainInputs<'_>,
    cfg: &TrainConfig,
    cal: &Calibration,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let (_, fused) = forward(params, bands, inputs, cfg);
    let histories = &inputs.ds.train_history;
    evaluate(inputs.ds, opts, |u| {
        Ok(calibrated_row(&fused, inputs.residual, params, &histories[u], u, cal)?.scores)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    /// Mean of each part over the epoch's batches.
    pub loss: LossParts,
    pub first_batch: LossParts,
    pub valid_recall20: f64,
    pub valid_ndcg20: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_valid_recall20: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub bands: BandSet,
    pub history: History,
}

/// Stateful optimizer loop; [`fit`] drives it epoch by epoch.
pub struct Trainer<'a> {
    inputs: TrainInputs<'a>,
    pub cfg: TrainConfig,
    pub params: ModelParams,
    pub bands: BandSet,
    adam: Adam,
    rng: ChaCha8Rng,
    sampler: Sampler,
}

impl<'a> Trainer<'a> {
    /// Seeds the generator, draws initial parameters and fits bands on them.
    pub fn new(inputs: TrainInputs<'a>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = ModelParams::init(&inputs.model_shape(&cfg), &mut rng);
        Self::with_params(inputs, cfg, params, rng)
    }

    pub fn with_params(inputs: TrainInputs<'a>, cfg: TrainConfig, params: ModelParams, rng: ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let bands = refresh_bands(&params, &inputs, &cfg)?;
        Ok(Trainer {
            adam: Adam::new(AdamConfig::with_lr(cfg.lr), &params),
            sampler: Sampler::new(inputs.ds),
            inputs,
            cfg,
            params,
            bands,
            rng,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.sampler.num_pairs().div_ceil(self.cfg.batch_size)
    }

    pub fn refresh_bands(&mut self) -> Result<()> {
        self.bands = refresh_bands(&self.params, &self.inputs, &self.cfg)?;
        Ok(())
    }

    pub fn next_triples(&mut self) -> Vec<Triple> {
        self.sampler.sample(self.inputs.ds, self.cfg.batch_size, &mut self.rng)
    }

    /// Scores the batch under the current parameters, then applies one
    /// Adam update. Returns the pre-update loss.
    pub fn step(&mut self, triples: Vec<Triple>) -> Result<LossParts> {
        let (z, fused) = forward(&self.params, &self.bands, &self.inputs, &self.cfg);
        let batch = prepare_batch(triples, &fused, self.inputs.residual, &self.cfg);
        let (parts, grads) = objective(&self.params, &self.bands, &z, &fused, &self.inputs, &self.cfg, &batch, true)?;
        if !parts.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {parts:?}")));
        }
        self.adam.step(&mut self.params, &grads.expect("gradients requested"))?;
        Ok(parts)
    }

    /// One pass of `ceil(train / batch_size)` steps; returns the mean and
    /// first-batch losses.
    pub fn run_epoch(&mut self) -> Result<(LossParts, LossParts)> {
        let batches = self.batches_per_epoch();
        let mut mean = LossParts::default();
        let mut first = LossParts::default();
        for b in 0..batches {
            let triples = self.next_triples();
            let parts = self.step(triples)?;
            if b == 0 {
                first = parts;
            }
            mean.add_scaled(&parts, 1.0 / batches as f64);
        }
        Ok((mean, first))
    }

    pub fn evaluate(&self, opts: &EvalOptions) -> Result<MetricsReport> {
        evaluate_model(&self.params, &self.bands, &self.inputs, &self.cfg, &self.cfg.calibration(), opts)
    }
}

/// Trains for `cfg.epochs` epochs and keeps the parameters and bands of
/// the epoch with the best validation Recall@20.
pub fn fit(inputs: TrainInputs<'_>, cfg: &TrainConfig) -> Result<TrainedModel> {
    fit_with(inputs, cfg, |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    inputs: TrainInputs<'_>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(inputs, cfg.clone())?;
    let mut history = History::default();
    let mut best = (trainer.params.clone(), trainer.bands.clone());
    let valid = EvalOptions::new(Split::Valid);
    for epoch in 1..=cfg.epochs {
        trainer.refresh_bands()?;
        let (loss, first_batch) = trainer.run_epoch()?;
        let report = trainer.evaluate(&valid)?;
        let record = EpochRecord {
            epoch,
            batches: trainer.batches_per_epoch(),
            loss,
            first_batch,
            valid_recall20: report.recall20(),
            valid_ndcg20: report.ndcg20(),
        };
        info!(
            "epoch {epoch}: loss {:.6} valid R@20 {:.4} N@20 {:.4}",
            record.loss.total, record.valid_recall20, record.valid_ndcg20
        );
        if history.best_epoch.is_none() || record.valid_recall20 > history.best_valid_recall20 {
            history.best_epoch = Some(epoch);
            history.best_valid_recall20 = record.valid_recall20;
            best = (trainer.params.clone(), trainer.bands.clone());
        }
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(TrainedModel {
        params: best.0,
        bands: best.1,
        history,
    })
}
