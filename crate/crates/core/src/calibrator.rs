//! Candidate-scoped residual calibration of base scores.

use std::str::FromStr;

use rayon::prelude::*;

use crate::behavior::Residual;
use crate::error::{Error, Result};
use crate::params::{CoeffParams, ModelParams};
use crate::spectral::{sigmoid, FusedEmbeddings};

/// Where the residual may act.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScopeVariant {
    /// Top-`K_c` base-score candidates only, in training and inference.
    Candidate,
    /// Every item, with no candidate mask.
    Global,
    /// Residual on every sampled pair during training, candidate-scoped at
    /// inference (reranking baseline).
    NoTrainScope,
}

impl ScopeVariant {
    pub fn name(self) -> &'static str {
        match self {
            ScopeVariant::Candidate => "candidate",
            ScopeVariant::Global => "global",
            ScopeVariant::NoTrainScope => "none",
        }
    }
}

impl FromStr for ScopeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "candidate" => Ok(ScopeVariant::Candidate),
            "global" => Ok(ScopeVariant::Global),
            "none" => Ok(ScopeVariant::NoTrainScope),
            other => Err(Error::Config(format!("unknown scope variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffVariant {
    Fixed,
    Conservative,
}

impl CoeffVariant {
    pub fn name(self) -> &'static str {
        match self {
            CoeffVariant::Fixed => "fixed",
            CoeffVariant::Conservative => "conservative",
        }
    }
}

impl FromStr for CoeffVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(CoeffVariant::Fixed),
            "conservative" => Ok(CoeffVariant::Conservative),
            other => Err(Error::Config(format!("unknown coefficient variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSource {
    TrainDetached,
    Inference,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSet {
    pub user: usize,
    /// Sorted ascending.
    pub items: Vec<usize>,
    pub source: CandidateSource,
}

impl CandidateSet {
    pub fn contains(&self, item: usize) -> bool {
        self.items.binary_search(&item).is_ok()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Indices of the `k` largest scores, descending, ties to the smaller
/// index. `excluded` must be sorted.
pub fn top_k_indices(scores: &[f64], k: usize, excluded: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    let order = |&a: &usize, &b: &usize| scores[b].total_cmp(&scores[a]).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    idx
}

/// Candidate scope from precomputed base scores of one user.
pub fn candidate_set_from_scores(
    user: usize,
    scores: &[f64],
    k_c: usize,
    excluded: &[usize],
    source: CandidateSource,
) -> CandidateSet {
    let mut items = top_k_indices(scores, k_c, excluded);
    items.sort_unstable();
    CandidateSet { user, items, source }
}

/// Top-`k_c` items by base score. The inference variant skips the user's
/// train items; the train variant is a pure scope mask and keeps them.
pub fn candidate_set(
    e: &FusedEmbeddings,
    user: usize,
    k_c: usize,
    train_history: &[usize],
    source: CandidateSource,
) -> CandidateSet {
    let scores = e.user_scores(user);
    let excluded: &[usize] = match source {
        CandidateSource::TrainDetached => &[],
        CandidateSource::Inference => train_history,
    };
    candidate_set_from_scores(user, &scores, k_c, excluded, source)
}

pub fn train_score(s_base: f64, in_scope: bool, b: f64, lambda_b: f64) -> f64 {
    if in_scope {
        s_base + lambda_b * b
    } else {
        s_base
    }
}

pub fn inference_score(s_base: f64, in_scope: bool, b: f64, lambda_b: f64) -> f64 {
    train_score(s_base, in_scope, b, lambda_b)
}

pub fn global_correction_score(s_base: f64, b: f64, lambda_b: f64) -> f64 {
    s_base + lambda_b * b
}

/// Pre-activation of the conservative coefficient.
pub fn conservative_logit(coeff: &CoeffParams, user: usize, item: usize, s_base: f64, b: f64) -> f64 {
    coeff.beta_u[user] + coeff.beta_i[item] + coeff.a_s * s_base.tanh() + coeff.a_b * b.tanh()
}

/// `η ∈ (0, 1)` scaling the residual of one pair.
pub fn conservative_coeff(coeff: &CoeffParams, user: usize, item: usize, s_base: f64, b: f64) -> f64 {
    sigmoid(conservative_logit(coeff, user, item, s_base, b))
}

/// Inference-time calibration settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub scope: ScopeVariant,
    pub coeff: CoeffVariant,
    pub lambda_b: f64,
    pub k_c: usize,
}

/// Per-user calibrated scores plus bookkeeping for diagnostics.
#[derive(Clone, Debug)]
pub struct CalibratedRow {
    pub scores: Vec<f64>,
    /// `(item, applied correction, η)` for every pair the residual touched.
    pub corrections: Vec<(usize, f64, f64)>,
}

/// Inference scores of `user` against every item.
pub fn calibrated_row(
    e: &FusedEmbeddings,
    residual: &dyn Residual,
    params: &ModelParams,
    train_history: &[usize],
    user: usize,
    cal: &Calibration,
) -> Result<CalibratedRow> {
    let mut scores = e.user_scores(user);
    let coeff = match cal.coeff {
        CoeffVariant::Fixed => None,
        CoeffVariant::Conservative => Some(params.coeff.as_ref().ok_or_else(|| {
            Error::Config("conservative coefficient requested but the model has no coefficient parameters".into())
        })?),
    };
    let mut corrections = Vec::new();
    if cal.lambda_b == 0.0 {
        return Ok(CalibratedRow { scores, corrections });
    }
    let mut apply = |item: usize, b: f64, scores: &mut [f64]| {
        let s_base = scores[item];
        let eta = coeff.map_or(1.0, |c| conservative_coeff(c, user, item, s_base, b));
        let delta = cal.lambda_b * eta * b;
        scores[item] = if coeff.is_some() {
            s_base + delta
        } else {
            inference_score(s_base, true, b, cal.lambda_b)
        };
        corrections.push((item, delta, eta));
    };
    match cal.scope {
        ScopeVariant::Global => {
            let row = residual.row(user);
            for (item, &b) in row.iter().enumerate() {
                apply(item, b, &mut scores);
            }
        }
        ScopeVariant::Candidate | ScopeVariant::NoTrainScope => {
            let set = candidate_set_from_scores(user, &scores, cal.k_c, train_history, CandidateSource::Inference);
            for &item in &set.items {
                apply(item, residual.score(user, item), &mut scores);
            }
        }
    }
    Ok(CalibratedRow { scores, corrections })
}

/// [`calibrated_row`] for every user in parallel.
pub fn calibrated_scores(
    e: &FusedEmbeddings,
    residual: &dyn Residual,
    params: &ModelParams,
    histories: &[Vec<usize>],
    cal: &Calibration,
) -> Result<Vec<CalibratedRow>> {
    (0..e.num_users)
        .into_par_iter()
        .map(|u| calibrated_row(e, residual, params, &histories[u], u, cal))
        .collect()
}
