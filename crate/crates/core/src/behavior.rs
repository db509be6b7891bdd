//! Co-user behavior evidence and the residual controls that can replace it.
//!
//! Every residual is built from train interactions only and exposes a
//! per-`(user, item)` score through [`Residual`].

use std::str::FromStr;

use nalgebra::DMatrix;
use ndarray::Array2;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{top_k_by_score, SparseGraph};

pub const BEHAVIOR_EPS: f64 = 1e-6;
/// Largest `users × items` product for which normalized rows are cached densely.
pub const DENSE_CACHE_LIMIT: usize = 1 << 28;
pub const EASE_MAX_ITEMS: usize = 20_000;
pub const EASE_DEFAULT_L2: f64 = 100.0;

/// Signed per-pair evidence consumed by the calibrator.
pub trait Residual: Sync {
    fn score(&self, user: usize, item: usize) -> f64;

    /// Scores of `user` against every item.
    fn row(&self, user: usize) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResidualKind {
    Behavior,
    RawCooc,
    Ease,
    Zero,
}

impl ResidualKind {
    pub fn name(self) -> &'static str {
        match self {
            ResidualKind::Behavior => "ben",
            ResidualKind::RawCooc => "raw_cooc",
            ResidualKind::Ease => "ease",
            ResidualKind::Zero => "none",
        }
    }
}

impl FromStr for ResidualKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ben" | "behavior" => Ok(ResidualKind::Behavior),
            "raw_cooc" => Ok(ResidualKind::RawCooc),
            "ease" => Ok(ResidualKind::Ease),
            "none" | "zero" => Ok(ResidualKind::Zero),
            other => Err(Error::Config(format!("unknown behavior residual `{other}`"))),
        }
    }
}

/// Mean and population standard deviation.
pub fn row_stats(row: &[f64]) -> (f64, f64) {
    if row.is_empty() {
        return (0.0, 0.0);
    }
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn zscore(value: f64, (mean, std): (f64, f64), eps: f64) -> f64 {
    (value - mean) / (std + eps)
}

/// Co-user counts `|U_i ∩ U_j|` for every `j` sharing a train user with `i`,
/// in ascending `j`. The diagonal is included.
fn co_counts(ds: &Dataset, item: usize, counter: &mut [u32], touched: &mut Vec<usize>) -> Vec<(usize, u32)> {
    touched.clear();
    for &u in &ds.train_item_users[item] {
        for &j in &ds.train_history[u] {
            if counter[j] == 0 {
                touched.push(j);
            }
            counter[j] += 1;
        }
    }
    touched.sort_unstable();
    let out = touched.iter().map(|&j| (j, counter[j])).collect();
    for &j in touched.iter() {
        counter[j] = 0;
    }
    out
}

/// Cosine co-user weight of two items with `shared` common users.
pub fn cooccurrence_weight(shared: usize, users_i: usize, users_j: usize) -> f64 {
    if shared == 0 {
        return 0.0;
    }
    shared as f64 / ((users_i as f64).sqrt() * (users_j as f64).sqrt())
}

/// Directed top-`k_b` item-item behavior graph; ties go to the smaller
/// neighbor and self pairs are excluded.
pub fn build_behavior_graph(ds: &Dataset, k_b: usize) -> Result<SparseGraph> {
    if k_b == 0 {
        return Err(Error::Config("behavior top-k must be at least 1".into()));
    }
    let n = ds.num_items;
    let entries: Vec<Vec<(usize, f32)>> = (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0u32; n], Vec::new()),
            |(counter, touched), i| {
                let ui = ds.train_item_users[i].len();
                let mut row: Vec<(usize, f64)> = co_counts(ds, i, counter, touched)
                    .into_iter()
                    .filter(|&(j, _)| j != i)
                    .map(|(j, c)| (j, cooccurrence_weight(c as usize, ui, ds.train_item_users[j].len())))
                    .collect();
                top_k_by_score(&mut row, k_b);
                row.into_iter().map(|(j, w)| (j, w as f32)).collect()
            },
        )
        .collect();
    SparseGraph::from_rows(n, n, entries)
}

/// Pruned behavior graph with cached per-user normalization statistics.
#[derive(Clone, Debug)]
pub struct BehaviorModel {
    graph: SparseGraph,
    graph_t: SparseGraph,
    histories: Vec<Vec<usize>>,
    pub k_b: usize,
    pub eps: f64,
    user_stats: Vec<(f64, f64)>,
    dense: Option<Array2<f64>>,
}

impl BehaviorModel {
    pub fn build(ds: &Dataset, k_b: usize) -> Result<Self> {
        Self::from_graph(ds, build_behavior_graph(ds, k_b)?, k_b)
    }

    /// Wraps a prebuilt (possibly cached) behavior graph.
    pub fn from_graph(ds: &Dataset, graph: SparseGraph, k_b: usize) -> Result<Self> {
        if graph.rows() != ds.num_items || graph.cols() != ds.num_items {
            return Err(Error::Dimension(format!(
                "behavior graph is {}x{}, dataset has {} items",
                graph.rows(),
                graph.cols(),
                ds.num_items
            )));
        }
        let mut model = BehaviorModel {
            graph_t: graph.transpose(),
            graph,
            histories: ds.train_history.clone(),
            k_b,
            eps: BEHAVIOR_EPS,
            user_stats: Vec::new(),
            dense: None,
        };
        model.user_stats = (0..ds.num_users)
            .into_par_iter()
            .map(|u| row_stats(&model.raw_row(u)))
            .collect();
        Ok(model)
    }

    /// Materializes all normalized rows when the table fits under
    /// [`DENSE_CACHE_LIMIT`]. Returns whether the cache was built.
    pub fn with_dense_cache(mut self) -> Self {
        let users = self.user_stats.len();
        let items = self.graph.rows();
        if users.saturating_mul(items) <= DENSE_CACHE_LIMIT {
            let rows: Vec<Vec<f64>> = (0..users).into_par_iter().map(|u| self.normalized_row(u)).collect();
            let mut dense = Array2::zeros((users, items));
            for (u, row) in rows.into_iter().enumerate() {
                dense.row_mut(u).assign(&ndarray::ArrayView1::from(&row));
            }
            self.dense = Some(dense);
        }
        self
    }

    pub fn has_dense_cache(&self) -> bool {
        self.dense.is_some()
    }

    pub fn graph(&self) -> &SparseGraph {
        &self.graph
    }

    pub fn user_stats(&self, user: usize) -> (f64, f64) {
        self.user_stats[user]
    }

    /// History-normalized evidence `Σ_{j∈H_u} B_ij / √|H_u|`.
    pub fn raw_evidence(&self, user: usize, item: usize) -> f64 {
        let history = &self.histories[user];
        if history.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for &j in history {
            if let Some(w) = self.graph.get(item, j) {
                sum += w as f64;
            }
        }
        sum / (history.len() as f64).sqrt()
    }

    /// [`raw_evidence`](Self::raw_evidence) for every item. Sums are
    /// accumulated in the same order so both paths agree bit for bit.
    pub fn raw_row(&self, user: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.graph.rows()];
        let history = &self.histories[user];
        if history.is_empty() {
            return row;
        }
        for &j in history {
            for (i, w) in self.graph_t.iter_row(j) {
                row[i] += w as f64;
            }
        }
        let norm = (history.len() as f64).sqrt();
        for v in &mut row {
            *v /= norm;
        }
        row
    }

    pub fn normalized(&self, user: usize, item: usize) -> f64 {
        zscore(self.raw_evidence(user, item), self.user_stats[user], self.eps)
    }

    pub fn normalized_row(&self, user: usize) -> Vec<f64> {
        let stats = self.user_stats[user];
        self.raw_row(user).into_iter().map(|v| zscore(v, stats, self.eps)).collect()
    }
}

impl Residual for BehaviorModel {
    fn score(&self, user: usize, item: usize) -> f64 {
        match &self.dense {
            Some(d) => d[(user, item)],
            None => self.normalized(user, item),
        }
    }

    fn row(&self, user: usize) -> Vec<f64> {
        match &self.dense {
            Some(d) => d.row(user).to_vec(),
            None => self.normalized_row(user),
        }
    }
}

/// Unnormalized co-occurrence control `Σ_{j∈H_u, j≠i} |U_i ∩ U_j|`,
/// min-max scaled per user row.
#[derive(Clone, Debug)]
pub struct RawCooc {
    counts: Vec<Vec<(usize, u32)>>,
    histories: Vec<Vec<usize>>,
    num_items: usize,
    ranges: Vec<(f64, f64)>,
}

impl RawCooc {
    pub fn build(ds: &Dataset) -> Self {
        let n = ds.num_items;
        let counts: Vec<Vec<(usize, u32)>> = (0..n)
            .into_par_iter()
            .map_init(
                || (vec![0u32; n], Vec::new()),
                |(counter, touched), i| {
                    co_counts(ds, i, counter, touched)
                        .into_iter()
                        .filter(|&(j, _)| j != i)
                        .collect()
                },
            )
            .collect();
        let mut model = RawCooc {
            counts,
            histories: ds.train_history.clone(),
            num_items: n,
            ranges: Vec::new(),
        };
        model.ranges = (0..ds.num_users)
            .into_par_iter()
            .map(|u| {
                let row = model.unscaled_row(u);
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            })
            .collect();
        model
    }

    pub fn unscaled(&self, user: usize, item: usize) -> f64 {
        let history = &self.histories[user];
        self.counts[item]
            .iter()
            .filter(|(j, _)| history.binary_search(j).is_ok())
            .map(|&(_, c)| c as f64)
            .sum()
    }

    pub fn unscaled_row(&self, user: usize) -> Vec<f64> {
        // The count table is symmetric, so row j lists every i with |U_i ∩ U_j| > 0.
        let mut row = vec![0.0; self.num_items];
        for &j in &self.histories[user] {
            for &(i, c) in &self.counts[j] {
                row[i] += c as f64;
            }
        }
        row
    }

    fn scale(&self, user: usize, v: f64) -> f64 {
        let (lo, hi) = self.ranges[user];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }
}

impl Residual for RawCooc {
    fn score(&self, user: usize, item: usize) -> f64 {
        self.scale(user, self.unscaled(user, item))
    }

    fn row(&self, user: usize) -> Vec<f64> {
        self.unscaled_row(user).into_iter().map(|v| self.scale(user, v)).collect()
    }
}

/// Closed-form item-item regression control, z-scored per user.
#[derive(Clone, Debug)]
pub struct Ease {
    pub weights: Array2<f64>,
    histories: Vec<Vec<usize>>,
    user_stats: Vec<(f64, f64)>,
    pub eps: f64,
}

impl Ease {
    pub fn build(ds: &Dataset, l2: f64) -> Result<Self> {
        let n = ds.num_items;
        if n > EASE_MAX_ITEMS {
            return Err(Error::Config(format!(
                "EASE needs a dense {n}x{n} solve (limit {EASE_MAX_ITEMS} items); use the raw_cooc control instead"
            )));
        }
        if l2 <= 0.0 {
            return Err(Error::Config(format!("EASE l2 must be positive, got {l2}")));
        }
        let mut gram = DMatrix::<f64>::zeros(n, n);
        for items in &ds.train_history {
            for &a in items {
                for &b in items {
                    gram[(a, b)] += 1.0;
                }
            }
        }
        for k in 0..n {
            gram[(k, k)] += l2;
        }
        let p = gram
            .cholesky()
            .ok_or_else(|| Error::Numeric("EASE Gram matrix is not positive definite".into()))?
            .inverse();
        let weights = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { -p[(i, j)] / p[(j, j)] });
        let mut model = Ease {
            weights,
            histories: ds.train_history.clone(),
            user_stats: Vec::new(),
            eps: BEHAVIOR_EPS,
        };
        model.user_stats = (0..ds.num_users)
            .into_par_iter()
            .map(|u| row_stats(&model.raw_row(u)))
            .collect();
        Ok(model)
    }

    pub fn raw(&self, user: usize, item: usize) -> f64 {
        let mut sum = 0.0;
        for &j in &self.histories[user] {
            sum += self.weights[(j, item)];
        }
        sum
    }

    pub fn raw_row(&self, user: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.weights.ncols()];
        for &j in &self.histories[user] {
            for (r, w) in row.iter_mut().zip(self.weights.row(j)) {
                *r += w;
            }
        }
        row
    }
}

impl Residual for Ease {
    fn score(&self, user: usize, item: usize) -> f64 {
        zscore(self.raw(user, item), self.user_stats[user], self.eps)
    }

    fn row(&self, user: usize) -> Vec<f64> {
        let stats = self.user_stats[user];
        self.raw_row(user).into_iter().map(|v| zscore(v, stats, self.eps)).collect()
    }
}

/// No residual; calibrated scores collapse to base scores.
#[derive(Clone, Copy, Debug)]
pub struct ZeroResidual {
    pub num_items: usize,
}

impl Residual for ZeroResidual {
    fn score(&self, _user: usize, _item: usize) -> f64 {
        0.0
    }

    fn row(&self, _user: usize) -> Vec<f64> {
        vec![0.0; self.num_items]
    }
}

/// Builds the configured residual.
pub fn build_residual(ds: &Dataset, kind: ResidualKind, k_b: usize, ease_l2: f64) -> Result<Box<dyn Residual>> {
    Ok(match kind {
        ResidualKind::Behavior => Box::new(BehaviorModel::build(ds, k_b)?.with_dense_cache()),
        ResidualKind::RawCooc => Box::new(RawCooc::build(ds)),
        ResidualKind::Ease => Box::new(Ease::build(ds, ease_l2)?),
        ResidualKind::Zero => Box::new(ZeroResidual { num_items: ds.num_items }),
    })
}
