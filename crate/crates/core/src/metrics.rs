//! Full-sort ranking metrics, popularity strata and representation
//! diagnostics.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::calibrator::{top_k_indices, CalibratedRow};
use crate::data::{Dataset, Split};
use crate::encoder::ChannelEmbeddings;
use crate::error::{Error, Result};
use crate::params::{Channel, ModelParams};
use crate::spectral::{band_weights, BandSet, FusedEmbeddings};

pub fn recall_at(ranked: &[usize], targets: &[usize], k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| targets.contains(i)).count();
    hits as f64 / targets.len() as f64
}

pub fn ndcg_at(ranked: &[usize], targets: &[usize], k: usize) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let gain = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| targets.contains(i))
        .map(|(pos, _)| gain(pos))
        .sum();
    let idcg: f64 = (0..k.min(targets.len())).map(gain).sum();
    dcg / idcg
}

/// Every unmasked item in descending score order, ties to the smaller index.
pub fn full_sort_rank(scores: &[f64], masked: &[usize]) -> Vec<usize> {
    top_k_indices(scores, scores.len(), masked)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Stratum {
    Head,
    Mid,
    Tail,
    Cold,
}

impl Stratum {
    pub const ALL: [Stratum; 4] = [Stratum::Head, Stratum::Mid, Stratum::Tail, Stratum::Cold];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Head => "head",
            Stratum::Mid => "mid",
            Stratum::Tail => "tail",
            Stratum::Cold => "cold",
        }
    }
}

/// 20/30/30/20 popularity split by train count, most popular first.
pub fn stratify_items(ds: &Dataset) -> Vec<Stratum> {
    let pop = ds.item_popularity();
    let n = pop.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pop[b].cmp(&pop[a]).then(a.cmp(&b)));
    let cut = |pct: usize| (n * pct + 50) / 100;
    let (c1, c2, c3) = (cut(20), cut(50), cut(80));
    let mut out = vec![Stratum::Cold; n];
    for (rank, &item) in order.iter().enumerate() {
        out[item] = if rank < c1 {
            Stratum::Head
        } else if rank < c2 {
            Stratum::Mid
        } else if rank < c3 {
            Stratum::Tail
        } else {
            Stratum::Cold
        };
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: Split,
    pub cutoffs: Vec<usize>,
    /// Also hide validation items when ranking for the test split.
    pub mask_valid_at_test: bool,
}

impl EvalOptions {
    pub fn new(split: Split) -> Self {
        EvalOptions {
            split,
            cutoffs: vec![10, 20],
            mask_valid_at_test: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub split: String,
    pub users: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub strata_recall20: BTreeMap<String, f64>,
    pub head_exposure: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn recall20(&self) -> f64 {
        self.recall.get(&20).copied().unwrap_or(0.0)
    }

    pub fn ndcg20(&self) -> f64 {
        self.ndcg.get(&20).copied().unwrap_or(0.0)
    }
}

impl fmt::Display for MetricsReport {
    /// `key=value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "split={}", self.split)?;
        writeln!(f, "users={}", self.users)?;
        for (k, v) in &self.recall {
            writeln!(f, "recall@{k}={v:.6}")?;
        }
        for (k, v) in &self.ndcg {
            writeln!(f, "ndcg@{k}={v:.6}")?;
        }
        for (k, v) in &self.strata_recall20 {
            writeln!(f, "recall@20.{k}={v:.6}")?;
        }
        writeln!(f, "head_exposure={:.6}", self.head_exposure)?;
        for (k, v) in &self.diagnostics {
            writeln!(f, "{k}={v:.6}")?;
        }
        Ok(())
    }
}

struct UserEval {
    recall: Vec<f64>,
    ndcg: Vec<f64>,
    strata: [Option<f64>; 4],
    head_slots: usize,
}

/// Full-sort evaluation driven by a per-user scoring function. Users with
/// no target items are skipped.
pub fn evaluate<F>(ds: &Dataset, opts: &EvalOptions, score_row: F) -> Result<MetricsReport>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    if opts.split == Split::Train {
        return Err(Error::Config("evaluation split must be valid or test".into()));
    }
    let targets = ds.split_items(opts.split);
    let valid = (opts.split == Split::Test && opts.mask_valid_at_test).then(|| ds.split_items(Split::Valid));
    let strata = stratify_items(ds);
    let depth = opts.cutoffs.iter().copied().chain([20]).max().unwrap_or(20);

    let per_user: Vec<Option<UserEval>> = (0..ds.num_users)
        .into_par_iter()
        .map(|u| -> Result<Option<UserEval>> {
            let tgt = &targets[u];
            if tgt.is_empty() {
                return Ok(None);
            }
            let scores = score_row(u)?;
            let mut masked = ds.train_history[u].clone();
            if let Some(v) = &valid {
                masked.extend(&v[u]);
                masked.sort_unstable();
                masked.dedup();
            }
            let ranked = top_k_indices(&scores, depth, &masked);
            let top20 = &ranked[..ranked.len().min(20)];
            let mut strata_recall = [None; 4];
            for (slot, s) in Stratum::ALL.iter().enumerate() {
                let sub: Vec<usize> = tgt.iter().copied().filter(|&i| strata[i] == *s).collect();
                if !sub.is_empty() {
                    strata_recall[slot] = Some(recall_at(top20, &sub, 20));
                }
            }
            Ok(Some(UserEval {
                recall: opts.cutoffs.iter().map(|&k| recall_at(&ranked, tgt, k)).collect(),
                ndcg: opts.cutoffs.iter().map(|&k| ndcg_at(&ranked, tgt, k)).collect(),
                strata: strata_recall,
                head_slots: top20.iter().filter(|&&i| strata[i] == Stratum::Head).count(),
            }))
        })
        .collect::<Result<_>>()?;

    let evaluated: Vec<&UserEval> = per_user.iter().flatten().collect();
    let users = evaluated.len();
    let mut report = MetricsReport {
        split: opts.split.to_string(),
        users,
        ..Default::default()
    };
    let mean = |xs: &mut dyn Iterator<Item = f64>| {
        let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    for (c, &k) in opts.cutoffs.iter().enumerate() {
        report.recall.insert(k, mean(&mut evaluated.iter().map(|e| e.recall[c])));
        report.ndcg.insert(k, mean(&mut evaluated.iter().map(|e| e.ndcg[c])));
    }
    for (slot, s) in Stratum::ALL.iter().enumerate() {
        report
            .strata_recall20
            .insert(s.name().to_string(), mean(&mut evaluated.iter().filter_map(|e| e.strata[slot])));
    }
    if users > 0 {
        let slots: usize = evaluated.iter().map(|e| e.head_slots).sum();
        report.head_exposure = slots as f64 / (20 * users) as f64;
    }
    Ok(report)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine of two vectors, `None` when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    (na > 0.0 && nb > 0.0).then(|| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Norm and cosine statistics of the lowest and highest item bands plus
/// behavior-correction summaries.
pub fn representation_diagnostics(
    z: &ChannelEmbeddings,
    bands: &BandSet,
    rows: &[CalibratedRow],
    conservative: bool,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let m = bands.num_bands();
    let items = z.num_items();
    let mut low_norm = 0.0;
    let mut high_norm = 0.0;
    let mut cos_sum = 0.0;
    let mut cos_count = 0usize;
    for i in 0..items {
        let slices = bands.band_slices(z, z.num_users + i);
        low_norm += norm(&slices[0]);
        high_norm += norm(&slices[m - 1]);
        if let Some(c) = cosine(&slices[0], &slices[m - 1]) {
            cos_sum += c;
            cos_count += 1;
        }
    }
    let n = items.max(1) as f64;
    out.insert("low_item_norm_mean".into(), low_norm / n);
    out.insert("high_item_norm_mean".into(), high_norm / n);
    let degenerate = cos_count == 0;
    out.insert(
        "low_high_item_cosine".into(),
        if degenerate { 0.0 } else { cos_sum / cos_count as f64 },
    );
    out.insert("low_high_item_cosine_degenerate".into(), f64::from(u8::from(degenerate)));

    let corrections: Vec<&(usize, f64, f64)> = rows.iter().flat_map(|r| &r.corrections).collect();
    let k = corrections.len().max(1) as f64;
    out.insert(
        "behavior_correction_abs_mean".into(),
        corrections.iter().map(|c| c.1.abs()).sum::<f64>() / k,
    );
    if conservative {
        out.insert("pair_coefficient_mean".into(), corrections.iter().map(|c| c.2).sum::<f64>() / k);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BandDiagnostic {
    pub band: usize,
    pub cross_view_cosine: f64,
    pub band_only_recall20: f64,
}

/// Per-band visual/text agreement and the validation recall of a ranker
/// restricted to that band's gated slices.
pub fn band_diagnostics(
    ds: &Dataset,
    z: &ChannelEmbeddings,
    bands: &BandSet,
    params: &ModelParams,
    fused: &FusedEmbeddings,
) -> Result<Vec<BandDiagnostic>> {
    let omega = band_weights(params);
    let nu = z.num_users;
    let n_items = z.num_items();
    (0..bands.num_bands())
        .map(|m| {
            let (v, t) = (Channel::Visual.index(), Channel::Text.index());
            let mut sum = 0.0;
            let mut count = 0usize;
            for i in 0..n_items {
                let hv = bands.channel_slice(v, &z.nodes[v].row(nu + i).to_vec(), m);
                let ht = bands.channel_slice(t, &z.nodes[t].row(nu + i).to_vec(), m);
                if let Some(c) = cosine(&hv, &ht) {
                    sum += c;
                    count += 1;
                }
            }
            let gated: Vec<Vec<f64>> = (0..z.num_nodes())
                .into_par_iter()
                .map(|node| {
                    let coef = omega[m] * (1.0 + params.rho * fused.phi[(node, m)]);
                    bands.band_slices(z, node)[m].iter().map(|x| coef * x).collect()
                })
                .collect();
            let report = evaluate(ds, &EvalOptions::new(Split::Valid), |u| {
                Ok((0..n_items)
                    .map(|i| gated[u].iter().zip(&gated[nu + i]).map(|(a, b)| a * b).sum())
                    .collect())
            })?;
            Ok(BandDiagnostic {
                band: m,
                cross_view_cosine: if count == 0 { 0.0 } else { sum / count as f64 },
                band_only_recall20: report.recall20(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Interaction;
    use crate::testutil::assert_close;

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at(&[3, 1, 2], &[3], 10), 1.0);
        assert_eq!(recall_at(&[3, 1, 2], &[0], 10), 0.0);
        assert_eq!(recall_at(&[3, 1, 2], &[1, 5], 10), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at(&[4, 2], &[4], 20), 1.0);
        assert_close(ndcg_at(&[2, 4], &[4], 20), 0.63093, 1e-5);
        assert_eq!(ndcg_at(&[2, 4], &[7], 20), 0.0);
    }

    #[test]
    fn full_sort_masks_and_breaks_ties() {
        assert_eq!(full_sort_rank(&[0.5, 0.9, 0.5], &[1]), vec![0, 2]);
    }

    fn dataset(items: usize, pops: &[usize]) -> Dataset {
        let mut inter = Vec::new();
        for (i, &p) in pops.iter().enumerate() {
            for u in 0..p {
                inter.push(Interaction {
                    user: u,
                    item: i,
                    split: Split::Train,
                });
            }
        }
        Dataset::from_interactions(pops.iter().copied().max().unwrap_or(1).max(1), items, inter).unwrap()
    }

    #[test]
    fn strata_sizes() {
        let ds = dataset(10, &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]);
        let s = stratify_items(&ds);
        let count = |x: Stratum| s.iter().filter(|&&v| v == x).count();
        assert_eq!([count(Stratum::Head), count(Stratum::Mid), count(Stratum::Tail), count(Stratum::Cold)], [2, 3, 3, 2]);
        assert_eq!(s[9], Stratum::Head);
        assert_eq!(s[0], Stratum::Cold);
        let flat = dataset(10, &[1; 10]);
        let s = stratify_items(&flat);
        assert_eq!(s[0], Stratum::Head);
        assert_eq!(s[2], Stratum::Mid);
        assert_eq!(s[9], Stratum::Cold);
    }

    #[test]
    fn head_only_recommender_has_full_exposure() {
        // users 2 and 3 make items 0..20 the head; users 0 and 1 are evaluated
        let mut inter = Vec::new();
        for i in 0..20 {
            inter.push(Interaction { user: 2, item: i, split: Split::Train });
            inter.push(Interaction { user: 3, item: i, split: Split::Train });
        }
        inter.push(Interaction { user: 0, item: 50, split: Split::Train });
        inter.push(Interaction { user: 1, item: 50, split: Split::Train });
        inter.push(Interaction { user: 0, item: 60, split: Split::Valid });
        inter.push(Interaction { user: 1, item: 61, split: Split::Valid });
        let ds = Dataset::from_interactions(4, 100, inter).unwrap();
        let report = evaluate(&ds, &EvalOptions::new(Split::Valid), |_| {
            Ok((0..100).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect())
        })
        .unwrap();
        assert_eq!(report.users, 2);
        assert_eq!(report.head_exposure, 1.0);
        assert_eq!(report.recall20(), 0.0);
    }

    #[test]
    fn users_without_targets_are_skipped_and_train_items_masked() {
        let inter = vec![
            Interaction { user: 0, item: 0, split: Split::Train },
            Interaction { user: 0, item: 1, split: Split::Valid },
            Interaction { user: 1, item: 2, split: Split::Train },
        ];
        let ds = Dataset::from_interactions(2, 3, inter).unwrap();
        let report = evaluate(&ds, &EvalOptions::new(Split::Valid), |_| Ok(vec![9.0, 1.0, 0.0])).unwrap();
        assert_eq!(report.users, 1);
        assert_eq!(report.recall[&10], 1.0);
        assert_eq!(report.ndcg[&10], 1.0);
    }

    #[test]
    fn valid_items_masked_at_test_when_requested() {
        let inter = vec![
            Interaction { user: 0, item: 0, split: Split::Train },
            Interaction { user: 0, item: 1, split: Split::Valid },
            Interaction { user: 0, item: 2, split: Split::Test },
        ];
        let ds = Dataset::from_interactions(1, 3, inter).unwrap();
        let mut opts = EvalOptions::new(Split::Test);
        opts.cutoffs = vec![1];
        let scores = |_| Ok(vec![0.0, 5.0, 1.0]);
        assert_eq!(evaluate(&ds, &opts, scores).unwrap().recall[&1], 0.0);
        opts.mask_valid_at_test = true;
        assert_eq!(evaluate(&ds, &opts, scores).unwrap().recall[&1], 1.0);
    }

    #[test]
    fn cosine_guard() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert_close(cosine(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 1.0, 1e-15);
    }
}
