//! Loss terms with their analytic gradients. Every term is a batch mean.

use ndarray::{Array2, Axis};

use crate::spectral::sigmoid;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-ln σ(Δ)` and its derivative with respect to `Δ`.
pub fn bpr_term(delta: f64) -> (f64, f64) {
    (softplus(-delta), -sigmoid(-delta))
}

/// Mean pairwise logistic loss over score differences.
pub fn loss_bpr(deltas: &[f64]) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    deltas.iter().map(|&d| softplus(-d)).sum::<f64>() / deltas.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IbConfig {
    pub alpha_ib: f64,
    pub mu_ib: f64,
    pub phi_plus: f64,
}

/// Gate-expansion penalty of one node and its gradient with respect to the
/// gate values.
pub fn ib_node(gates: &[f64], cfg: &IbConfig) -> (f64, Vec<f64>) {
    let delta: Vec<f64> = gates.iter().map(|g| (g - 1.0).max(0.0)).collect();
    let sq: f64 = delta.iter().map(|d| d * d).sum();
    let norm = sq.sqrt();
    let hinge: f64 = delta.iter().map(|d| (d - cfg.phi_plus).max(0.0)).sum();
    let loss = cfg.alpha_ib * sq + cfg.mu_ib * norm * hinge;
    let grad = gates
        .iter()
        .zip(&delta)
        .map(|(&g, &d)| {
            if g <= 1.0 || norm == 0.0 {
                return 0.0;
            }
            let hinge_grad = if d > cfg.phi_plus { 1.0 } else { 0.0 };
            2.0 * cfg.alpha_ib * d + cfg.mu_ib * (d / norm * hinge + norm * hinge_grad)
        })
        .collect();
    (loss, grad)
}

/// Mean [`ib_node`] penalty over nodes.
pub fn loss_ib(gates: &[Vec<f64>], cfg: &IbConfig) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    gates.iter().map(|g| ib_node(g, cfg).0).sum::<f64>() / gates.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreqConfig {
    pub tau: f64,
    pub eps: f64,
}

/// Band slices of one node, indexed `[band][coordinate]`.
pub type Bands = Vec<Vec<f64>>;

#[derive(Clone, Debug, Default)]
pub struct FreqOutput {
    pub dec: f64,
    pub disc: f64,
    /// Gradient of `dec + disc` with respect to each user's raw band slices.
    pub grad_users: Vec<Bands>,
    /// Same for positive items.
    pub grad_items: Vec<Bands>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(h: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let r = dot(h, h).sqrt();
    (h.iter().map(|v| v / (r + eps)).collect(), r)
}

/// Pulls a gradient on `h / (‖h‖ + ε)` back to `h`.
fn normalize_backward(h: &[f64], r: f64, g: &[f64], eps: f64) -> Vec<f64> {
    if r == 0.0 {
        return g.iter().map(|v| v / eps).collect();
    }
    let hg = dot(h, g);
    let c = hg / (r * (r + eps) * (r + eps));
    g.iter().zip(h).map(|(gv, hv)| gv / (r + eps) - c * hv).collect()
}

/// Cross-band decorrelation plus in-batch contrast on the higher bands
/// (`1..M`), with their gradients.
pub fn loss_freq(users: &[Bands], items: &[Bands], cfg: &FreqConfig) -> FreqOutput {
    let batch = users.len();
    assert_eq!(batch, items.len(), "user/item batch mismatch");
    if batch == 0 {
        return FreqOutput::default();
    }
    let m = users[0].len();
    let width = users[0][0].len();
    let norm_all = |nodes: &[Bands]| -> (Vec<Bands>, Vec<Vec<f64>>) {
        let mut hn = Vec::with_capacity(nodes.len());
        let mut rs = Vec::with_capacity(nodes.len());
        for node in nodes {
            let (h, r): (Vec<_>, Vec<_>) = node.iter().map(|h| normalize(h, cfg.eps)).unzip();
            hn.push(h);
            rs.push(r);
        }
        (hn, rs)
    };
    let (un, ur) = norm_all(users);
    let (inn, ir) = norm_all(items);
    let zeros = || vec![vec![vec![0.0; width]; m]; batch];
    let mut gu = zeros();
    let mut gi = zeros();

    let mut dec = 0.0;
    if m > 1 {
        let scale = 1.0 / (batch * m * (m - 1)) as f64;
        for b in 0..batch {
            for (hn, g) in [(&un[b], &mut gu[b]), (&inn[b], &mut gi[b])] {
                for a in 0..m {
                    for c in 0..m {
                        if a == c {
                            continue;
                        }
                        let cos = dot(&hn[a], &hn[c]);
                        dec += scale * cos * cos;
                        // each ordered pair differentiates both of its members
                        for k in 0..width {
                            g[a][k] += scale * 2.0 * cos * hn[c][k];
                            g[c][k] += scale * 2.0 * cos * hn[a][k];
                        }
                    }
                }
            }
        }
    }

    let mut disc = 0.0;
    if m > 1 {
        let scale = 1.0 / (batch * (m - 1)) as f64;
        let stack = |nodes: &[Bands], band: usize| {
            Array2::from_shape_fn((batch, width), |(b, k)| nodes[b][band][k])
        };
        for band in 1..m {
            let (u, it) = (stack(&un, band), stack(&inn, band));
            let mut g = u.dot(&it.t()) / cfg.tau;
            for (b, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                disc += scale * (lse - row[b]);
                row.mapv_inplace(|l| (l - lse).exp());
                row[b] -= 1.0;
                row *= scale / cfg.tau;
            }
            let (du, di) = (g.dot(&it), g.t().dot(&u));
            for b in 0..batch {
                for k in 0..width {
                    gu[b][band][k] += du[(b, k)];
                    gi[b][band][k] += di[(b, k)];
                }
            }
        }
    }

    let back = |raw: &[Bands], rs: &[Vec<f64>], g: Vec<Bands>| -> Vec<Bands> {
        g.into_iter()
            .enumerate()
            .map(|(b, node)| {
                node.into_iter()
                    .enumerate()
                    .map(|(band, gh)| normalize_backward(&raw[b][band], rs[b][band], &gh, cfg.eps))
                    .collect()
            })
            .collect()
    };
    FreqOutput {
        dec,
        disc,
        grad_users: back(users, &ur, gu),
        grad_items: back(items, &ir, gi),
    }
}

/// `(mean η − τ)²` and its derivative with respect to each `η`.
pub fn loss_eta(etas: &[f64], tau: f64) -> (f64, f64) {
    if etas.is_empty() {
        return (0.0, 0.0);
    }
    let n = etas.len() as f64;
    let mean = etas.iter().sum::<f64>() / n;
    let diff = mean - tau;
    (diff * diff, 2.0 * diff / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::assert_close;
    use proptest::prelude::*;

    const IB: IbConfig = IbConfig {
        alpha_ib: 1.0,
        mu_ib: 1.0,
        phi_plus: 0.2,
    };
    const FREQ: FreqConfig = FreqConfig { tau: 0.2, eps: 1e-8 };

    #[test]
    fn bpr_values() {
        assert_close(loss_bpr(&[0.0]), std::f64::consts::LN_2, 1e-15);
        assert!(loss_bpr(&[800.0]) < 1e-300);
        assert_close(loss_bpr(&[-800.0]), 800.0, 1e-12);
        assert_close(bpr_term(0.0).1, -0.5, 1e-15);
    }

    #[test]
    fn ib_values() {
        assert_eq!(loss_ib(&[vec![1.0, 1.0, 1.0]], &IB), 0.0);
        assert_close(loss_ib(&[vec![1.5, 1.0, 1.0]], &IB), 0.40, 1e-12);
        assert_eq!(loss_ib(&[vec![0.5, 0.9, 0.0]], &IB), 0.0);
        let (_, g) = ib_node(&[1.0, 1.0], &IB);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn dec_values() {
        let orth = vec![vec![vec![1.0, 0.0], vec![0.0, 2.0]]];
        let out = loss_freq(&orth, &orth, &FREQ);
        assert_close(out.dec, 0.0, 1e-15);
        let same = vec![vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]];
        let out = loss_freq(&same, &same, &FREQ);
        // two nodes per row, each contributes one per ordered pair
        assert_close(out.dec, 2.0, 1e-7);
    }

    #[test]
    fn single_row_contrast_is_zero() {
        let u = vec![vec![vec![1.0, 0.3], vec![0.2, 0.5]]];
        let i = vec![vec![vec![0.4, 0.1], vec![-0.3, 0.9]]];
        assert_close(loss_freq(&u, &i, &FREQ).disc, 0.0, 1e-15);
    }

    #[test]
    fn eta_values() {
        assert_eq!(loss_eta(&[0.5, 0.5], 0.5).0, 0.0);
        assert_close(loss_eta(&[1.0], 0.5).0, 0.25, 1e-15);
    }

    fn bands_strategy(batch: usize, m: usize, w: usize) -> impl Strategy<Value = Vec<Bands>> {
        prop::collection::vec(prop::collection::vec(prop::collection::vec(-1.0f64..1.0, w), m), batch)
    }

    proptest! {
        #[test]
        fn freq_gradient_matches_finite_differences(
            users in bands_strategy(3, 3, 4),
            items in bands_strategy(3, 3, 4),
            b in 0usize..3, band in 0usize..3, k in 0usize..4,
        ) {
            let out = loss_freq(&users, &items, &FREQ);
            let h = 1e-6;
            let total = |u: &[Bands], i: &[Bands]| {
                let o = loss_freq(u, i, &FREQ);
                o.dec + o.disc
            };
            let mut up = users.clone();
            up[b][band][k] += h;
            let mut um = users.clone();
            um[b][band][k] -= h;
            let fd = (total(&up, &items) - total(&um, &items)) / (2.0 * h);
            prop_assert!((fd - out.grad_users[b][band][k]).abs() < 1e-5 * (1.0 + fd.abs()));
            let mut ip = items.clone();
            ip[b][band][k] += h;
            let mut im = items.clone();
            im[b][band][k] -= h;
            let fd = (total(&users, &ip) - total(&users, &im)) / (2.0 * h);
            prop_assert!((fd - out.grad_items[b][band][k]).abs() < 1e-5 * (1.0 + fd.abs()));
        }

        #[test]
        fn ib_gradient_matches_finite_differences(gates in prop::collection::vec(0.5f64..2.0, 3), k in 0usize..3) {
            let (_, g) = ib_node(&gates, &IB);
            let h = 1e-7;
            let mut p = gates.clone();
            p[k] += h;
            let mut m = gates.clone();
            m[k] -= h;
            // skip points sitting on a kink
            let kinks = [1.0, 1.0 + IB.phi_plus];
            prop_assume!(kinks.iter().all(|c| (gates[k] - c).abs() > 1e-5));
            let fd = (ib_node(&p, &IB).0 - ib_node(&m, &IB).0) / (2.0 * h);
            prop_assert!((fd - g[k]).abs() < 1e-5 * (1.0 + fd.abs()));
        }

        #[test]
        fn bpr_is_nonnegative_and_decreasing(a in -50.0f64..50.0, d in 0.01f64..5.0) {
            prop_assert!(loss_bpr(&[a]) >= 0.0);
            prop_assert!(loss_bpr(&[a + d]) < loss_bpr(&[a]));
        }
    }
}
