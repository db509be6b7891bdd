//! Compressed sparse row graphs and the static graphs built from them:
//! the normalized user-item adjacency, content kNN item graphs and their
//! mixed, row-normalized combination.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::data::{Dataset, FeatureMatrix};
use crate::error::{Error, Result};

const GRAPH_MAGIC: &[u8; 4] = b"BRSG";
const GRAPH_VERSION: u32 = 1;
const GRAPH_HEADER_LEN: usize = 4 + 4 + 8 + 8 + 8;

/// Weighted sparse matrix in CSR layout. Column indices are strictly
/// ascending within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f32>,
}

impl SparseGraph {
    pub fn empty(rows: usize, cols: usize) -> Self {
        SparseGraph {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds a graph from per-row entry lists. Entries are sorted by column;
    /// duplicate columns within a row are rejected.
    pub fn from_rows(rows: usize, cols: usize, mut entries: Vec<Vec<(usize, f32)>>) -> Result<Self> {
        if entries.len() != rows {
            return Err(Error::Dimension(format!(
                "{} row lists for a graph with {rows} rows",
                entries.len()
            )));
        }
        let nnz = entries.iter().map(Vec::len).sum();
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in &mut entries {
            row.sort_unstable_by_key(|&(c, _)| c);
            for &(c, v) in row.iter() {
                col_idx.push(c as u32);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        let g = SparseGraph {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.row_ptr.len() != self.rows + 1
            || self.row_ptr[0] != 0
            || *self.row_ptr.last().unwrap() != self.col_idx.len()
            || self.col_idx.len() != self.values.len()
        {
            return Err(Error::Format("inconsistent CSR offsets".into()));
        }
        for r in 0..self.rows {
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if lo > hi {
                return Err(Error::Format(format!("row_ptr decreases at row {r}")));
            }
            let cols = &self.col_idx[lo..hi];
            if cols.iter().any(|&c| c as usize >= self.cols) {
                return Err(Error::Format(format!("column out of bounds in row {r}")));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("columns not strictly ascending in row {r}")));
            }
        }
        if let Some(pos) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite edge weight at entry {pos}")));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f32]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f32> {
        let (cols, vals) = self.row(r);
        cols.binary_search(&(c as u32)).ok().map(|k| vals[k])
    }

    pub fn iter_row(&self, r: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        let (cols, vals) = self.row(r);
        cols.iter().zip(vals).map(|(&c, &v)| (c as usize, v))
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).1.iter().map(|&v| v as f64).sum()
    }

    pub fn transpose(&self) -> SparseGraph {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for k in 0..self.cols {
            counts[k + 1] += counts[k];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0f32; self.nnz()];
        for r in 0..self.rows {
            for (c, v) in self.iter_row(r) {
                let slot = next[c];
                col_idx[slot] = r as u32;
                values[slot] = v;
                next[c] += 1;
            }
        }
        SparseGraph {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Dense product `self · x`.
    pub fn spmm(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.cols, "spmm shape mismatch");
        let mut out = Array2::zeros((self.rows, x.ncols()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut out_row)| {
                for (c, v) in self.iter_row(r) {
                    let v = v as f64;
                    Zip::from(&mut out_row)
                        .and(x.row(c))
                        .for_each(|o, &xv| *o += v * xv);
                }
            });
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            GRAPH_HEADER_LEN + 8 * self.row_ptr.len() + 8 * self.nnz(),
        );
        out.extend_from_slice(GRAPH_MAGIC);
        out.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.extend_from_slice(&(self.nnz() as u64).to_le_bytes());
        for &p in &self.row_ptr {
            out.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &c in &self.col_idx {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for &v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < GRAPH_HEADER_LEN || &bytes[0..4] != GRAPH_MAGIC {
            return Err(Error::Format("graph file magic is not BRSG".into()));
        }
        let u64_at = |off: usize| u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != GRAPH_VERSION {
            return Err(Error::Format(format!("unsupported BRSG version {version}")));
        }
        let rows = u64_at(8) as usize;
        let cols = u64_at(16) as usize;
        let nnz = u64_at(24) as usize;
        let expected = GRAPH_HEADER_LEN + 8 * (rows + 1) + 8 * nnz;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "graph file is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut off = GRAPH_HEADER_LEN;
        let row_ptr: Vec<usize> = (0..=rows)
            .map(|k| u64_at(off + 8 * k) as usize)
            .collect();
        off += 8 * (rows + 1);
        let col_idx: Vec<u32> = bytes[off..off + 4 * nnz]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += 4 * nnz;
        let values: Vec<f32> = bytes[off..off + 4 * nnz]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let g = SparseGraph {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Symmetric-normalized user-item adjacency over `num_users + num_items`
/// nodes (users first), built from train interactions only.
pub fn build_normalized_bipartite(ds: &Dataset) -> SparseGraph {
    let n = ds.num_nodes();
    let mut entries: Vec<Vec<(usize, f32)>> = vec![Vec::new(); n];
    for (u, items) in ds.train_history.iter().enumerate() {
        let du = items.len() as f64;
        for &i in items {
            let di = ds.train_item_users[i].len() as f64;
            let w = (1.0 / (du * di).sqrt()) as f32;
            entries[u].push((ds.num_users + i, w));
            entries[ds.num_users + i].push((u, w));
        }
    }
    SparseGraph::from_rows(n, n, entries).expect("bipartite construction is well-formed")
}

/// Directed top-`k` cosine neighbor graph over feature rows. Self loops
/// are excluded, ties go to the smaller index and non-positive
/// similarities are never stored.
pub fn build_content_knn(feat: &FeatureMatrix, k: usize) -> Result<SparseGraph> {
    if k == 0 {
        return Err(Error::Config("kNN k must be at least 1".into()));
    }
    let n = feat.rows;
    if n < k + 1 {
        return Err(Error::Config(format!(
            "kNN with k={k} needs at least {} items, have {n}",
            k + 1
        )));
    }
    let normalized: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let row = feat.row(r);
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter().map(|&v| v as f64 / norm).collect()
            } else {
                vec![0.0; row.len()]
            }
        })
        .collect();

    let entries: Vec<Vec<(usize, f32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &normalized[i];
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, dot(xi, &normalized[j])))
                .filter(|&(_, s)| s > 0.0)
                .collect();
            top_k_by_score(&mut sims, k);
            sims.into_iter().map(|(j, s)| (j, s as f32)).collect()
        })
        .collect();
    SparseGraph::from_rows(n, n, entries)
}

/// Default modality weights for the mixed item graph.
pub const VISUAL_GRAPH_WEIGHT: f64 = 0.1;
pub const TEXT_GRAPH_WEIGHT: f64 = 0.9;

/// `w_v·A_v + w_t·A_t`, then each row is rescaled to sum to one.
pub fn build_multimodal_item_graph(
    av: &SparseGraph,
    at: &SparseGraph,
    visual_weight: f64,
    text_weight: f64,
) -> Result<SparseGraph> {
    if av.rows() != at.rows() || av.cols() != at.cols() {
        return Err(Error::Dimension(format!(
            "item graphs are {}x{} and {}x{}",
            av.rows(),
            av.cols(),
            at.rows(),
            at.cols()
        )));
    }
    let entries: Vec<Vec<(usize, f32)>> = (0..av.rows())
        .map(|r| {
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(av.row_len(r) + at.row_len(r));
            merged.extend(av.iter_row(r).map(|(c, v)| (c, visual_weight * v as f64)));
            merged.extend(at.iter_row(r).map(|(c, v)| (c, text_weight * v as f64)));
            merged.sort_by_key(|&(c, _)| c);
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(merged.len());
            for (c, v) in merged {
                match row.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => row.push((c, v)),
                }
            }
            row.retain(|&(_, v)| v != 0.0);
            let sum: f64 = row.iter().map(|&(_, v)| v).sum();
            if sum == 0.0 {
                return Vec::new();
            }
            row.into_iter().map(|(c, v)| (c, (v / sum) as f32)).collect()
        })
        .collect();
    SparseGraph::from_rows(av.rows(), av.cols(), entries)
}

/// Keeps the `k` highest scores, ordered by descending score then
/// ascending index.
pub(crate) fn top_k_by_score(scored: &mut Vec<(usize, f64)>, k: usize) {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    if scored.len() > k {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Interaction, Split};
    use crate::testutil::assert_close;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn train_ds(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Dataset {
        let its = edges
            .iter()
            .map(|&(user, item)| Interaction {
                user,
                item,
                split: Split::Train,
            })
            .collect();
        Dataset::from_interactions(num_users, num_items, its).unwrap()
    }

    #[test]
    fn bipartite_weights_match_hand_normalization() {
        let ds = train_ds(2, 2, &[(0, 0), (0, 1), (1, 1)]);
        let g = build_normalized_bipartite(&ds);
        assert_close(g.get(0, 2).unwrap(), 0.70711, 1e-5);
        assert_close(g.get(0, 3).unwrap(), 0.5, 1e-7);
        assert_close(g.get(1, 3).unwrap(), 0.70711, 1e-5);
        for r in 0..g.rows() {
            for (c, v) in g.iter_row(r) {
                assert_eq!(g.get(c, r), Some(v));
            }
        }
    }

    #[test]
    fn single_edge_has_unit_weight() {
        let g = build_normalized_bipartite(&train_ds(1, 1, &[(0, 0)]));
        assert_eq!(g.get(0, 1), Some(1.0));
    }

    #[test]
    fn isolated_nodes_have_empty_rows() {
        let g = build_normalized_bipartite(&train_ds(2, 3, &[(0, 0)]));
        assert_eq!(g.row_len(1), 0);
        assert_eq!(g.row_len(2 + 2), 0);
    }

    #[test]
    fn knn_drops_zero_similarity_edges() {
        let feat = FeatureMatrix::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = build_content_knn(&feat, 1).unwrap();
        assert_eq!(g.iter_row(0).collect::<Vec<_>>(), vec![(1, 1.0)]);
        assert_eq!(g.iter_row(1).collect::<Vec<_>>(), vec![(0, 1.0)]);
        assert_eq!(g.row_len(2), 0);
    }

    #[test]
    fn knn_ties_choose_smallest_index() {
        let feat = FeatureMatrix::new(4, 2, vec![0.5, 0.5].repeat(4)).unwrap();
        let g = build_content_knn(&feat, 1).unwrap();
        assert_eq!(g.iter_row(0).map(|e| e.0).collect::<Vec<_>>(), vec![1]);
        for r in 1..4 {
            let row: Vec<_> = g.iter_row(r).collect();
            assert_eq!(row.len(), 1);
            assert_eq!(row[0].0, 0);
            assert_close(row[0].1, 1.0, 1e-6);
        }
    }

    #[test]
    fn knn_rejects_bad_k() {
        let feat = FeatureMatrix::zeros(2, 2);
        assert!(build_content_knn(&feat, 0).is_err());
        assert!(build_content_knn(&feat, 2).is_err());
    }

    #[test]
    fn mixed_graph_examples() {
        let av = SparseGraph::from_rows(3, 3, vec![vec![(1, 1.0)], vec![], vec![]]).unwrap();
        let empty = SparseGraph::empty(3, 3);
        let g = build_multimodal_item_graph(&av, &empty, 0.1, 0.9).unwrap();
        assert_eq!(g.iter_row(0).collect::<Vec<_>>(), vec![(1, 1.0)]);

        let at = SparseGraph::from_rows(3, 3, vec![vec![(2, 1.0)], vec![], vec![]]).unwrap();
        let g = build_multimodal_item_graph(&av, &at, 0.1, 0.9).unwrap();
        let row: Vec<_> = g.iter_row(0).collect();
        assert_eq!(row[0].0, 1);
        assert_close(row[0].1, 0.1, 1e-7);
        assert_eq!(row[1].0, 2);
        assert_close(row[1].1, 0.9, 1e-7);

        let bad = SparseGraph::empty(2, 2);
        assert!(matches!(
            build_multimodal_item_graph(&av, &bad, 0.1, 0.9),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn text_only_graph_is_normalized_text_graph() {
        let at = SparseGraph::from_rows(
            3,
            3,
            vec![vec![(1, 0.6), (2, 0.2)], vec![(0, 0.5)], vec![]],
        )
        .unwrap();
        let g = build_multimodal_item_graph(&SparseGraph::empty(3, 3), &at, 0.1, 0.9).unwrap();
        assert_close(g.get(0, 1).unwrap(), 0.75, 1e-7);
        assert_close(g.get(0, 2).unwrap(), 0.25, 1e-7);
        assert_close(g.get(1, 0).unwrap(), 1.0, 1e-7);
    }

    #[test]
    fn spmm_and_transpose() {
        let g = SparseGraph::from_rows(2, 3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)]]).unwrap();
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(g.spmm(x.view()), array![[3.0, 2.0], [0.0, -1.0]]);
        let t = g.transpose();
        assert_eq!(t.get(2, 0), Some(2.0));
        assert_eq!(t.transpose(), g);
    }

    #[test]
    fn brsg_roundtrip_is_bit_exact() {
        let g = SparseGraph::from_rows(2, 3, vec![vec![(0, 0.1), (2, 2.5)], vec![(1, -1.0)]]).unwrap();
        let bytes = g.encode();
        let back = SparseGraph::decode(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.encode(), bytes);
        let mut bad = bytes;
        bad.pop();
        assert!(SparseGraph::decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn normalized_adjacency_is_contractive(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (nu, ni) = (rng.random_range(1..8), rng.random_range(1..8));
            let edges: Vec<(usize, usize)> = (0..rng.random_range(1..20))
                .map(|_| (rng.random_range(0..nu), rng.random_range(0..ni)))
                .collect();
            let g = build_normalized_bipartite(&train_ds(nu, ni, &edges));
            let x = Array2::from_shape_fn((nu + ni, 1), |_| rng.random_range(-1.0..1.0));
            let y = g.spmm(x.view());
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(ny <= nx + 1e-5);
        }

        #[test]
        fn knn_degree_and_mixed_row_sums(seed in any::<u64>(), k in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let mk = |rng: &mut ChaCha8Rng| {
                let data = (0..n * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                FeatureMatrix::new(n, 3, data).unwrap()
            };
            let av = build_content_knn(&mk(&mut rng), k).unwrap();
            let at = build_content_knn(&mk(&mut rng), k).unwrap();
            for r in 0..n {
                prop_assert!(av.row_len(r) <= k);
            }
            let g = build_multimodal_item_graph(&av, &at, 0.1, 0.9).unwrap();
            for r in 0..n {
                let s = g.row_sum(r);
                prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-6, "row {} sums to {}", r, s);
            }
        }
    }
}
