//! Assembles a dataset, its static graphs, content inputs and residual into
//! the bundle the trainer consumes.

use crate::behavior::{build_residual, Residual, ResidualKind, EASE_DEFAULT_L2};
use crate::data::{Dataset, Modality};
use crate::encoder::{ContentInputs, Graphs};
use crate::error::Result;
use crate::graph::{
    build_content_knn, build_multimodal_item_graph, build_normalized_bipartite, SparseGraph, TEXT_GRAPH_WEIGHT,
    VISUAL_GRAPH_WEIGHT,
};
use crate::trainer::TrainInputs;

pub const DEFAULT_ITEM_KNN_K: usize = 10;
pub const DEFAULT_BEHAVIOR_K: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOptions {
    pub item_knn_k: usize,
    pub visual_weight: f64,
    pub text_weight: f64,
    /// Zero the visual channel and build the item graph from text alone.
    pub drop_image: bool,
    pub drop_text: bool,
    pub drop_item_graph: bool,
    /// Zero both content channels; the content item graph is kept.
    pub drop_content: bool,
    pub behavior: ResidualKind,
    pub k_b: usize,
    pub ease_l2: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            item_knn_k: DEFAULT_ITEM_KNN_K,
            visual_weight: VISUAL_GRAPH_WEIGHT,
            text_weight: TEXT_GRAPH_WEIGHT,
            drop_image: false,
            drop_text: false,
            drop_item_graph: false,
            drop_content: false,
            behavior: ResidualKind::Behavior,
            k_b: DEFAULT_BEHAVIOR_K,
            ease_l2: EASE_DEFAULT_L2,
        }
    }
}

/// Mixed content item graph honoring the modality switches. Dropped
/// modalities contribute an empty kNN graph.
pub fn build_item_graph(ds: &Dataset, opts: &PipelineOptions) -> Result<SparseGraph> {
    let n = ds.num_items;
    if opts.drop_item_graph || n < 2 {
        return Ok(SparseGraph::empty(n, n));
    }
    let k = opts.item_knn_k.min(n - 1);
    let knn = |m: Modality, dropped: bool| -> Result<SparseGraph> {
        match ds.features.get(&m) {
            Some(fm) if !dropped => build_content_knn(fm, k),
            _ => Ok(SparseGraph::empty(n, n)),
        }
    };
    let av = knn(Modality::Visual, opts.drop_image)?;
    let at = knn(Modality::Text, opts.drop_text)?;
    build_multimodal_item_graph(&av, &at, opts.visual_weight, opts.text_weight)
}

pub struct Pipeline {
    pub ds: Dataset,
    pub content: ContentInputs,
    pub graphs: Graphs,
    pub residual: Box<dyn Residual>,
}

impl Pipeline {
    pub fn build(ds: Dataset, opts: &PipelineOptions) -> Result<Self> {
        let graphs = Graphs::new(build_normalized_bipartite(&ds), build_item_graph(&ds, opts)?)?;
        let residual = build_residual(&ds, opts.behavior, opts.k_b, opts.ease_l2)?;
        Self::from_parts(ds, graphs, residual, opts)
    }

    /// Uses prebuilt graphs and residual, e.g. loaded from a cache.
    pub fn from_parts(ds: Dataset, graphs: Graphs, residual: Box<dyn Residual>, opts: &PipelineOptions) -> Result<Self> {
        let mut content = ContentInputs::from_dataset(&ds)?;
        if opts.drop_image || opts.drop_content {
            content.drop_visual();
        }
        if opts.drop_text || opts.drop_content {
            content.drop_text();
        }
        Ok(Pipeline {
            ds,
            content,
            graphs,
            residual,
        })
    }

    pub fn inputs(&self) -> TrainInputs<'_> {
        TrainInputs {
            ds: &self.ds,
            content: &self.content,
            graphs: &self.graphs,
            residual: self.residual.as_ref(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_planted, PlantedConfig};

    #[test]
    fn item_graph_switches() {
        let ds = make_planted(&PlantedConfig::new(20, 40, 4, 0.1, 1)).unwrap();
        let full = build_item_graph(&ds, &PipelineOptions::default()).unwrap();
        assert!(full.nnz() > 0);
        for r in 0..40 {
            let s = full.row_sum(r);
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-6);
        }
        let none = build_item_graph(&ds, &PipelineOptions { drop_item_graph: true, ..Default::default() }).unwrap();
        assert_eq!(none.nnz(), 0);
        let text_only = build_item_graph(&ds, &PipelineOptions { drop_image: true, ..Default::default() }).unwrap();
        let at = build_content_knn(&ds.features[&Modality::Text], DEFAULT_ITEM_KNN_K).unwrap();
        let expected = build_multimodal_item_graph(&SparseGraph::empty(40, 40), &at, 0.1, 0.9).unwrap();
        assert_eq!(text_only, expected);
    }

    #[test]
    fn dropped_modalities_are_zeroed() {
        let ds = make_planted(&PlantedConfig::new(20, 40, 4, 0.1, 1)).unwrap();
        let opts = PipelineOptions {
            drop_image: true,
            drop_text: true,
            behavior: ResidualKind::Zero,
            ..Default::default()
        };
        let p = Pipeline::build(ds, &opts).unwrap();
        assert!(p.content.visual.iter().all(|&v| v == 0.0));
        assert!(p.content.text.iter().all(|&v| v == 0.0));
        assert_eq!(p.graphs.item_graph.nnz(), 0);
    }
}
