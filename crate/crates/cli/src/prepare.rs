//! Dataset loading and the content-hashed artifact cache.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use sha2::{Digest, Sha256};

use bridge_core::behavior::{build_residual, BehaviorModel, Residual, ResidualKind};
use bridge_core::data::{align_features, load_features, load_interactions, validate_split_integrity, Dataset, Modality};
use bridge_core::encoder::Graphs;
use bridge_core::graph::{build_normalized_bipartite, SparseGraph};
use bridge_core::pipeline::{build_item_graph, Pipeline};
use bridge_core::Error;

use crate::config::Config;

pub const BIPARTITE_FILE: &str = "bipartite.brsg";
pub const ITEM_GRAPH_FILE: &str = "item_graph.brsg";
pub const BEHAVIOR_FILE: &str = "behavior.brsg";
pub const INTEGRITY_FILE: &str = "integrity.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn cache_dir(cfg: &Config) -> PathBuf {
    cfg.artifact_dir.join("cache")
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn key(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Loads interactions and both feature files, aligned to internal item order.
pub fn load_dataset(cfg: &Config) -> Result<Dataset> {
    let mut ds = load_interactions(&cfg.interactions)?;
    for (modality, path) in [(Modality::Visual, &cfg.visual_features), (Modality::Text, &cfg.text_features)] {
        let fm = load_features(path, ds.num_items)?;
        let fm = align_features(fm, &ds.item_ids, cfg.feature_row_order)?;
        ds = ds.with_features(modality, fm)?;
    }
    Ok(ds)
}

fn read_manifest(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect()
}

fn write_manifest(path: &Path, manifest: &BTreeMap<String, String>) -> Result<()> {
    let text: String = manifest.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loaded dataset and graphs plus which cache files were (re)built.
pub struct Prepared {
    pub pipeline: Pipeline,
    pub rebuilt: Vec<&'static str>,
}

/// Builds or reuses the cached graphs. A cache file is reused only when
/// the hash of its inputs and options matches the manifest entry.
pub fn prepare(cfg: &Config) -> Result<Prepared> {
    let dir = cache_dir(cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ds = load_dataset(cfg)?;

    let report = validate_split_integrity(&ds);
    let report_path = dir.join(INTEGRITY_FILE);
    fs::write(&report_path, report.to_text()).with_context(|| format!("writing {}", report_path.display()))?;
    if !report.is_clean() {
        return Err(Error::Data(format!(
            "{} split-integrity violations, see {}",
            report.violations.len(),
            report_path.display()
        ))
        .into());
    }

    let h_inter = file_hash(&cfg.interactions)?;
    let h_vis = file_hash(&cfg.visual_features)?;
    let h_txt = file_hash(&cfg.text_features)?;
    let opts = cfg.pipeline_options();
    let item_opts = format!(
        "k={};vw={};tw={};img={};txt={};graph={};order={}",
        opts.item_knn_k,
        opts.visual_weight,
        opts.text_weight,
        opts.drop_image,
        opts.drop_text,
        opts.drop_item_graph,
        cfg.feature_row_order.name()
    );
    let k_b = cfg.k_b.to_string();

    let manifest_path = dir.join(MANIFEST_FILE);
    let mut manifest = read_manifest(&manifest_path);
    let mut rebuilt = Vec::new();
    let mut cached = |name: &'static str, key: String, build: &dyn Fn() -> Result<SparseGraph>| -> Result<SparseGraph> {
        let path = dir.join(name);
        if manifest.get(name) == Some(&key) && path.exists() {
            if let Ok(g) = SparseGraph::load(&path) {
                return Ok(g);
            }
        }
        info!("building {name}");
        let g = build()?;
        g.save(&path)?;
        manifest.insert(name.to_owned(), key);
        rebuilt.push(name);
        Ok(g)
    };

    let bipartite = cached(BIPARTITE_FILE, key(&[&h_inter]), &|| Ok(build_normalized_bipartite(&ds)))?;
    let item_graph = cached(ITEM_GRAPH_FILE, key(&[&h_inter, &h_vis, &h_txt, &item_opts]), &|| {
        Ok(build_item_graph(&ds, &opts)?)
    })?;
    let behavior = cached(BEHAVIOR_FILE, key(&[&h_inter, &k_b]), &|| {
        Ok(bridge_core::behavior::build_behavior_graph(&ds, cfg.k_b)?)
    })?;
    write_manifest(&manifest_path, &manifest)?;

    let residual: Box<dyn Residual> = match cfg.behavior {
        ResidualKind::Behavior => Box::new(BehaviorModel::from_graph(&ds, behavior, cfg.k_b)?.with_dense_cache()),
        kind => build_residual(&ds, kind, cfg.k_b, cfg.ease_l2)?,
    };
    let graphs = Graphs::new(bipartite, item_graph)?;
    let pipeline = Pipeline::from_parts(ds, graphs, residual, &opts)?;
    Ok(Prepared { pipeline, rebuilt })
}
