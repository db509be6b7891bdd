//! Plain `key=value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bridge_core::behavior::{ResidualKind, EASE_DEFAULT_L2};
use bridge_core::calibrator::{CoeffVariant, ScopeVariant};
use bridge_core::data::FeatureRowOrder;
use bridge_core::graph::{TEXT_GRAPH_WEIGHT, VISUAL_GRAPH_WEIGHT};
use bridge_core::pipeline::{PipelineOptions, DEFAULT_BEHAVIOR_K, DEFAULT_ITEM_KNN_K};
use bridge_core::spectral::BandMode;
use bridge_core::trainer::TrainConfig;
use bridge_core::Error;

pub const DEFAULT_GRID: [f64; 5] = [0.1, 0.2, 0.4, 0.6, 0.8];

/// Ablation variants in table order.
pub const VARIANTS: [&str; 18] = [
    "none",
    "wo_behavior",
    "wo_topk",
    "global",
    "wo_item_graph",
    "wo_image",
    "wo_text",
    "wo_content",
    "wo_ib",
    "wo_freq",
    "wo_both_freq",
    "equal_cap",
    "gram",
    "dct",
    "random",
    "raw_cooc",
    "ease",
    "conservative",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub interactions: PathBuf,
    pub visual_features: PathBuf,
    pub text_features: PathBuf,
    pub artifact_dir: PathBuf,
    pub feature_row_order: FeatureRowOrder,
    pub train: TrainConfig,
    pub lambda_b_grid: Vec<f64>,
    pub behavior: ResidualKind,
    pub k_b: usize,
    pub ease_l2: f64,
    pub item_knn_k: usize,
    pub visual_graph_weight: f64,
    pub text_graph_weight: f64,
    pub drop_image: bool,
    pub drop_text: bool,
    pub drop_item_graph: bool,
    pub drop_ib: bool,
    pub drop_freq: bool,
    pub drop_content: bool,
    pub mask_valid_at_test: bool,
    pub sweep_retrain: bool,
    pub variants: Vec<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            interactions: PathBuf::from("interactions.tsv"),
            visual_features: PathBuf::from("visual.brfm"),
            text_features: PathBuf::from("text.brfm"),
            artifact_dir: PathBuf::from("artifacts"),
            feature_row_order: FeatureRowOrder::RawId,
            train: TrainConfig::default(),
            lambda_b_grid: DEFAULT_GRID.to_vec(),
            behavior: ResidualKind::Behavior,
            k_b: DEFAULT_BEHAVIOR_K,
            ease_l2: EASE_DEFAULT_L2,
            item_knn_k: DEFAULT_ITEM_KNN_K,
            visual_graph_weight: VISUAL_GRAPH_WEIGHT,
            text_graph_weight: TEXT_GRAPH_WEIGHT,
            drop_image: false,
            drop_text: false,
            drop_item_graph: false,
            drop_ib: false,
            drop_freq: false,
            drop_content: false,
            mask_valid_at_test: false,
            sweep_retrain: false,
            variants: VARIANTS.iter().map(|v| v.to_string()).collect(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, Error> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Error> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl Config {
    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, Error> {
        let mut cfg = Config {
            interactions: base.join("interactions.tsv"),
            visual_features: base.join("visual.brfm"),
            text_features: base.join("text.brfm"),
            artifact_dir: base.join("artifacts"),
            ..Config::default()
        };
        let mut seen = BTreeSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(Error::Config(format!("key `{key}` set twice (line {})", idx + 1)));
            }
            cfg.set(key, value, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), Error> {
        let t = &mut self.train;
        match key {
            "interactions" => self.interactions = resolve(base, value),
            "visual_features" => self.visual_features = resolve(base, value),
            "text_features" => self.text_features = resolve(base, value),
            "artifact_dir" => self.artifact_dir = resolve(base, value),
            "feature_row_order" => self.feature_row_order = value.parse()?,
            "lr" => t.lr = parse(key, value)?,
            "l2_reg" => t.l2_reg = parse(key, value)?,
            "lambda_base" => t.lambda_base = parse(key, value)?,
            "lambda_ib" => t.lambda_ib = parse(key, value)?,
            "lambda_freq" => t.lambda_freq = parse(key, value)?,
            "lambda_eta" => t.lambda_eta = parse(key, value)?,
            "tau_eta" => t.tau_eta = parse(key, value)?,
            "alpha_ib" => t.alpha_ib = parse(key, value)?,
            "mu_ib" => t.mu_ib = parse(key, value)?,
            "phi_plus" => t.phi_plus = parse(key, value)?,
            "tau_disc" => t.tau_disc = parse(key, value)?,
            "norm_eps" => t.norm_eps = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "dim" => t.dim = parse(key, value)?,
            "layers" => t.layers = parse(key, value)?,
            "proj_bias" => t.proj_bias = parse_bool(key, value)?,
            "bands" => t.bands = parse(key, value)?,
            "band_mode" => t.band_mode = value.parse()?,
            "k_c" => {
                t.k_c_train = parse(key, value)?;
                t.k_c_eval = t.k_c_train;
            }
            "k_c_train" => t.k_c_train = parse(key, value)?,
            "k_c_eval" => t.k_c_eval = parse(key, value)?,
            "lambda_b" => t.lambda_b = parse(key, value)?,
            "scope" => t.scope = value.parse()?,
            "coeff" => t.coeff = value.parse()?,
            "lambda_b_grid" => {
                self.lambda_b_grid = parse_list(value)
                    .iter()
                    .map(|v| parse(key, v))
                    .collect::<Result<_, _>>()?
            }
            "behavior" => self.behavior = value.parse()?,
            "k_b" => self.k_b = parse(key, value)?,
            "ease_l2" => self.ease_l2 = parse(key, value)?,
            "item_knn_k" => self.item_knn_k = parse(key, value)?,
            "visual_graph_weight" => self.visual_graph_weight = parse(key, value)?,
            "text_graph_weight" => self.text_graph_weight = parse(key, value)?,
            "drop_image" => self.drop_image = parse_bool(key, value)?,
            "drop_text" => self.drop_text = parse_bool(key, value)?,
            "drop_item_graph" => self.drop_item_graph = parse_bool(key, value)?,
            "drop_ib" => self.drop_ib = parse_bool(key, value)?,
            "drop_freq" => self.drop_freq = parse_bool(key, value)?,
            "drop_content" => self.drop_content = parse_bool(key, value)?,
            "mask_valid_at_test" => self.mask_valid_at_test = parse_bool(key, value)?,
            "sweep_retrain" => self.sweep_retrain = parse_bool(key, value)?,
            "variants" => self.variants = parse_list(value),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.train.validate()?;
        if self.lambda_b_grid.is_empty() || self.lambda_b_grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("lambda_b_grid needs at least one nonnegative value".into()));
        }
        if self.k_b == 0 || self.item_knn_k == 0 {
            return Err(Error::Config("k_b and item_knn_k must be at least 1".into()));
        }
        if let Some(v) = self.variants.iter().find(|v| !VARIANTS.contains(&v.as_str())) {
            return Err(Error::Config(format!("unknown ablation variant `{v}`")));
        }
        Ok(())
    }

    /// Training settings with the loss switches applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if self.drop_ib {
            t.lambda_ib = 0.0;
        }
        if self.drop_freq {
            t.lambda_freq = 0.0;
        }
        t
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            item_knn_k: self.item_knn_k,
            visual_weight: self.visual_graph_weight,
            text_weight: self.text_graph_weight,
            drop_image: self.drop_image,
            drop_text: self.drop_text,
            drop_item_graph: self.drop_item_graph,
            drop_content: self.drop_content,
            behavior: self.behavior,
            k_b: self.k_b,
            ease_l2: self.ease_l2,
        }
    }

    /// Copy of this config with one ablation variant applied.
    pub fn with_variant(&self, variant: &str) -> Result<Config, Error> {
        let mut c = self.clone();
        match variant {
            "none" => {}
            "wo_behavior" => c.behavior = ResidualKind::Zero,
            "wo_topk" => c.train.scope = ScopeVariant::NoTrainScope,
            "global" => c.train.scope = ScopeVariant::Global,
            "wo_item_graph" => c.drop_item_graph = true,
            "wo_image" => c.drop_image = true,
            "wo_text" => c.drop_text = true,
            "wo_content" => c.drop_content = true,
            "wo_ib" => c.drop_ib = true,
            "wo_freq" => c.drop_freq = true,
            "wo_both_freq" => {
                c.drop_ib = true;
                c.drop_freq = true;
            }
            "equal_cap" => c.train.band_mode = BandMode::EqualCapacity,
            "gram" => c.train.band_mode = BandMode::Gram,
            "dct" => c.train.band_mode = BandMode::Dct,
            "random" => c.train.band_mode = BandMode::RandomOrtho,
            "raw_cooc" => c.behavior = ResidualKind::RawCooc,
            "ease" => c.behavior = ResidualKind::Ease,
            "conservative" => c.train.coeff = CoeffVariant::Conservative,
            other => return Err(Error::Config(format!("unknown ablation variant `{other}`"))),
        }
        Ok(c)
    }

    /// Every key with its resolved value; parsing this text yields `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("interactions", self.interactions.display().to_string());
        kv("visual_features", self.visual_features.display().to_string());
        kv("text_features", self.text_features.display().to_string());
        kv("artifact_dir", self.artifact_dir.display().to_string());
        kv("feature_row_order", self.feature_row_order.name().into());
        kv("lr", t.lr.to_string());
        kv("l2_reg", t.l2_reg.to_string());
        kv("lambda_base", t.lambda_base.to_string());
        kv("lambda_ib", t.lambda_ib.to_string());
        kv("lambda_freq", t.lambda_freq.to_string());
        kv("lambda_eta", t.lambda_eta.to_string());
        kv("tau_eta", t.tau_eta.to_string());
        kv("alpha_ib", t.alpha_ib.to_string());
        kv("mu_ib", t.mu_ib.to_string());
        kv("phi_plus", t.phi_plus.to_string());
        kv("tau_disc", t.tau_disc.to_string());
        kv("norm_eps", t.norm_eps.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("dim", t.dim.to_string());
        kv("layers", t.layers.to_string());
        kv("proj_bias", t.proj_bias.to_string());
        kv("bands", t.bands.to_string());
        kv("band_mode", t.band_mode.name().into());
        kv("k_c_train", t.k_c_train.to_string());
        kv("k_c_eval", t.k_c_eval.to_string());
        kv("lambda_b", t.lambda_b.to_string());
        kv("scope", t.scope.name().into());
        kv("coeff", t.coeff.name().into());
        kv("lambda_b_grid", list(&self.lambda_b_grid));
        kv("behavior", self.behavior.name().into());
        kv("k_b", self.k_b.to_string());
        kv("ease_l2", self.ease_l2.to_string());
        kv("item_knn_k", self.item_knn_k.to_string());
        kv("visual_graph_weight", self.visual_graph_weight.to_string());
        kv("text_graph_weight", self.text_graph_weight.to_string());
        kv("drop_image", self.drop_image.to_string());
        kv("drop_text", self.drop_text.to_string());
        kv("drop_item_graph", self.drop_item_graph.to_string());
        kv("drop_ib", self.drop_ib.to_string());
        kv("drop_freq", self.drop_freq.to_string());
        kv("drop_content", self.drop_content.to_string());
        kv("mask_valid_at_test", self.mask_valid_at_test.to_string());
        kv("sweep_retrain", self.sweep_retrain.to_string());
        kv("variants", self.variants.join(","));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let text = "# comment\nlr = 0.01\nk_c=50\nscope=global\nband_mode=dct\nlambda_b_grid=0.2, 0.4\ndrop_ib=true\n";
        let cfg = Config::parse(text, Path::new("/data")).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!((cfg.train.k_c_train, cfg.train.k_c_eval), (50, 50));
        assert_eq!(cfg.train.scope, ScopeVariant::Global);
        assert_eq!(cfg.lambda_b_grid, vec![0.2, 0.4]);
        assert_eq!(cfg.interactions, PathBuf::from("/data/interactions.tsv"));
        assert_eq!(cfg.train_config().lambda_ib, 0.0);
        let back = Config::parse(&cfg.to_text(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_repeated_keys() {
        assert!(Config::parse("learning_rate=1", Path::new(".")).is_err());
        assert!(Config::parse("lr=1\nlr=2", Path::new(".")).is_err());
        assert!(Config::parse("lr", Path::new(".")).is_err());
        assert!(Config::parse("variants=none,bogus", Path::new(".")).is_err());
        assert!(Config::parse("proj_bias=maybe", Path::new(".")).is_err());
    }

    #[test]
    fn variant_switches() {
        let base = Config::default();
        assert_eq!(base.with_variant("none").unwrap(), base);
        assert_eq!(base.with_variant("wo_behavior").unwrap().behavior, ResidualKind::Zero);
        assert_eq!(base.with_variant("global").unwrap().train.scope, ScopeVariant::Global);
        let both = base.with_variant("wo_both_freq").unwrap().train_config();
        assert_eq!((both.lambda_ib, both.lambda_freq), (0.0, 0.0));
        for v in VARIANTS {
            base.with_variant(v).unwrap();
        }
    }
}
