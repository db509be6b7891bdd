//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use ndarray::Array1;
use serde::Serialize;

use bridge_core::calibrator::{calibrated_row, Calibration, CoeffVariant};
use bridge_core::checkpoint::Checkpoint;
use bridge_core::data::Split;
use bridge_core::metrics::{band_diagnostics, representation_diagnostics, EvalOptions, MetricsReport};
use bridge_core::params::{CoeffParams, ModelParams};
use bridge_core::pipeline::Pipeline;
use bridge_core::spectral::BandSet;
use bridge_core::synth::{make_planted, write_planted, PlantedConfig};
use bridge_core::trainer::{evaluate_model, fit_with, forward, EpochRecord, TrainConfig, TrainedModel};

use crate::config::Config;
use crate::prepare::{cache_dir, prepare};

pub const CHECKPOINT_FILE: &str = "checkpoint.brck";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.txt";

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(cfg: &Config, dir: &Path) -> Result<()> {
    write(&dir.join(RESOLVED_CONFIG_FILE), cfg.to_text())
}

fn eval_options(cfg: &Config, split: Split) -> EvalOptions {
    EvalOptions {
        mask_valid_at_test: cfg.mask_valid_at_test,
        ..EvalOptions::new(split)
    }
}

fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    write(path, report.to_string())?;
    write(&path.with_extension("json"), serde_json::to_string_pretty(report)?)
}

pub fn cmd_prepare(cfg: &Config) -> Result<()> {
    let prepared = prepare(cfg)?;
    write_resolved(cfg, &cache_dir(cfg))?;
    let ds = &prepared.pipeline.ds;
    if prepared.rebuilt.is_empty() {
        println!("cache up to date ({} users, {} items)", ds.num_users, ds.num_items);
    } else {
        println!(
            "rebuilt {} ({} users, {} items)",
            prepared.rebuilt.join(", "),
            ds.num_users,
            ds.num_items
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    batches: usize,
    rank: f64,
    base: f64,
    ib: f64,
    dec: f64,
    disc: f64,
    eta: f64,
    reg: f64,
    total: f64,
    valid_recall20: f64,
    valid_ndcg20: f64,
}

impl From<&EpochRecord> for LogRow {
    fn from(r: &EpochRecord) -> Self {
        let l = &r.loss;
        LogRow {
            epoch: r.epoch,
            batches: r.batches,
            rank: l.rank,
            base: l.base,
            ib: l.ib,
            dec: l.dec,
            disc: l.disc,
            eta: l.eta,
            reg: l.reg,
            total: l.total,
            valid_recall20: r.valid_recall20,
            valid_ndcg20: r.valid_ndcg20,
        }
    }
}

/// Trains on a prepared pipeline, writing the epoch log and best checkpoint
/// into `out_dir`.
fn train_into(cfg: &Config, pipeline: &Pipeline, out_dir: &Path) -> Result<TrainedModel> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_resolved(cfg, out_dir)?;
    let log_path = out_dir.join("train_log.csv");
    let mut log = csv::Writer::from_path(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
    let mut log_err = None;
    let model = fit_with(pipeline.inputs(), &cfg.train_config(), |record| {
        if let Err(e) = log.serialize(LogRow::from(record)).and_then(|_| log.flush().map_err(Into::into)) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    Checkpoint {
        params: model.params.clone(),
        bands: model.bands.clone(),
        config_echo: cfg.to_text(),
    }
    .save(out_dir.join(CHECKPOINT_FILE))?;
    Ok(model)
}

pub fn cmd_train(cfg: &Config) -> Result<()> {
    let prepared = prepare(cfg)?;
    let model = train_into(cfg, &prepared.pipeline, &cfg.artifact_dir)?;
    println!(
        "best epoch {} valid R@20 {:.4}; checkpoint {}",
        model.history.best_epoch.unwrap_or(0),
        model.history.best_valid_recall20,
        cfg.artifact_dir.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn load_checkpoint(cfg: &Config, path: Option<&Path>) -> Result<(PathBuf, Checkpoint)> {
    let path = path.map(Path::to_owned).unwrap_or_else(|| cfg.artifact_dir.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((path, ck))
}

fn evaluate_checkpoint(
    pipeline: &Pipeline,
    train: &TrainConfig,
    params: &ModelParams,
    bands: &BandSet,
    cal: &Calibration,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    Ok(evaluate_model(params, bands, &pipeline.inputs(), train, cal, opts)?)
}

pub fn cmd_eval(cfg: &Config, checkpoint: Option<&Path>, split: Split) -> Result<()> {
    let (_, ck) = load_checkpoint(cfg, checkpoint)?;
    let prepared = prepare(cfg)?;
    let train = cfg.train_config();
    let report = evaluate_checkpoint(
        &prepared.pipeline,
        &train,
        &ck.params,
        &ck.bands,
        &train.calibration(),
        &eval_options(cfg, split),
    )?;
    let dir = cfg.artifact_dir.join("eval");
    write_resolved(cfg, &dir)?;
    write_report(&report, &dir.join(format!("{split}.txt")))?;
    print!("{report}");
    Ok(())
}

/// Parameters with neutral conservative coefficients when the checkpoint
/// was trained without them.
fn with_coefficients(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    if p.coeff.is_none() {
        let shape = p.shape();
        p.coeff = Some(CoeffParams {
            beta_u: Array1::zeros(shape.num_users),
            beta_i: Array1::zeros(shape.num_items),
            a_s: 0.0,
            a_b: 0.0,
        });
    }
    p
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub setting: String,
    pub lambda_b: f64,
    pub coeff: String,
    pub valid_recall20: f64,
    pub valid_ndcg20: f64,
    pub selected: bool,
}

struct Candidate {
    row: SweepRow,
    params: ModelParams,
    bands: BandSet,
    train: TrainConfig,
    cal: Calibration,
}

/// Validation grid over the calibration weight plus the conservative
/// control. Selection reads validation only; test runs once afterwards.
pub fn cmd_sweep(cfg: &Config, checkpoint: Option<&Path>) -> Result<()> {
    let prepared = prepare(cfg)?;
    let p = &prepared.pipeline;
    let base_train = cfg.train_config();
    let dir = cfg.artifact_dir.join("sweep");
    write_resolved(cfg, &dir)?;
    let valid = eval_options(cfg, Split::Valid);

    let mut settings: Vec<(String, f64, CoeffVariant)> = cfg
        .lambda_b_grid
        .iter()
        .map(|&l| (format!("lambda_b={l}"), l, CoeffVariant::Fixed))
        .collect();
    settings.push(("conservative".into(), base_train.lambda_b, CoeffVariant::Conservative));

    let shared = if cfg.sweep_retrain {
        None
    } else {
        Some(load_checkpoint(cfg, checkpoint)?.1)
    };
    let mut candidates = Vec::new();
    for (name, lambda_b, coeff) in settings {
        let train = TrainConfig {
            lambda_b,
            coeff,
            ..base_train.clone()
        };
        let (params, bands) = match &shared {
            Some(ck) => (ck.params.clone(), ck.bands.clone()),
            None => {
                let c = Config {
                    train: TrainConfig {
                        lambda_b,
                        coeff,
                        ..cfg.train.clone()
                    },
                    ..cfg.clone()
                };
                let m = train_into(&c, p, &dir.join(&name))?;
                (m.params, m.bands)
            }
        };
        let params = if coeff == CoeffVariant::Conservative {
            with_coefficients(&params)
        } else {
            params
        };
        let cal = train.calibration();
        let report = evaluate_checkpoint(p, &train, &params, &bands, &cal, &valid)?;
        info!("{name}: valid R@20 {:.4}", report.recall20());
        candidates.push(Candidate {
            row: SweepRow {
                setting: name,
                lambda_b,
                coeff: coeff.name().into(),
                valid_recall20: report.recall20(),
                valid_ndcg20: report.ndcg20(),
                selected: false,
            },
            params,
            bands,
            train,
            cal,
        });
    }

    let best = candidates
        .iter()
        .enumerate()
        .fold(0, |best, (k, c)| if c.row.valid_recall20 > candidates[best].row.valid_recall20 { k } else { best });
    candidates[best].row.selected = true;
    info!("selected {} on validation; evaluating test once", candidates[best].row.setting);
    let chosen = &candidates[best];
    let test = evaluate_checkpoint(
        p,
        &chosen.train,
        &chosen.params,
        &chosen.bands,
        &chosen.cal,
        &eval_options(cfg, Split::Test),
    )?;

    let path = dir.join("sweep.tsv");
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    for c in &candidates {
        w.serialize(&c.row)?;
    }
    w.flush()?;
    write_report(&test, &dir.join("test.txt"))?;
    for c in &candidates {
        println!(
            "{}\t{:.4}\t{:.4}{}",
            c.row.setting,
            c.row.valid_recall20,
            c.row.valid_ndcg20,
            if c.row.selected { "\t*" } else { "" }
        );
    }
    println!("test R@20 {:.4} N@20 {:.4}", test.recall20(), test.ndcg20());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    best_epoch: usize,
    valid_recall20: f64,
    test_recall10: f64,
    test_recall20: f64,
    test_ndcg10: f64,
    test_ndcg20: f64,
}

pub fn cmd_ablate(cfg: &Config) -> Result<()> {
    let dir = cfg.artifact_dir.join("ablate");
    write_resolved(cfg, &dir)?;
    let path = dir.join("ablation.tsv");
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    for variant in &cfg.variants {
        let vcfg = cfg.with_variant(variant)?;
        info!("variant {variant}");
        let prepared = prepare(&vcfg)?;
        let model = train_into(&vcfg, &prepared.pipeline, &dir.join(variant))?;
        let train = vcfg.train_config();
        let test = evaluate_checkpoint(
            &prepared.pipeline,
            &train,
            &model.params,
            &model.bands,
            &train.calibration(),
            &eval_options(&vcfg, Split::Test),
        )?;
        let row = AblationRow {
            variant: variant.clone(),
            best_epoch: model.history.best_epoch.unwrap_or(0),
            valid_recall20: model.history.best_valid_recall20,
            test_recall10: test.recall.get(&10).copied().unwrap_or(0.0),
            test_recall20: test.recall20(),
            test_ndcg10: test.ndcg.get(&10).copied().unwrap_or(0.0),
            test_ndcg20: test.ndcg20(),
        };
        println!(
            "{variant}\tvalid R@20 {:.4}\ttest R@20 {:.4} N@20 {:.4}",
            row.valid_recall20, row.test_recall20, row.test_ndcg20
        );
        w.serialize(&row)?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    bands: &'a [bridge_core::metrics::BandDiagnostic],
    report: &'a MetricsReport,
}

pub fn cmd_diagnose(cfg: &Config, checkpoint: Option<&Path>) -> Result<()> {
    let (_, ck) = load_checkpoint(cfg, checkpoint)?;
    let prepared = prepare(cfg)?;
    let p = &prepared.pipeline;
    let train = cfg.train_config();
    let inputs = p.inputs();
    let (z, fused) = forward(&ck.params, &ck.bands, &inputs, &train);
    let cal = train.calibration();
    let bands = band_diagnostics(&p.ds, &z, &ck.bands, &ck.params, &fused)?;
    let rows = (0..p.ds.num_users)
        .map(|u| calibrated_row(&fused, inputs.residual, &ck.params, &p.ds.train_history[u], u, &cal))
        .collect::<bridge_core::Result<Vec<_>>>()?;
    let mut report = evaluate_checkpoint(p, &train, &ck.params, &ck.bands, &cal, &eval_options(cfg, Split::Test))?;
    report.diagnostics = representation_diagnostics(&z, &ck.bands, &rows, train.coeff == CoeffVariant::Conservative);

    let dir = cfg.artifact_dir.join("diagnose");
    write_resolved(cfg, &dir)?;
    let mut text = String::from("band\tcross_view_cosine\tband_only_recall20\n");
    for b in &bands {
        text.push_str(&format!("{}\t{}\t{}\n", b.band, b.cross_view_cosine, b.band_only_recall20));
    }
    write(&dir.join("bands.tsv"), &text)?;
    write_report(&report, &dir.join("report.txt"))?;
    write(
        &dir.join("diagnostics.json"),
        serde_json::to_string_pretty(&Diagnostics {
            bands: &bands,
            report: &report,
        })?,
    )?;
    print!("{text}{report}");
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SynthArgs {
    pub out: PathBuf,
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub noise: f64,
    pub seed: u64,
    pub identical_modalities: bool,
}

/// Writes a planted dataset and a starter config that points at it.
pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut planted = PlantedConfig::new(args.users, args.items, args.clusters, args.noise, args.seed);
    planted.identical_modalities = args.identical_modalities;
    let ds = make_planted(&planted)?;
    let files = write_planted(&ds, &args.out)?;
    let config = format!(
        "interactions={}\nvisual_features={}\ntext_features={}\nartifact_dir=artifacts\n",
        files.interactions.file_name().unwrap_or_default().to_string_lossy(),
        files.visual.file_name().unwrap_or_default().to_string_lossy(),
        files.text.file_name().unwrap_or_default().to_string_lossy(),
    );
    write(&args.out.join("config.txt"), config)?;
    println!(
        "wrote {} users, {} items, {} interactions to {}",
        ds.num_users,
        ds.num_items,
        ds.interactions.len(),
        args.out.display()
    );
    Ok(())
}
