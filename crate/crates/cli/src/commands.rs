//! The five commands. Training commands write under the run directory
//! `<out_dir>/<run id>`; `eval` and `gdv` write next to the checkpoint.
//! Reruns overwrite.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hcl_core::data::{self, ChannelStats, Dataset, DatasetKind};
use hcl_core::gdv::{self, GdvOptions, GdvReport};
use hcl_core::hcl::HclModel;
use hcl_core::trainer::{
    self, grid_search, load_checkpoint, save_checkpoint, EpochRecord, EvalReport, FitReport, GridReport, GridSpec,
    Run,
};
use hcl_core::{RngStream, StreamId};
use serde::{Deserialize, Serialize};

use crate::cli::{Common, EvalSplit, GdvSplit};
use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, CliResult, Classify};

pub const CHECKPOINT_FILE: &str = "checkpoint.hclc";
pub const MODEL_FILE: &str = "model.hclc";

/// Train (after the validation split), validation and test sets.
pub struct Prepared {
    pub kind: DatasetKind,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let kind = cfg.dataset()?;
    let seed = cfg.train.seed;
    let (mut train, mut test) = kind.load(&cfg.data_dir).data()?;
    if let Some(n) = cfg.train_limit {
        train = train.limit(n, seed).data()?;
    }
    if let Some(n) = cfg.test_limit {
        test = test.limit(n, seed).data()?;
    }
    // Epoch shuffles use indices 1.., so index 0 of the shuffle stream is free.
    let mut split_rng = RngStream::derived(seed, StreamId::Shuffle, 0);
    let (mut train, mut val) = data::split_validation(&train, cfg.train.val_fraction, &mut split_rng).data()?;
    if cfg.standardize {
        let stats = ChannelStats::compute(&train).data()?;
        for ds in [&mut train, &mut val, &mut test] {
            stats.apply(ds).data()?;
        }
    }
    Ok(Prepared { kind, train, val, test })
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn check_input(model: &HclModel<f32>, ds: &Dataset) -> CliResult<()> {
    if model.spec().input_shape() != ds.image_shape() {
        return Err(CliError::Config(format!(
            "model expects input {:?} but the dataset has {:?}",
            model.spec().input_shape(),
            ds.image_shape()
        )));
    }
    Ok(())
}

/// Key facts of one training run, written as `summary.txt` (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_id: String,
    pub dataset: String,
    pub model: String,
    pub seed: u64,
    pub heads: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub vanilla_equivalent: bool,
    pub lr: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stop_reason: String,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub test_head_accuracies: Vec<f64>,
}

pub struct TrainOutcome {
    pub model: HclModel<f32>,
    pub report: FitReport,
    pub test: EvalReport,
    pub summary: TrainSummary,
    pub dir: PathBuf,
}

struct MetricsFile {
    path: PathBuf,
}

impl MetricsFile {
    /// Rewrites the file from `rows` (empty on a fresh run).
    fn reset(path: PathBuf, heads: usize, rows: &[EpochRecord]) -> CliResult<Self> {
        let mut text = EpochRecord::csv_header(heads);
        text.push('\n');
        for r in rows {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        write_file(&path, &text)?;
        Ok(Self { path })
    }

    /// Appends and flushes one row.
    fn append(&self, rec: &EpochRecord) -> CliResult<()> {
        let mut f = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| io_err(&self.path, e))?;
        writeln!(f, "{}", rec.csv_row())
            .and_then(|_| f.sync_data())
            .map_err(|e| io_err(&self.path, e))
    }
}

fn log_epoch(tag: &str, rec: &EpochRecord) {
    println!(
        "{tag}epoch {:>4}  train_loss {:.5}  val_loss {:.5}  val_acc {:.4}",
        rec.epoch, rec.train_loss, rec.val_loss, rec.val_accuracy
    );
}

/// Trains `cfg` with the given head placement into `dir`. With `resume`, an
/// existing checkpoint of the same config is continued.
fn train_into(
    cfg: &ExperimentConfig,
    data: &Prepared,
    heads: Option<&[usize]>,
    dir: &Path,
    resume: bool,
    tag: &str,
) -> CliResult<TrainOutcome> {
    create_dir(dir)?;
    let config_text = cfg.to_toml();
    write_file(&dir.join("config.toml"), &config_text)?;
    let tcfg = cfg.resolved_train()?;
    let model = cfg.build_model(heads)?;
    check_input(&model, &data.train)?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let mut run = match resume && ckpt_path.exists() {
        true => {
            let ck = load_checkpoint::<f32>(&ckpt_path).config()?;
            if ck.config_text != config_text {
                return Err(CliError::Config(format!(
                    "{} was written by a different config",
                    ckpt_path.display()
                )));
            }
            println!("{tag}resuming after epoch {}", ck.run.progress.epochs_done);
            ck.run
        }
        false => Run::new(model, &tcfg),
    };
    let heads_n = run.state.model.heads().len();
    let metrics = MetricsFile::reset(dir.join("metrics.csv"), heads_n, &run.progress.history)?;

    let start = Instant::now();
    run.advance(&data.train, &data.val, &tcfg, None, |rec, view| {
        save_checkpoint(&ckpt_path, &config_text, view)?;
        metrics.append(rec).map_err(|e| hcl_core::Error::Argument(e.to_string()))?;
        log_epoch(tag, rec);
        Ok(())
    })
    .map_err(|e| match e {
        hcl_core::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
        e => CliError::Other(e.to_string()),
    })?;
    let report = run.report(start.elapsed()).expect("run finished");
    save_checkpoint(&dir.join(MODEL_FILE), &config_text, run.view()).other()?;

    let model = run.state.model;
    let test = trainer::evaluate(&model, &data.test, tcfg.eval_batch_size).other()?;
    let summary = TrainSummary {
        run_id: cfg.run_id(),
        dataset: data.kind.name().to_string(),
        model: cfg.train.model.clone(),
        seed: cfg.train.seed,
        heads: model.heads().iter().map(|h| h.layer_index).collect(),
        lambdas: model.lambdas().to_vec(),
        vanilla_equivalent: model.is_vanilla_equivalent(),
        lr: tcfg.lr,
        epochs: report.rows.len(),
        best_epoch: report.best_epoch,
        stop_reason: report.stop_reason.as_str().to_string(),
        best_val_loss: report.best_val_loss,
        best_val_accuracy: report.rows[report.best_epoch - 1].val_accuracy,
        test_accuracy: test.accuracy,
        test_loss: test.loss,
        test_head_accuracies: test.per_head_accuracy.clone(),
    };
    write_file(&dir.join("summary.txt"), &toml::to_string(&summary).expect("summary serializes"))?;
    println!(
        "{tag}done: {} epochs ({}), best epoch {}, test accuracy {:.4}",
        summary.epochs, summary.stop_reason, summary.best_epoch, summary.test_accuracy
    );
    Ok(TrainOutcome {
        model,
        report,
        test,
        summary,
        dir: dir.to_path_buf(),
    })
}

pub fn train(cfg: &ExperimentConfig, resume: bool) -> CliResult<TrainOutcome> {
    let data = prepare_data(cfg)?;
    train_into(cfg, &data, None, &cfg.run_dir(), resume, "")
}

fn split_data(data: &Prepared, split: EvalSplit) -> &Dataset {
    match split {
        EvalSplit::Train => &data.train,
        EvalSplit::Val => &data.val,
        EvalSplit::Test => &data.test,
    }
}

/// Analysis results land next to the checkpoint they were computed from.
fn output_dir(checkpoint: &Path) -> PathBuf {
    match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_model(common: &Common, checkpoint: &Path) -> CliResult<(ExperimentConfig, HclModel<f32>)> {
    let ck = load_checkpoint::<f32>(checkpoint).config()?;
    let cfg = common.load_embedded(&ck.config_text)?;
    Ok((cfg, ck.run.state.model))
}

pub fn eval(common: &Common, checkpoint: &Path, split: EvalSplit) -> CliResult<EvalReport> {
    let (cfg, model) = load_model(common, checkpoint)?;
    let data = prepare_data(&cfg)?;
    let ds = split_data(&data, split);
    check_input(&model, ds)?;
    let report = trainer::evaluate(&model, ds, cfg.train.eval_batch_size).other()?;
    let dir = output_dir(checkpoint);
    let name = format!("eval-{}.txt", ds.split().as_str());
    write_file(&dir.join(name), &toml::to_string(&report).expect("report serializes"))?;
    println!(
        "{} split: n {}  accuracy {:.4}  loss {:.5}",
        ds.split().as_str(),
        report.n,
        report.accuracy,
        report.loss
    );
    Ok(report)
}

fn gdv_options(cfg: &ExperimentConfig, raw: bool) -> GdvOptions {
    GdvOptions {
        normalize: cfg.gdv.normalize && !raw,
        max_per_class: cfg.gdv.max_per_class,
        seed: cfg.train.seed,
        batch_size: cfg.gdv.batch_size,
    }
}

fn profile(model: &HclModel<f32>, ds: &Dataset, opts: &GdvOptions) -> CliResult<GdvReport> {
    check_input(model, ds)?;
    gdv::gdv_profile(&model.backbone, ds.images(), ds.labels(), ds.num_classes(), opts).other()
}

/// Writes `<run dir>/<split>/gdv.csv` (or `gdv-raw.csv`) per requested split.
pub fn gdv(common: &Common, checkpoint: &Path, split: GdvSplit, raw: bool) -> CliResult<Vec<PathBuf>> {
    let (cfg, model) = load_model(common, checkpoint)?;
    let data = prepare_data(&cfg)?;
    let splits: &[&Dataset] = match split {
        GdvSplit::Train => &[&data.train],
        GdvSplit::Test => &[&data.test],
        GdvSplit::Both => &[&data.train, &data.test],
    };
    let opts = gdv_options(&cfg, raw);
    let mut written = Vec::new();
    for ds in splits {
        let report = profile(&model, ds, &opts)?;
        let dir = output_dir(checkpoint).join(ds.split().as_str());
        create_dir(&dir)?;
        let path = dir.join(if raw { "gdv-raw.csv" } else { "gdv.csv" });
        write_file(&path, &report.to_csv())?;
        println!("{}: {} layers -> {}", ds.split().as_str(), report.layers.len(), path.display());
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSummary {
    pub run_id: String,
    pub seed_vanilla: u64,
    pub seed_hcl: u64,
    pub heads: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub test_accuracy_vanilla: f64,
    pub test_accuracy_hcl: f64,
    /// HCL − vanilla.
    pub accuracy_delta: f64,
    pub best_epoch_vanilla: usize,
    pub best_epoch_hcl: usize,
}

pub struct CompareOutcome {
    pub vanilla: TrainOutcome,
    pub hcl: TrainOutcome,
    pub gdv_vanilla: GdvReport,
    pub gdv_hcl: GdvReport,
    pub summary: CompareSummary,
}

pub const COMPARISON_HEADER: &str = "layer_index,layer_kind,gdv_vanilla,gdv_hcl,delta";

pub fn compare(cfg: &ExperimentConfig) -> CliResult<CompareOutcome> {
    let data = prepare_data(cfg)?;
    let dir = cfg.run_dir();
    let vanilla = train_into(cfg, &data, Some(&[]), &dir.join("vanilla"), false, "[vanilla] ")?;
    let hcl = train_into(cfg, &data, None, &dir.join("hcl"), false, "[hcl] ")?;
    let opts = gdv_options(cfg, false);
    let gdv_vanilla = profile(&vanilla.model, &data.test, &opts)?;
    let gdv_hcl = profile(&hcl.model, &data.test, &opts)?;

    let mut csv = format!("{COMPARISON_HEADER}\n");
    for (v, h) in gdv_vanilla.layers.iter().zip(&gdv_hcl.layers) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            v.layer_index,
            v.layer_kind,
            v.gdv,
            h.gdv,
            h.gdv - v.gdv
        ));
    }
    write_file(&dir.join("comparison.csv"), &csv)?;
    let summary = CompareSummary {
        run_id: cfg.run_id(),
        seed_vanilla: vanilla.summary.seed,
        seed_hcl: hcl.summary.seed,
        heads: hcl.summary.heads.clone(),
        lambdas: hcl.summary.lambdas.clone(),
        test_accuracy_vanilla: vanilla.test.accuracy,
        test_accuracy_hcl: hcl.test.accuracy,
        accuracy_delta: hcl.test.accuracy - vanilla.test.accuracy,
        best_epoch_vanilla: vanilla.report.best_epoch,
        best_epoch_hcl: hcl.report.best_epoch,
    };
    write_file(&dir.join("summary.txt"), &toml::to_string(&summary).expect("summary serializes"))?;
    println!(
        "test accuracy: vanilla {:.4}, hcl {:.4} (delta {:+.4})",
        summary.test_accuracy_vanilla, summary.test_accuracy_hcl, summary.accuracy_delta
    );
    Ok(CompareOutcome {
        vanilla,
        hcl,
        gdv_vanilla,
        gdv_hcl,
        summary,
    })
}

pub struct GridOutcome {
    pub report: GridReport,
    pub best_config: Option<ExperimentConfig>,
    pub dir: PathBuf,
}

pub fn grid(cfg: &ExperimentConfig) -> CliResult<GridOutcome> {
    let data = prepare_data(cfg)?;
    let spec = cfg.network_spec()?;
    let heads = cfg.head_layers(&spec);
    let grid = GridSpec {
        lr_values: cfg.grid.lr_values.clone(),
        lambda_sets: cfg.lambda_sets(heads.len()),
    };
    let base = cfg.resolved_train()?;
    let with = |t: &trainer::TrainConfig| {
        let mut c = cfg.clone();
        c.train.lr = t.lr;
        c.train.lambdas = t.lambdas.clone().filter(|l| !l.is_empty());
        c
    };
    let build = |t: &trainer::TrainConfig| {
        with(t).build_model(None).map_err(|e| hcl_core::Error::Argument(e.to_string()))
    };
    let report = grid_search(&grid, build, &data.train, &data.val, &base).config()?;

    let dir = cfg.run_dir();
    create_dir(&dir)?;
    write_file(&dir.join("grid.csv"), &report.to_csv())?;
    let best_config = report.best().map(|b| {
        with(&trainer::TrainConfig {
            lr: b.lr,
            lambdas: Some(b.lambdas.clone()),
            ..base.clone()
        })
    });
    match &best_config {
        Some(best) => {
            write_file(&dir.join("best_config.toml"), &best.to_toml())?;
            println!(
                "best: lr {} lambdas {:?} -> {}",
                best.train.lr,
                best.train.lambdas.clone().unwrap_or_default(),
                dir.join("best_config.toml").display()
            );
        }
        None => println!("every grid cell diverged"),
    }
    Ok(GridOutcome {
        report,
        best_config,
        dir,
    })
}

