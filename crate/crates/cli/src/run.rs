use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use salientsleep::dataset::{load_records, CacheSummary, Dataset};
use salientsleep::ingest::EPOCH_SAMPLES;
use salientsleep::metrics::MetricsReport;
use salientsleep::model::{load_checkpoint, save_checkpoint, Model, ModelConfig, Variant};
use salientsleep::optim::AdamConfig;
use salientsleep::training::{evaluate, fold_windows, subject_kfold, train as fit, Fold, FoldWindows, TrainConfig, ZScore};
use salientsleep::{Error, Real, Result};
use serde::{Deserialize, Serialize};

use crate::{io_err, read_json, write_json, Scale};

pub const MANIFEST: &str = "manifest.json";
pub const HISTORY: &str = "history.jsonl";
pub const CHECKPOINT: &str = "best.ssnc";
pub const METRICS: &str = "metrics.json";
pub const EVAL: &str = "eval.json";

#[derive(clap::Args)]
pub struct TrainArgs {
    #[arg(long, env = "SSN_CACHE_DIR")]
    cache_dir: PathBuf,
    /// Fold to train, in 0..k.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Number of cross-validation folds.
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Seeds the fold split, initialization and batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory for the manifest, history, checkpoint and metrics.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, value_enum, default_value = "full")]
    scale: Scale,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Train and evaluate in 64-bit floats.
    #[arg(long)]
    f64: bool,
    /// Standardize each channel with statistics of the training subjects.
    #[arg(long)]
    zscore: bool,
}

#[derive(clap::Args)]
pub struct EvalArgs {
    /// Run directory written by `train`; eval.json is written here.
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the cache recorded in the run manifest.
    #[arg(long, env = "SSN_CACHE_DIR")]
    cache_dir: Option<PathBuf>,
    /// Defaults to best.ssnc in the run directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// When given, these must match the run manifest.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Everything needed to rebuild a run, written before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scale: Scale,
    pub precision: Precision,
    pub seed: u64,
    pub dataset: Dataset,
    pub cache_dir: PathBuf,
    pub k: usize,
    pub fold: Fold,
    pub validation_is_training: bool,
    pub zscore: Option<ZScore>,
    pub build: String,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub fold: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

pub fn build_id() -> String {
    format!("{} {}", env!("CARGO_PKG_VERSION"), env!("SSN_GIT_REV"))
}

fn split(cache: &Path, k: usize, fold: usize, seed: u64, seq_len: usize, zscore: bool) -> Result<(CacheSummary, FoldWindows, Fold)> {
    if fold >= k {
        return Err(Error::Argument(format!("fold {fold} is out of range for k = {k}")));
    }
    let summary = CacheSummary::load(cache)?;
    let subjects = summary.subjects();
    let f = subject_kfold(&subjects, k, seed)?.swap_remove(fold);
    let wanted: Vec<String> = f.train.iter().chain(&f.val).chain(&f.test).cloned().collect();
    let records = load_records(cache, &summary, &wanted)?;
    let windows = fold_windows(&records, &f, seq_len, zscore)?;
    Ok((summary, windows, f))
}

fn check_epoch_len(model: &ModelConfig) -> Result<()> {
    if model.epoch_len != EPOCH_SAMPLES {
        return Err(Error::Config(format!(
            "this model expects {}-sample epochs but caches hold {EPOCH_SAMPLES}",
            model.epoch_len
        )));
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let model_cfg = a.scale.config(a.variant);
    check_epoch_len(&model_cfg)?;
    let model = Model::new(model_cfg.clone())?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        adam: AdamConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamConfig::default()
        },
        patience: a.patience,
        seed: a.seed,
        folds: a.k,
        zscore: a.zscore,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let (summary, windows, fold) = split(&a.cache_dir, a.k, a.fold, a.seed, model_cfg.seq_len, a.zscore)?;

    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let manifest = RunManifest {
        model: model_cfg,
        train: cfg.clone(),
        scale: a.scale,
        precision: if a.f64 { Precision::F64 } else { Precision::F32 },
        seed: a.seed,
        dataset: summary.dataset,
        cache_dir: a.cache_dir.clone(),
        k: a.k,
        fold: fold.clone(),
        validation_is_training: windows.val_is_train,
        zscore: windows.zscore,
        build: build_id(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    write_json(&a.out.join(MANIFEST), &manifest)?;
    println!(
        "fold {}/{}: {} train, {} validation, {} test windows; {} parameters",
        a.fold,
        a.k,
        windows.train.len(),
        windows.val.len(),
        windows.test.len(),
        model.count_parameters().total
    );
    if windows.val_is_train {
        println!("no validation subject in this fold; model selection uses the training windows");
    }
    let metrics = if a.f64 {
        fit_and_score::<f64>(&model, &windows, &cfg, &a.out)?
    } else {
        fit_and_score::<f32>(&model, &windows, &cfg, &a.out)?
    };
    let metrics = RunMetrics { fold: a.fold, ..metrics };
    write_json(&a.out.join(METRICS), &metrics)?;
    println!(
        "best epoch {} of {}: val accuracy {:.4} macro F1 {:.4}; test accuracy {:.4} macro F1 {:.4}",
        metrics.best_epoch, metrics.epochs_run, metrics.val.accuracy, metrics.val.macro_f1, metrics.test.accuracy, metrics.test.macro_f1
    );
    Ok(())
}

/// Trains, checkpoints, then scores the checkpoint as stored so that
/// `eval` reproduces these numbers exactly.
fn fit_and_score<T: Real>(model: &Model, w: &FoldWindows, cfg: &TrainConfig, out: &Path) -> Result<RunMetrics> {
    let path = out.join(HISTORY);
    let mut history = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    let outcome = fit(model, model.init_params::<T>(cfg.seed), &w.train, &w.val, cfg, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  val accuracy {:.4}  macro F1 {:.4}",
            r.epoch, r.train_loss, r.val_acc, r.val_macro_f1
        );
        let line = serde_json::to_string(r)?;
        writeln!(history, "{line}").and_then(|_| history.flush()).map_err(io_err(&path))
    })?;
    drop(history);
    let ckpt = out.join(CHECKPOINT);
    save_checkpoint(&ckpt, &outcome.best)?;
    let mut stored = load_checkpoint(&ckpt, model)?.cast::<T>();
    Ok(RunMetrics {
        fold: 0,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        val: evaluate(model, &mut stored, &w.val, cfg.batch)?,
        test: evaluate(model, &mut stored, &w.test, cfg.batch)?,
    })
}

fn mismatch<V: PartialEq + std::fmt::Debug>(what: &str, flag: Option<V>, recorded: V) -> Result<()> {
    match flag {
        Some(v) if v != recorded => Err(Error::Config(format!(
            "--{what} {v:?} does not match the run manifest ({recorded:?})"
        ))),
        _ => Ok(()),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let m: RunManifest = read_json(&a.out.join(MANIFEST))?;
    mismatch("fold", a.fold, m.fold.index)?;
    mismatch("k", a.k, m.k)?;
    mismatch("seed", a.seed, m.seed)?;
    mismatch("variant", a.variant, m.model.variant)?;
    let cache = a.cache_dir.unwrap_or_else(|| m.cache_dir.clone());
    let model = Model::new(m.model.clone())?;
    let ckpt = a.checkpoint.unwrap_or_else(|| a.out.join(CHECKPOINT));
    let params = load_checkpoint(&ckpt, &model)?;
    let (_, windows, fold) = split(&cache, m.k, m.fold.index, m.seed, m.model.seq_len, m.train.zscore)?;
    if fold != m.fold {
        return Err(Error::Validation(format!(
            "the cache in {} no longer yields the recorded subjects of fold {}",
            cache.display(),
            m.fold.index
        )));
    }
    let batch = m.train.batch;
    let (val, test) = match m.precision {
        Precision::F32 => {
            let mut p = params;
            (evaluate(&model, &mut p, &windows.val, batch)?, evaluate(&model, &mut p, &windows.test, batch)?)
        }
        Precision::F64 => {
            let mut p = params.cast::<f64>();
            (evaluate(&model, &mut p, &windows.val, batch)?, evaluate(&model, &mut p, &windows.test, batch)?)
        }
    };
    println!("validation\n{}\n\ntest\n{}", val.table(), test.table());
    write_json(&a.out.join(EVAL), &EvalMetrics { fold: m.fold.index, val, test })
}
