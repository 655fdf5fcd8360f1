//! The data -> graph -> fit -> evaluate pipeline and its run artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use gode_cf::train::StopReason;
use gode_cf::{
    build_adjacency_with, evaluate_with, fit, init_embeddings, k_core_filter, leave_one_out_split,
    read_interactions, write_training_log, AdjacencyOptions, EmbeddingMatrix, EpochRecord, EvalMode,
    EvalOptions, LightGcnState, MetricsReport, ModelState, SparseAdjacency, SplitDataset, TrainableModel,
};
use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::config::{CheckpointFormat, DataFormat, ExperimentConfig, ModelKind};
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const META_FILE: &str = "meta.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_ndcg20: f64,
    pub stop_reason: StopReason,
    pub validation: Option<MetricsReport>,
    pub test: MetricsReport,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

impl RunSummary {
    pub fn test_at20(&self) -> (f64, f64) {
        self.test.at(20).unwrap_or((0.0, 0.0))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(path, e)
}

/// Loads the dataset named by `cfg`, filtering and splitting raw logs.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SplitDataset, CliError> {
    if !cfg.data.exists() {
        return Err(CliError::MissingDataset(cfg.data.clone()));
    }
    match cfg.data_format {
        DataFormat::Split => Ok(SplitDataset::read_dir(&cfg.data)?),
        DataFormat::Raw => {
            let (log, stats) = read_interactions(&cfg.data, &cfg.fields)?;
            info!(
                "parsed {} interactions ({} duplicates, {} malformed lines)",
                stats.parsed, stats.duplicates, stats.malformed
            );
            let core = k_core_filter(&log, cfg.core_k, cfg.core_mode)?;
            info!(
                "{}-core: {} users, {} items, {} interactions",
                cfg.core_k,
                core.user_count(),
                core.item_count(),
                core.len()
            );
            Ok(leave_one_out_split(&core)?)
        }
    }
}

/// Filters and splits the raw log and writes the split to `out`.
pub fn prepare_data(cfg: &ExperimentConfig, out: &Path) -> Result<SplitDataset, CliError> {
    let ds = load_dataset(cfg)?;
    ds.write_dir(out)?;
    Ok(ds)
}

pub fn build_graph(cfg: &ExperimentConfig, ds: &SplitDataset) -> Result<SparseAdjacency, CliError> {
    build_adjacency_with(ds, AdjacencyOptions { allow_isolated: cfg.allow_isolated }).map_err(|e| match e {
        gode_cf::Error::IsolatedNode { .. } => {
            CliError::Runtime(format!("{e}; set allow_isolated = true to keep it as an empty row"))
        }
        e => e.into(),
    })
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    format!("{:x}", Sha256::digest(cfg.to_text().as_bytes()))
}

/// Runs `body` on a pool sized by `threads` (1 when deterministic).
pub fn with_thread_pool<T: Send>(
    cfg: &ExperimentConfig,
    body: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    let threads = if cfg.deterministic { 1 } else { cfg.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    pool.install(body)
}

/// Trained parameters, independent of the model family.
struct Trained {
    e0: EmbeddingMatrix,
    extra: Vec<f64>,
    best_epoch: usize,
    best_ndcg20: f64,
    stop_reason: StopReason,
    history: Vec<EpochRecord>,
    validation: Option<MetricsReport>,
    test: MetricsReport,
}

fn train_generic<M: TrainableModel>(
    cfg: &ExperimentConfig,
    ds: &SplitDataset,
    model: M,
) -> Result<Trained, CliError> {
    let opts = EvalOptions {
        exclude_validation_in_test: cfg.exclude_validation_in_test,
    };
    let outcome = fit(ds, model, &cfg.train, |fe| {
        evaluate_with(fe, ds, EvalMode::Validation, &cfg.eval_n, opts)
    })?;
    if outcome.stop_reason == StopReason::Diverged {
        warn!("training diverged; reporting the last good checkpoint");
    }
    let fe = outcome.best.forward()?;
    let validation = if outcome.best_epoch > 0 {
        Some(evaluate_with(&fe, ds, EvalMode::Validation, &cfg.eval_n, opts)?)
    } else {
        None
    };
    let test = evaluate_with(&fe, ds, EvalMode::Test, &cfg.eval_n, opts)?;
    Ok(Trained {
        e0: outcome.best.e0().clone(),
        extra: outcome.best.extra_params().to_vec(),
        best_epoch: outcome.best_epoch,
        best_ndcg20: outcome.best_ndcg20,
        stop_reason: outcome.stop_reason,
        history: outcome.history,
        validation,
        test,
    })
}

fn checkpoint_name(format: CheckpointFormat) -> &'static str {
    match format {
        CheckpointFormat::Text => "e0.txt",
        CheckpointFormat::Binary => "e0.bin",
    }
}

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    body(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

/// Runs the full pipeline and writes every artifact into `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, CliError> {
    run_labeled(cfg, None)
}

/// As [`run_experiment`]; `label` is the `(parameter, value)` recorded in
/// the summary for sweep tables.
pub fn run_labeled(cfg: &ExperimentConfig, label: Option<(&str, &str)>) -> Result<RunSummary, CliError> {
    cfg.validate()?;
    if !cfg.data.exists() {
        return Err(CliError::MissingDataset(cfg.data.clone()));
    }
    let started = Instant::now();
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text()).map_err(io_err(&out.join(CONFIG_FILE)))?;

    let trained = with_thread_pool(cfg, || {
        let ds = load_dataset(cfg)?;
        let adjacency = Arc::new(build_graph(cfg, &ds)?);
        info!(
            "graph: {} users, {} items, {} train edges",
            ds.n_users(),
            ds.n_items(),
            ds.train_len()
        );
        let e0 = init_embeddings(ds.n_users() + ds.n_items(), cfg.dims, cfg.init_std, cfg.train.seed)?;
        match cfg.model {
            ModelKind::GodeCf => train_generic(cfg, &ds, ModelState::new(e0, adjacency, cfg.solver.clone())?),
            ModelKind::LightGcn => train_generic(cfg, &ds, LightGcnState::new(e0, adjacency, cfg.lightgcn_layers)?),
        }
    })?;
    let seconds = started.elapsed().as_secs_f64();

    let mut manifest = vec![CONFIG_FILE.to_string()];
    let log_path = out.join(TRAIN_LOG_FILE);
    let log_file = File::create(&log_path).map_err(io_err(&log_path))?;
    write_training_log(BufWriter::new(log_file), &trained.history, !cfg.deterministic)?;
    manifest.push(TRAIN_LOG_FILE.into());

    write_file(&out.join(TIMING_FILE), |w| {
        writeln!(w, "epoch,seconds")?;
        for r in &trained.history {
            writeln!(w, "{},{}", r.epoch, r.seconds)?;
        }
        writeln!(w, "total,{seconds}")
    })?;
    manifest.push(TIMING_FILE.into());

    let metrics_path = out.join(METRICS_FILE);
    let mut buf = Vec::new();
    MetricsReport::write_csv_header(&mut buf)?;
    if let Some(v) = &trained.validation {
        v.write_csv_rows(&mut buf)?;
    }
    trained.test.write_csv_rows(&mut buf)?;
    fs::write(&metrics_path, buf).map_err(io_err(&metrics_path))?;
    manifest.push(METRICS_FILE.into());

    let ckpt = checkpoint_name(cfg.checkpoint_format);
    trained.e0.save(&out.join(ckpt))?;
    manifest.push(ckpt.into());

    let weights: Vec<String> = trained.extra.iter().map(f64::to_string).collect();
    write_file(&out.join(META_FILE), |w| {
        writeln!(w, "model={}", cfg.model)?;
        writeln!(w, "best_epoch={}", trained.best_epoch)?;
        writeln!(w, "best_val_ndcg20={}", trained.best_ndcg20)?;
        writeln!(w, "checkpoint={ckpt}")?;
        writeln!(w, "extra_params={}", weights.join(","))?;
        writeln!(w, "config_sha256={}", config_hash(cfg))
    })?;
    manifest.push(META_FILE.into());

    let (recall20, ndcg20) = trained.test.at(20).unwrap_or((0.0, 0.0));
    let (param, value) = label.unwrap_or(("none", "none"));
    write_file(&out.join(SUMMARY_FILE), |w| {
        writeln!(w, "param={param}")?;
        writeln!(w, "value={value}")?;
        writeln!(w, "recall20={recall20}")?;
        writeln!(w, "ndcg20={ndcg20}")?;
        writeln!(w, "best_epoch={}", trained.best_epoch)?;
        writeln!(w, "epochs_run={}", trained.history.len())?;
        writeln!(w, "stop_reason={:?}", trained.stop_reason)?;
        writeln!(w, "seconds={seconds}")
    })?;
    manifest.push(SUMMARY_FILE.into());

    manifest.push(MANIFEST_FILE.into());
    fs::write(out.join(MANIFEST_FILE), manifest.join("\n") + "\n").map_err(io_err(&out.join(MANIFEST_FILE)))?;
    verify_manifest(&out)?;

    info!(
        "test recall@20={recall20:.6} ndcg@20={ndcg20:.6} best epoch {} ({seconds:.1}s)",
        trained.best_epoch
    );
    Ok(RunSummary {
        output_dir: out,
        best_epoch: trained.best_epoch,
        epochs_run: trained.history.len(),
        best_val_ndcg20: trained.best_ndcg20,
        stop_reason: trained.stop_reason,
        validation: trained.validation,
        test: trained.test,
        history: trained.history,
        seconds,
    })
}

/// Checks that every file listed in the run manifest exists and is not
/// empty.
pub fn verify_manifest(run_dir: &Path) -> Result<(), CliError> {
    let path = run_dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    for name in text.lines().filter(|l| !l.is_empty()) {
        let f = run_dir.join(name);
        match fs::metadata(&f) {
            Ok(m) if m.len() > 0 => {}
            _ => return Err(CliError::Runtime(format!("artifact {} missing or empty", f.display()))),
        }
    }
    Ok(())
}

/// Parses a `key=value` file into pairs.
pub fn read_key_values(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Reloads a finished run's best checkpoint and evaluates it.
pub fn evaluate_run(run_dir: &Path, mode: EvalMode) -> Result<MetricsReport, CliError> {
    let cfg = ExperimentConfig::from_file(&run_dir.join(CONFIG_FILE))?;
    let meta = read_key_values(&run_dir.join(META_FILE))?;
    let get = |k: &str| meta.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    let ckpt = get("checkpoint").ok_or_else(|| CliError::Runtime(format!("{}: no checkpoint entry", run_dir.display())))?;
    let expected = get("config_sha256").unwrap_or_default();
    if expected != config_hash(&cfg) {
        warn!("config.txt in {} does not match the hash recorded at training time", run_dir.display());
    }
    let extra: Vec<f64> = get("extra_params")
        .unwrap_or_default()
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| CliError::Runtime(format!("bad extra_params value `{s}`"))))
        .collect::<Result<_, _>>()?;
    let e0 = EmbeddingMatrix::load(&run_dir.join(ckpt))?;
    let opts = EvalOptions {
        exclude_validation_in_test: cfg.exclude_validation_in_test,
    };
    with_thread_pool(&cfg, || {
        let ds = load_dataset(&cfg)?;
        let adjacency = Arc::new(build_graph(&cfg, &ds)?);
        let fe = match cfg.model {
            ModelKind::GodeCf => {
                let mut m = ModelState::new(e0, adjacency, cfg.solver.clone())?;
                if m.hop_weights.len() != extra.len() {
                    return Err(CliError::Runtime(format!(
                        "checkpoint has {} hop weights, config expects {}",
                        extra.len(),
                        m.hop_weights.len()
                    )));
                }
                m.hop_weights = extra;
                m.forward()?
            }
            ModelKind::LightGcn => LightGcnState::new(e0, adjacency, cfg.lightgcn_layers)?.forward()?,
        };
        Ok(evaluate_with(&fe, &ds, mode, &cfg.eval_n, opts)?)
    })
}
