//! Grid sweeps over one configuration key and the consolidated table.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use log::{info, warn};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::experiment::{read_key_values, run_labeled, CONFIG_FILE, SUMMARY_FILE};

pub const SWEEP_TABLE_FILE: &str = "sweep.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub recall20: f64,
    pub ndcg20: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

fn sanitize(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// One config per sweep value, each writing into its own subdirectory of
/// `cfg.output_dir`. Every value is validated before anything runs.
pub fn expand(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>, CliError> {
    let param = cfg
        .sweep_param
        .clone()
        .ok_or_else(|| CliError::config("sweep_param", "no parameter to sweep"))?;
    if cfg.sweep_values.is_empty() {
        return Err(CliError::config("sweep_values", "no values given"));
    }
    let mut runs = Vec::with_capacity(cfg.sweep_values.len());
    for (k, value) in cfg.sweep_values.iter().enumerate() {
        let mut run = cfg.clone();
        run.sweep_param = None;
        run.sweep_values.clear();
        run.parallel_runs = false;
        run.set(&param, value)?;
        run.output_dir = cfg
            .output_dir
            .join(format!("{k:02}_{}_{}", sanitize(&param), sanitize(value)));
        run.validate()?;
        runs.push((value.clone(), run));
    }
    Ok(runs)
}

/// Runs every sweep point and writes the consolidated table. Sequential
/// unless `parallel_runs` is set, in which case each point runs in its own
/// `exe train` process.
pub fn run_sweep(cfg: &ExperimentConfig, exe: Option<&Path>) -> Result<Vec<SweepRow>, CliError> {
    let runs = expand(cfg)?;
    let param = cfg.sweep_param.clone().unwrap_or_default();
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    if cfg.parallel_runs {
        let exe = exe.ok_or_else(|| CliError::config("parallel_runs", "no executable available to spawn"))?;
        let mut children: Vec<(PathBuf, Child)> = Vec::new();
        for (value, run) in &runs {
            fs::create_dir_all(&run.output_dir).map_err(|e| CliError::io(&run.output_dir, e))?;
            let cfg_path = run.output_dir.join(CONFIG_FILE);
            fs::write(&cfg_path, run.to_text()).map_err(|e| CliError::io(&cfg_path, e))?;
            let child = Command::new(exe)
                .arg("train")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--label")
                .arg(format!("{param}={value}"))
                .spawn()
                .map_err(|e| CliError::io(exe, e))?;
            children.push((run.output_dir.clone(), child));
        }
        let mut failed = Vec::new();
        for (dir, mut child) in children {
            let status = child.wait().map_err(|e| CliError::io(&dir, e))?;
            if !status.success() {
                failed.push(dir.display().to_string());
            }
        }
        if !failed.is_empty() {
            return Err(CliError::Runtime(format!("sweep runs failed: {}", failed.join(", "))));
        }
    } else {
        for (value, run) in &runs {
            info!("sweep {param}={value}");
            run_labeled(run, Some((&param, value)))?;
        }
    }
    emit_sweep_table(&cfg.output_dir)
}

fn parse_summary(dir: &Path) -> Result<SweepRow, String> {
    let kv = read_key_values(&dir.join(SUMMARY_FILE)).map_err(|e| e.to_string())?;
    let get = |k: &str| {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| format!("missing `{k}`"))
    };
    let num = |k: &str| -> Result<f64, String> { get(k)?.parse().map_err(|_| format!("bad `{k}`")) };
    Ok(SweepRow {
        param: get("param")?,
        value: get("value")?,
        recall20: num("recall20")?,
        ndcg20: num("ndcg20")?,
        best_epoch: get("best_epoch")?.parse().map_err(|_| "bad `best_epoch`".to_string())?,
        seconds: num("seconds")?,
    })
}

/// Collects the summaries of all run directories under `dir` into
/// `dir/sweep.csv`, ordered by directory name. Malformed runs are skipped
/// with a warning.
pub fn emit_sweep_table(dir: &Path) -> Result<Vec<SweepRow>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut run_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    run_dirs.sort();
    let mut rows = Vec::new();
    for run in run_dirs {
        match parse_summary(&run) {
            Ok(row) => rows.push(row),
            Err(e) => warn!("skipping {}: {e}", run.display()),
        }
    }
    if rows.is_empty() {
        return Err(CliError::Runtime(format!("no completed runs under {}", dir.display())));
    }
    let mut out = String::from("param,value,recall20,ndcg20,best_epoch,seconds\n");
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.param, r.value, r.recall20, r.ndcg20, r.best_epoch, r.seconds
        ));
    }
    let path = dir.join(SWEEP_TABLE_FILE);
    fs::write(&path, out).map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}
