use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gode_cf::gradcheck::run_suite;
use gode_cf::EvalMode;
use gode_cf_cli::experiment::with_thread_pool;
use gode_cf_cli::{
    evaluate_run, prepare_data, run_labeled, run_sweep, CliError, ExperimentConfig, OUTPUT_ROOT_ENV,
};

#[derive(Parser)]
#[command(name = "gode-cf", version, about = "Graph neural ODE collaborative filtering experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set t1=0.7`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split a raw interaction log into a dataset directory.
    PrepareData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and evaluate its best checkpoint on the test items.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, hide = true)]
        label: Option<String>,
    },
    /// Re-evaluate the checkpoint of a finished run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        mode: EvalMode,
    },
    /// Run one training per value of `sweep_param` and tabulate the results.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    cfg.resolve_output(root.as_deref());
    Ok(cfg)
}

fn print_metrics(report: &gode_cf::MetricsReport) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    gode_cf::MetricsReport::write_csv_header(&mut out)?;
    report.write_csv_rows(&mut out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PrepareData { cfg, out } => {
            let cfg = load_config(&cfg)?;
            if cfg.data.as_os_str().is_empty() {
                return Err(CliError::config("data", "no dataset path given"));
            }
            let ds = prepare_data(&cfg, &out)?;
            println!(
                "{} users, {} items, {} train interactions -> {}",
                ds.n_users(),
                ds.n_items(),
                ds.train_len(),
                out.display()
            );
        }
        Command::Train { cfg, label } => {
            let cfg = load_config(&cfg)?;
            let label = label.as_deref().and_then(|l| l.split_once('='));
            let summary = run_labeled(&cfg, label)?;
            print_metrics(&summary.test)?;
        }
        Command::Evaluate { run, mode } => {
            print_metrics(&evaluate_run(&run, mode)?)?;
        }
        Command::Sweep { cfg } => {
            let cfg = load_config(&cfg)?;
            let exe = std::env::current_exe().ok();
            let rows = run_sweep(&cfg, exe.as_deref().map(Path::new))?;
            println!("param,value,recall20,ndcg20,best_epoch,seconds");
            for r in rows {
                println!("{},{},{},{},{},{}", r.param, r.value, r.recall20, r.ndcg20, r.best_epoch, r.seconds);
            }
        }
        Command::Gradcheck { seed, tolerance } => {
            let cases = with_thread_pool(&ExperimentConfig::default(), || Ok(run_suite(seed)?))?;
            let mut worst: f64 = 0.0;
            for c in &cases {
                println!(
                    "{:<5} n_hops={} weights={:<5} params={:<3} max_rel_error={:.3e}",
                    c.method.to_string(),
                    c.n_hops,
                    c.use_weights,
                    c.n_params,
                    c.max_rel_error
                );
                worst = worst.max(c.max_rel_error);
            }
            println!("max relative error: {worst:.3e}");
            if worst >= tolerance {
                return Err(CliError::Runtime(format!("gradient check failed: {worst:.3e} >= {tolerance:e}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
