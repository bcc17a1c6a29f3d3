use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdpl::autodiff::OpKind;
use hdpl::hdpl::KlGranularity;
use hdpl::run::{self, Overrides, RunConfig, RunSummary};
use hdpl::transformer::{Mode, ParamReport};
use hdpl::Error;
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

/// Train and inspect small language models built from hybrid dual-path
/// linear layers.
#[derive(Parser)]
#[command(name = "hdpl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; defaults to the reference configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of updates to run (the schedule horizon is unchanged).
    #[arg(long, value_name = "N")]
    max_steps: Option<u64>,
    #[arg(long, value_name = "PATH")]
    output_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_granularity)]
    kl_granularity: Option<KlGranularity>,
    /// Print JSON instead of the human-readable report.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a summary.
    Train(Common),
    /// Validation loss of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Write per-layer (mu, logvar) records to latents.jsonl.
        #[arg(long)]
        dump_latents: bool,
    },
    /// Per-tensor parameter table and totals, without building the model.
    CountParams(Common),
    /// Finite-difference gradient check of both modes.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Scale one adjoint rule by 1.5 (negative control).
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Time dense and hybrid forward+backward passes on the same batch.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
    },
    /// Comparison table over finished run directories.
    Summarize {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_granularity(s: &str) -> Result<KlGranularity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Common {
    fn resolve(&self) -> hdpl::Result<RunConfig> {
        let overrides = Overrides {
            mode: self.mode,
            seed: self.seed,
            max_steps: self.max_steps,
            output_dir: self.output_dir.clone(),
            kl_granularity: self.kl_granularity,
        };
        RunConfig::load_or_default(self.config.as_deref())?.apply(&overrides)
    }
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("report serialises"));
    } else {
        print!("{}", human());
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("HDPL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        code: EXIT_USAGE,
        message: format!("HDPL_THREADS must be a positive integer, got {raw:?}"),
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let summary = run::cmd_train(&cfg)?;
            emit(common.json, &summary, || {
                format!(
                    "{}\noutputs in {}\n",
                    run::summary_table(std::slice::from_ref(&summary)),
                    cfg.run.output_dir.display()
                )
            });
        }
        Command::Eval {
            common,
            checkpoint,
            dump_latents,
        } => {
            let cfg = common.resolve()?;
            let report = run::cmd_eval(&cfg, &checkpoint, dump_latents)?;
            emit(common.json, &report, || {
                let mut s = format!(
                    "mode {}  step {}  val_loss {:.6}  aux {}  batches {}\n",
                    report.mode, report.step, report.val_loss, report.aux_loss, report.batches
                );
                if let (Some(path), Some(n)) = (&report.latents_file, report.latent_records) {
                    s += &format!("{n} latent records written to {}\n", path.display());
                }
                s
            });
        }
        Command::CountParams(common) => {
            let cfg = common.resolve()?;
            let report = ParamReport::new(&cfg.model());
            emit(common.json, &report, || report.render());
        }
        Command::GradCheck { common, inject_fault } => {
            let cfg = common.resolve()?;
            let fault = inject_fault.map(|op| op.parse::<OpKind>().map(|k| (k, 1.5))).transpose()?;
            let summary = run::cmd_grad_check(&cfg, fault)?;
            emit(common.json, &summary, || summary.render());
            if !summary.passed {
                return Err(Failure {
                    code: EXIT_RUNTIME,
                    message: format!("gradient check failed for {}", summary.failures().join(", ")),
                });
            }
        }
        Command::Bench { common, iterations } => {
            let cfg = common.resolve()?;
            let report = hdpl::bench::run_bench(
                &cfg.model(),
                cfg.optimization.batch_size,
                iterations.max(1),
                cfg.run.seed,
            )?;
            emit(common.json, &report, || report.render());
        }
        Command::Summarize { runs, json } => {
            let rows = runs
                .iter()
                .map(|dir| {
                    let path = dir.join(run::SUMMARY_FILE);
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    serde_json::from_str::<RunSummary>(&text)
                        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
                })
                .collect::<hdpl::Result<Vec<_>>>()?;
            emit(json, &rows, || run::summary_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
