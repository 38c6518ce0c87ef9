use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use protonesy::commands::{self, CliError};
use protonesy::config::{ConfigError, RunConfig};
use protonesy::taskspec::TaskSpec;
use protonesy_core::gradcheck::Fault;
use protonesy_core::shortcuts::DEFAULT_NODE_BUDGET;

#[derive(Parser)]
#[command(
    name = "protonesy",
    version,
    about = "Prototype-grounded neurosymbolic learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write metrics, logs and checkpoints.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Re-evaluate a finished run from its checkpoints.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Where to write the recomputed metrics (default: RUN/eval).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
    },
    /// Count reasoning-shortcut optima of a ground-truth task.
    CountRs {
        /// Task spec JSON; the bundled even/odd task when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Concept-supervised classes, applied to every group.
        #[arg(long, value_delimiter = ',')]
        supervised: Option<Vec<usize>>,
        #[arg(long, default_value_t = DEFAULT_NODE_BUDGET)]
        budget: u64,
        /// Include every optimal map in the output.
        #[arg(long)]
        catalogue: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Inject a known-wrong gradient to confirm the check fires.
        #[arg(long)]
        fault: Option<FaultArg>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset that `train` can read through `synth_dir`.
    GenSynth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Data seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    SignFlip,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// One seed or a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Any configuration key, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn read_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError {
            key: o.clone(),
            line: None,
            message: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = read_config(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = &self.seed {
            cfg.seeds = s.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &self.mnist_dir {
            cfg.mnist_dir = Some(d.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run } => {
            let cfg = run.resolve()?;
            let record = commands::cmd_train(&cfg)?;
            for name in protonesy::output::METRIC_NAMES {
                let s = record.summary[name];
                println!("{name:>6} {:.4} ± {:.4}", s.mean, s.std);
            }
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval { run, out, mnist_dir } => {
            let out = out.unwrap_or_else(|| run.join("eval"));
            let outcome = commands::cmd_eval(&run, &out, mnist_dir.as_deref())?;
            for r in &outcome.rows {
                println!(
                    "seed {:>5}  f1_c {:.4}  cls_c {:.4}  acc_y {:.4}",
                    r.seed, r.f1_c, r.cls_c, r.acc_y
                );
            }
            if !outcome.mismatched.is_empty() {
                return Err(CliError::Acceptance(format!(
                    "metrics of seeds {:?} differ from the stored run",
                    outcome.mismatched
                )));
            }
        }
        Command::CountRs {
            spec,
            supervised,
            budget,
            catalogue,
            out,
        } => {
            let mut task = match &spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|source| CliError::Io {
                        path: p.clone(),
                        source,
                    })?;
                    TaskSpec::from_json(&text)?
                }
                None => TaskSpec::bundled_even_odd(),
            };
            if let Some(s) = supervised {
                task.supervised = vec![s; task.sizes.len()];
            }
            let c = commands::cmd_count_rs(&task, budget, catalogue, out.as_deref())?;
            println!("optima {}  shortcuts {}", c.optima_count, c.shortcut_count);
        }
        Command::Gradcheck {
            seed,
            trials,
            fault,
            out,
        } => {
            let fault = fault.map(|FaultArg::SignFlip| Fault::SignFlip);
            let report = commands::cmd_gradcheck(seed, trials, fault, out.as_deref())?;
            for s in &report.suites {
                println!("{:<12} max {:.3e}  tol {:.0e}", s.name, s.max_error, s.tolerance);
            }
            if !report.passed() {
                return Err(CliError::Acceptance("gradient check exceeded tolerance".into()));
            }
        }
        Command::GenSynth {
            config,
            seed,
            out,
            overrides,
        } => {
            let mut cfg = read_config(config.as_deref(), &overrides)?;
            if let Some(s) = seed {
                cfg.data_seed = s;
            }
            cfg.validate()?;
            let m = commands::cmd_gen_synth(&cfg.synthetic_spec(), &out)?;
            println!("{} rows, {} dims -> {}", m.rows, m.spec.dim, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
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
