use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mor_kit::config::parse_list;
use mor_kit::{cmd_bench, cmd_fault, cmd_inspect, cmd_sweep, cmd_train, CliError, ExperimentConfig, Overrides};

// stdout may be a closed pipe (`mor-kit inspect ... | head`)
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "mor-kit", version, about = "Train and analyse mixture-of-routers MoE-LoRA models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` (env: MOR_KIT_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir` (env: MOR_KIT_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, logs and balance report.
    Train(Common),
    /// Train once per router count and tabulate loss, balance and timing.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated router counts, e.g. 1,2,3,4.
        #[arg(long)]
        routers: Option<String>,
    },
    /// Measure forward and train-step latency per router count.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        routers: Option<String>,
    },
    /// Compare selection agreement under router faults, single vs MoR.
    Fault {
        #[command(flatten)]
        common: Common,
        /// Comma-separated noise levels, e.g. 0.5,1.0.
        #[arg(long)]
        sigma: Option<String>,
    },
    /// Print a checkpoint summary.
    Inspect { path: PathBuf },
}

fn load(common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let o = Overrides {
        seed: common.seed,
        out: common.out.clone(),
    }
    .with_env()?;
    cfg.apply(&o);
    Ok(cfg)
}

fn finish(mut cfg: ExperimentConfig, edit: impl FnOnce(&mut ExperimentConfig) -> Result<(), CliError>) -> Result<ExperimentConfig, CliError> {
    edit(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    say!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = finish(load(&common)?, |_| Ok(()))?;
            let s = cmd_train(&cfg)?;
            print_json(&s);
            eprintln!("artifacts written to {}", cfg.output.dir.display());
        }
        Command::Sweep { common, routers } => {
            let cfg = finish(load(&common)?, |c| {
                if let Some(r) = &routers {
                    c.sweep.routers = parse_list("routers", r)?;
                }
                Ok(())
            })?;
            let rep = cmd_sweep(&cfg)?;
            say!("n_routers  final_mse     cov      max/min  train_ms   fwd_ns");
            for r in &rep.rows {
                say!(
                    "{:>9}  {:.4e}  {:.4}  {:>7.2}  {:>8.1}  {:>7.1}",
                    r.summary.n_routers,
                    r.summary.final_mse,
                    r.summary.mean_cov,
                    r.summary.mean_max_min_ratio,
                    r.train_time_ms,
                    r.forward_ns_per_token
                );
            }
            say!("train time monotone in r: {}", rep.train_time_monotone);
        }
        Command::Bench { common, routers } => {
            let cfg = finish(load(&common)?, |c| {
                if let Some(r) = &routers {
                    c.bench.routers = parse_list("routers", r)?;
                }
                Ok(())
            })?;
            let rep = cmd_bench(&cfg)?;
            say!("{}", rep.to_csv()?.trim_end());
            say!("forward overhead monotone in r: {}", rep.forward_monotone());
        }
        Command::Fault { common, sigma } => {
            let cfg = finish(load(&common)?, |c| {
                if let Some(s) = &sigma {
                    c.fault.sigmas = parse_list("sigma", s)?;
                }
                Ok(())
            })?;
            let rep = cmd_fault(&cfg)?;
            for s in &rep.summaries {
                say!(
                    "sigma {}: agreement single {:.4} mor {:.4} diff {:+.4} ({:.0}% CI [{:+.4}, {:+.4}]) mor better on {}/{} seeds",
                    s.sigma,
                    s.single_mean_agreement,
                    s.mor_mean_agreement,
                    s.mean_difference,
                    100.0 * s.confidence,
                    s.ci_low,
                    s.ci_high,
                    s.seeds_mor_better,
                    s.n_seeds
                );
            }
        }
        Command::Inspect { path } => say!("{}", cmd_inspect(&path)?.to_string().trim_end()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
