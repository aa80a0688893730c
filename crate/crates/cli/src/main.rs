mod artifact;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode as ProcessExit;

use clap::{Args, Parser, Subcommand, ValueEnum};
use metafollower::ga::PhysicsKind;
use metafollower::pidl::ModelKind;

use crate::commands::{Context, EvalArgs, FinetuneArgs, MetaArgs, TrainArgs};
use crate::config::{parse_assignment, Override};
use crate::error::CliError;

/// Driver-specific car-following models: synthetic data, calibration,
/// meta-learning and benchmarking.
///
/// Every config key can be set in the file given by --config (one
/// `key = value` per line), with `--set key=value`, or directly as
/// `--key value` for dotted keys such as `--meta.alpha 0.1`. Later layers win.
#[derive(Debug, Parser)]
#[command(name = "metafollower", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Config file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; per-stage seeds derive from it unless set explicitly.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// One thread, fixed-order reductions, and no wall-clock fields, so
    /// reruns produce byte-identical artifacts.
    #[arg(long, global = true)]
    reproducible: bool,
    /// Output directory; also where inputs are looked up by default.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved config in file form and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhysicsArg {
    Idm,
    Ghr,
}

impl From<PhysicsArg> for PhysicsKind {
    fn from(a: PhysicsArg) -> Self {
        match a {
            PhysicsArg::Idm => PhysicsKind::Idm,
            PhysicsArg::Ghr => PhysicsKind::Ghr,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NetArg {
    Pidl,
    Lstm,
}

impl From<NetArg> for ModelKind {
    fn from(a: NetArg) -> Self {
        match a {
            NetArg::Pidl => ModelKind::Pidl,
            NetArg::Lstm => ModelKind::Lstm,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Event CSV (default: <out>/accepted.csv).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Split manifest (default: <out>/manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic fleet: fleet.csv and truth.json.
    Gen {
        /// Shorthand for fleet.n_drivers.
        #[arg(long)]
        drivers: Option<usize>,
        /// Shorthand for fleet.events_per_driver.
        #[arg(long)]
        events: Option<usize>,
    },
    /// Filter raw events: accepted.csv and rejections.json.
    Extract {
        /// Raw event CSV (default: <out>/fleet.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Split drivers and events into train/test and support/query.
    Split {
        /// Event CSV (default: <out>/accepted.csv).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Shorthand for split.support_fraction.
        #[arg(long)]
        support_ratio: Option<f64>,
    },
    /// Calibrate a physics model on the training drivers with the GA.
    Calibrate {
        #[arg(long, value_enum)]
        kind: PhysicsArg,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Supervised pretraining of a network on the training drivers.
    Train {
        #[arg(long, value_enum)]
        kind: NetArg,
        #[command(flatten)]
        inputs: Inputs,
        /// Write the random initialization without training.
        #[arg(long)]
        scratch: bool,
        /// Artifact stem (default: <kind>_pretrain or <kind>_scratch).
        #[arg(long)]
        name: Option<String>,
    },
    /// Meta-train a network across the training drivers.
    MetaTrain {
        #[arg(long, value_enum)]
        kind: NetArg,
        #[command(flatten)]
        inputs: Inputs,
        /// Starting parameters (default: per meta_init).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Artifact stem (default: <kind>_meta).
        #[arg(long)]
        name: Option<String>,
    },
    /// Fine-tune a model on each driver's support set.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Benchmark the model suite on the test drivers' query sets.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        /// Directory holding the suite artifacts (default: <out>).
        #[arg(long)]
        models: Option<PathBuf>,
        /// Comma-separated subset of the suite, by name or artifact stem.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Driving-style mode matrices, representative modes and gamma fits.
    Style {
        /// Event CSV (default: <out>/accepted.csv).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Merge eval.json files into one table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Rewrites `--a.b value` and `--a.b=value` into `--set a.b=value`.
fn expand_dotted(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(a) = it.next() {
        let dotted = a
            .strip_prefix("--")
            .filter(|rest| rest.split('=').next().is_some_and(|k| k.contains('.')));
        match dotted {
            Some(rest) if rest.contains('=') => {
                out.push("--set".into());
                out.push(rest.into());
            }
            Some(rest) => {
                let value = it.next().unwrap_or_default();
                out.push("--set".into());
                out.push(format!("{rest}={value}"));
            }
            None => out.push(a),
        }
    }
    out
}

fn overrides(cli: &Cli) -> Result<Vec<Override>, CliError> {
    let mut out = Vec::new();
    for s in &cli.global.set {
        out.push(parse_assignment(s, "--set")?);
    }
    let mut flag = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            out.push(Override {
                key: key.into(),
                value: v,
                origin: format!("--{key}"),
            });
        }
    };
    flag("seed", cli.global.seed.map(|s| s.to_string()));
    match &cli.command {
        Command::Gen { drivers, events } => {
            flag("fleet.n_drivers", drivers.map(|d| d.to_string()));
            flag("fleet.events_per_driver", events.map(|e| e.to_string()));
        }
        Command::Split { support_ratio, .. } => {
            flag("split.support_fraction", support_ratio.map(|r| r.to_string()));
        }
        _ => {}
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.global.config.as_deref(), &overrides(&cli)?)?;
    if cli.global.print_config {
        print!("{}", config::to_file(&cfg));
        return Ok(());
    }
    let threads = if cli.global.reproducible {
        1
    } else {
        cli.global.threads.unwrap_or(0)
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot start thread pool: {e}")))?;
    let ctx = Context::new(cfg, cli.global.out.clone(), cli.global.reproducible);
    eprintln!("INFO: config fingerprint {}", ctx.stamp.fingerprint);

    match cli.command {
        Command::Gen { .. } => commands::gen(&ctx),
        Command::Extract { input } => commands::extract(&ctx, input),
        Command::Split { input, .. } => commands::split(&ctx, input),
        Command::Calibrate { kind, inputs } => commands::calibrate(&ctx, kind.into(), inputs.input, inputs.manifest),
        Command::Train {
            kind,
            inputs,
            scratch,
            name,
        } => commands::train(
            &ctx,
            TrainArgs {
                kind: kind.into(),
                input: inputs.input,
                manifest: inputs.manifest,
                scratch,
                name,
            },
        ),
        Command::MetaTrain { kind, inputs, init, name } => commands::meta_train(
            &ctx,
            MetaArgs {
                kind: kind.into(),
                input: inputs.input,
                manifest: inputs.manifest,
                init,
                name,
            },
        ),
        Command::Finetune { model, inputs, split } => commands::finetune(
            &ctx,
            FinetuneArgs {
                model,
                input: inputs.input,
                manifest: inputs.manifest,
                train_split: matches!(split, SplitArg::Train),
            },
        ),
        Command::Eval { inputs, models, only } => commands::eval(
            &ctx,
            EvalArgs {
                input: inputs.input,
                manifest: inputs.manifest,
                models,
                only,
            },
        ),
        Command::Style { input } => commands::style(&ctx, input),
        Command::Report { inputs } => commands::report(&ctx, &inputs),
    }
}

fn main() -> ProcessExit {
    let cli = match Cli::try_parse_from(expand_dotted(std::env::args())) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ProcessExit::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(e.kind().to_string());
            eprint!("{e}");
            eprintln!("{}", err.line());
            return ProcessExit::from(err.code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ProcessExit::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ProcessExit::from(e.code as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let got = expand_dotted(strs(&["mf", "--meta.alpha", "0.1", "--ga.seed=3", "--seed", "4", "eval"]));
        assert_eq!(
            got,
            strs(&["mf", "--set", "meta.alpha=0.1", "--set", "ga.seed=3", "--seed", "4", "eval"])
        );
    }

    #[test]
    fn shorthand_flags_map_to_keys() {
        let cli = Cli::try_parse_from(strs(&["mf", "gen", "--drivers", "5", "--events", "21", "--seed", "7"])).unwrap();
        let keys: Vec<(String, String)> = overrides(&cli).unwrap().into_iter().map(|o| (o.key, o.value)).collect();
        assert!(keys.contains(&("fleet.n_drivers".into(), "5".into())));
        assert!(keys.contains(&("fleet.events_per_driver".into(), "21".into())));
        assert!(keys.contains(&("seed".into(), "7".into())));
    }
}
