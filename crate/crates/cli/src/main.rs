// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use traitscope::assessment::Suite;
use traitscope::experiment::{
    render_report, replay, Experiment, Overrides, ReportFormat, Request, RunOutcome, ScanTarget, SweepKind,
};
use traitscope::model::{ToyModel, ToyModelConfig};
use traitscope::store::write_atomic;
use traitscope::Error;

#[derive(Parser, Debug)]
#[command(name = "traitscope", version, about = "Extract, steer and assess personality features")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, short = 'c', global = true, default_value = "traitscope.toml")]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, short = 'o', global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SuiteArg {
    Personality,
    Safety,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Personality => Suite::Personality,
            SuiteArg::Safety => Suite::Safety,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct SweepTarget {
    /// Steer each category of this background factor.
    #[arg(long)]
    factor: Option<String>,
    /// Steer each configured pressure direction.
    #[arg(long)]
    pressure: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a factor registry from descriptor phrases and an SAE.
    ExtractBackground,
    /// Extract one direction per contrast pair.
    ExtractPressure,
    /// Coefficient scan: choice logits and generations over the grid.
    Scan {
        #[arg(long, requires = "category", conflicts_with = "pressure")]
        factor: Option<String>,
        #[arg(long)]
        category: Option<String>,
        #[arg(long, required_unless_present = "factor")]
        pressure: Option<String>,
        #[arg(long, value_enum, default_value = "personality")]
        suite: SuiteArg,
    },
    /// Unsteered scores for an item suite.
    Assess {
        #[arg(long, value_enum, default_value = "personality")]
        suite: SuiteArg,
    },
    /// Steering sweep over a factor's categories or over all pressures.
    Sweep {
        #[command(flatten)]
        target: SweepTarget,
        #[arg(long, value_enum, default_value = "personality")]
        suite: SuiteArg,
    },
    /// Render a saved sweep.json as markdown or CSV.
    Report {
        /// Path to a sweep.json written by `sweep`.
        input: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: FormatArg,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run a manifest and compare artifact digests.
    Replay { manifest: PathBuf },
    /// Train an SAE on residuals of the configured corpus.
    TrainSae,
    /// Write a freshly initialized toy checkpoint.
    ToyInit {
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 32)]
        d_model: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
    },
}

fn outcome_json(outcome: &RunOutcome) -> serde_json::Value {
    json!({
        "status": "ok",
        "command": outcome.manifest.command,
        "run_dir": outcome.run_dir,
        "artifacts": outcome.manifest.artifacts.keys().collect::<Vec<_>>(),
    })
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    let overrides = Overrides {
        seed: cli.seed,
        output_dir: cli.output_dir.clone(),
    };
    let request = match cli.command {
        Command::Report { input, format, out } => {
            let format = match format {
                FormatArg::Markdown => ReportFormat::Markdown,
                FormatArg::Csv => ReportFormat::Csv,
            };
            let text = render_report(&input, format)?;
            return match out {
                Some(path) => {
                    write_atomic(&path, text.as_bytes())?;
                    Ok(json!({"status": "ok", "command": "report", "output": path}))
                }
                None => {
                    print!("{text}");
                    Ok(serde_json::Value::Null)
                }
            };
        }
        Command::Replay { manifest } => {
            let r = replay(&manifest, cli.output_dir.as_deref())?;
            let ok = r.all_match();
            let value = json!({
                "status": if ok { "ok" } else { "mismatch" },
                "command": "replay",
                "run_dir": r.rerun.run_dir,
                "artifacts": r.artifacts,
            });
            if !ok {
                return Err(Error::InvalidConfig(format!("replay mismatch: {value}")));
            }
            return Ok(value);
        }
        Command::ToyInit { out, layers, d_model, heads } => {
            let config = ToyModelConfig {
                n_layers: layers,
                d_model,
                n_heads: heads,
                seed: cli.seed.unwrap_or(0),
                ..ToyModelConfig::default()
            };
            ToyModel::new(config)?.save(&out)?;
            return Ok(json!({"status": "ok", "command": "toy-init", "output": out}));
        }
        Command::ExtractBackground => Request::ExtractBackground,
        Command::ExtractPressure => Request::ExtractPressure,
        Command::TrainSae => Request::TrainSae,
        Command::Scan {
            factor,
            category,
            pressure,
            suite,
        } => {
            let target = match (factor, category, pressure) {
                (Some(factor), Some(category), _) => ScanTarget::Background { factor, category },
                (_, _, Some(pressure)) => ScanTarget::Pressure { pressure },
                _ => return Err(Error::InvalidConfig("scan needs --factor/--category or --pressure".into())),
            };
            Request::Scan {
                target,
                suite: suite.into(),
            }
        }
        Command::Assess { suite } => Request::Assess { suite: suite.into() },
        Command::Sweep { target, suite } => Request::Sweep {
            kind: if target.pressure {
                SweepKind::Pressure
            } else {
                SweepKind::Factor
            },
            factor: target.factor,
            suite: suite.into(),
        },
    };
    let mut experiment = Experiment::load(&cli.config, &overrides)?;
    let outcome = experiment.execute(&request)?;
    Ok(outcome_json(&outcome))
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.render().to_string().trim().to_string(), 2);
        }
    };
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string(), 1),
    }
}
