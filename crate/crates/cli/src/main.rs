//! Command-line front end: run experiments, emit plot data, audit
//! gradient isolation, and explore block hierarchies.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use layerwise::arch::{
    check_acceleration, conv_mass_score, enumerate_hierarchies, parse_hierarchy,
    render_hierarchy, BlockKind, HierarchyConstraint, HierarchySpec,
};
use layerwise::config::{parse_config, RunConfig};
use layerwise::experiment::{audit_gradient_isolation, emit_curves, run_experiment};

#[derive(Parser)]
#[command(name = "layerwise", about = "Layer-wise local-error training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (seed, mode) pair of a config and summarize.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's seed list, e.g. "1,2,3".
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Emit per-run (epoch, test-error) plot data from metrics CSVs.
    Curves {
        /// One or more metrics.csv paths.
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Instrumented gradient-isolation and inference-equivalence audit.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Enumerate or classify hierarchies.
    Hierarchies {
        /// Classify a single hierarchy, e.g. "[1,1,2,2]".
        #[arg(long)]
        check: Option<String>,
        /// Enumerate compositions of this many convolutions.
        #[arg(long)]
        convs: Option<usize>,
        #[arg(long, default_value_t = 4)]
        stages: usize,
        /// Only list hierarchies passing the acceleration check.
        #[arg(long)]
        accelerated: bool,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
    },
}

fn load_config(
    path: &PathBuf,
    out: Option<PathBuf>,
    seeds: Option<String>,
) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut cfg = parse_config(&text).map_err(|e| e.to_string())?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds
            .split(',')
            .map(|s| s.trim().parse::<u64>().map_err(|_| format!("bad seed '{s}'")))
            .collect::<Result<_, _>>()?;
        if cfg.seeds.is_empty() {
            return Err("seed list must be non-empty".into());
        }
    }
    Ok(cfg)
}

fn template_spec(stages: usize, resolution: usize) -> Result<HierarchySpec, String> {
    HierarchySpec::new(
        vec![1; stages.max(2)],
        vec![16; stages.max(2)],
        BlockKind::Plain,
        resolution,
    )
    .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, out, seeds } => {
            let cfg = load_config(&config, out, seeds)?;
            let outcome = run_experiment(&cfg).map_err(|e| e.to_string())?;
            println!("{}", outcome.summary);
            println!("metrics: {}", outcome.csv_path.display());
            Ok(())
        }
        Command::Curves { csv, out } => {
            if csv.is_empty() {
                return Err("no CSV paths given".into());
            }
            for path in &csv {
                for p in emit_curves(path, &out).map_err(|e| e.to_string())? {
                    println!("{}", p.display());
                }
            }
            Ok(())
        }
        Command::Audit { config, seeds } => {
            let cfg = load_config(&config, None, seeds)?;
            let report = audit_gradient_isolation(&cfg).map_err(|e| e.to_string())?;
            println!("{report}");
            if report.pass {
                Ok(())
            } else {
                Err("gradient-isolation audit failed".into())
            }
        }
        Command::Hierarchies {
            check,
            convs,
            stages,
            accelerated,
            resolution,
        } => {
            if let Some(text) = check {
                let d = parse_hierarchy(&text).map_err(|e| e.to_string())?;
                let mut spec = template_spec(d.len(), resolution)?;
                spec.stage_convs = d;
                spec.stage_channels = vec![16; spec.stage_convs.len()];
                spec.validate().map_err(|e| e.to_string())?;
                println!(
                    "{}  accelerated={}  score={}",
                    spec.hierarchy_string(),
                    check_acceleration(&spec),
                    conv_mass_score(&spec)
                );
                return Ok(());
            }
            let convs = convs.ok_or("pass --check or --convs")?;
            let template = template_spec(stages, resolution)?;
            let constraint = if accelerated {
                HierarchyConstraint::Accelerated
            } else {
                HierarchyConstraint::Any
            };
            let list = enumerate_hierarchies(convs, stages, constraint, &template)
                .map_err(|e| e.to_string())?;
            for d in list {
                let mut spec = template.clone();
                spec.stage_convs = d.clone();
                println!(
                    "{}  accelerated={}  score={}",
                    render_hierarchy(&d),
                    check_acceleration(&spec),
                    conv_mass_score(&spec)
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
