use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evstereo::harness::{self, RunConfig};
use evstereo::Result;

#[derive(Parser)]
#[command(name = "evstereo", version, about = "Stereo event-camera 3D detection at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene spec into event streams, calibration and annotations.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch on the configured dataset and save the weights.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        /// Loss log CSV; defaults to loss_log.csv in the weights directory.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Detect objects at every blind-time instant.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        protocol: Protocol,
    },
    /// Score detections against the annotations.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        protocol: Protocol,
    },
    /// Finite-difference check of every primitive and module path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the backward of the named op.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

/// Overrides for the evaluation protocol settings of the config.
#[derive(clap::Args)]
struct Protocol {
    #[arg(long)]
    motion_scale: Option<u32>,
    #[arg(long)]
    time_slice: Option<u32>,
}

fn load(path: &Path, protocol: Option<&Protocol>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(p) = protocol {
        cfg.motion_scale = p.motion_scale.unwrap_or(cfg.motion_scale);
        cfg.time_slice = p.time_slice.unwrap_or(cfg.time_slice);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { spec, out } => {
            let m = harness::cmd_synth(&spec, &out)?;
            for f in &m.files {
                println!("{}  {}", f.sha256, f.name);
            }
        }
        Command::TrainToy { config, steps, log } => {
            let cfg = load(&config, None)?;
            let r = harness::cmd_train_toy(&cfg, steps, log.as_deref())?;
            match (r.losses.first(), r.losses.last()) {
                (Some(a), Some(b)) => println!(
                    "{} steps on {} samples: total loss {:.6} -> {:.6}",
                    r.losses.len(),
                    r.samples,
                    a.total,
                    b.total
                ),
                _ => println!("initial weights saved to {}", cfg.weights.display()),
            }
        }
        Command::Infer { config, out, protocol } => {
            let cfg = load(&config, Some(&protocol))?;
            let d = harness::cmd_infer(&cfg, &out)?;
            println!(
                "{} detections over {} instants ({} skipped)",
                d.detections.len(),
                d.instants_us.len(),
                d.skipped_us.len()
            );
        }
        Command::Eval {
            config,
            detections,
            out,
            protocol,
        } => {
            let cfg = load(&config, Some(&protocol))?;
            print!("{}", harness::results_csv(&harness::cmd_eval(&cfg, &detections, &out)?));
        }
        Command::Gradcheck { seed, inject_fault } => {
            let report = harness::cmd_gradcheck(seed, inject_fault.as_deref())?;
            print!("{}", report.render());
            let failed = report.failures();
            if !failed.is_empty() {
                let names: Vec<&str> = failed.iter().map(|e| e.path.as_str()).collect();
                eprintln!("gradient check failed: {}", names.join(", "));
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
