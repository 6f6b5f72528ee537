//! Argument parsing and dispatch. Exit codes: 0 success, 1 usage,
//! 2 data validation, 3 stage failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use perception_perf::detector::{DEFAULT_CLUSTER_RADIUS_M, DEFAULT_IOU_THRESHOLD, DEFAULT_MIN_POINTS};
use perception_perf::qpn::{ArrivalProcess, DEFAULT_MAX_TOKENS};
use perception_perf::stats::Alternative;
use perception_perf::trajectory::{EvalParams, PredictorParams};

use crate::commands::{self, FixtureKind};
use crate::config::{Overrides, ResolvedConfig, SimMode};
use crate::error::{CliError, CliResult};
use crate::output::write_atomic;

#[derive(Debug, Parser)]
#[command(name = "pperf", version, about = "Performance testing for LiDAR perception pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run-config JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub sensor_rate: Option<f64>,
    #[arg(long)]
    pub threshold_ms: Option<f64>,
    /// Latency-model preset (overrides the config).
    #[arg(long)]
    pub preset: Option<String>,
    /// Latency jitter in ms (overrides the config).
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<ResolvedConfig> {
        ResolvedConfig::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                output_dir: self.out.clone(),
                sensor_rate_hz: self.sensor_rate,
                threshold_ms: self.threshold_ms,
                latency_preset: self.preset.clone(),
                noise_sigma: self.noise_sigma,
            },
        )
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AltArg {
    TwoSided,
    Greater,
    Less,
}

impl From<AltArg> for Alternative {
    fn from(a: AltArg) -> Self {
        match a {
            AltArg::TwoSided => Alternative::TwoSided,
            AltArg::Greater => Alternative::Greater,
            AltArg::Less => Alternative::Less,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ArrivalArg {
    Poisson,
    Deterministic,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write one mutated copy of every scene per configured mutation.
    Mutate(ConfigArgs),
    /// Run the surrogate detector; writes latency.csv and matches.json.
    Detect {
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long, default_value = "apollo-nuscenes")]
        preset: String,
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_CLUSTER_RADIUS_M)]
        cluster_radius: f64,
        #[arg(long, default_value_t = DEFAULT_MIN_POINTS)]
        min_points: usize,
        #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
        iou_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn latency traces into dropped frames.
    Availability {
        #[arg(long = "latency", required = true)]
        latency: Vec<PathBuf>,
        #[arg(long)]
        sensor_rate: f64,
        /// Defaults to one sensor period.
        #[arg(long)]
        threshold_ms: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// ADE/FDE per obstacle between predictions with and without drops.
    Trajectory {
        #[arg(long)]
        scene: PathBuf,
        /// matches.json written by `detect`.
        #[arg(long)]
        matches: PathBuf,
        /// availability.json written by `availability`.
        #[arg(long)]
        availability: PathBuf,
        #[arg(long, default_value_t = PredictorParams::default().horizon)]
        horizon: usize,
        #[arg(long, default_value_t = PredictorParams::default().step_dt)]
        step_dt: f64,
        #[arg(long, default_value_t = PredictorParams::default().fit_window)]
        fit_window: usize,
        #[arg(long, default_value_t = EvalParams::default().moving_threshold_m)]
        moving_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wilcoxon signed-rank and Cliff's delta on one column of two CSVs.
    Stats {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        variant: PathBuf,
        #[arg(long, default_value = "latency_ms")]
        column: String,
        #[arg(long, value_enum, default_value = "two-sided")]
        alternative: AltArg,
        /// Keep only rows whose `moving` column is true.
        #[arg(long)]
        moving_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate pipeline presets as a queueing network.
    Simulate {
        /// Preset name, or `all`. Repeatable.
        #[arg(long = "preset", required = true)]
        presets: Vec<String>,
        #[arg(long, value_enum, default_value = "unbounded")]
        mode: SimMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
        max_tokens: u64,
        #[arg(long, value_enum, default_value = "poisson")]
        arrivals: ArrivalArg,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline: baseline and variants, then stats.
    Run(ConfigArgs),
    /// Print a run's summary as a table.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Generate a synthetic scene.
    Fixture {
        #[arg(long, value_enum, default_value = "street")]
        kind: FixtureKind,
        #[arg(long)]
        scene_id: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        frames: usize,
        #[arg(long, default_value_t = 20.0)]
        rate: f64,
        #[arg(long, default_value_t = 2.0)]
        speed: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Mutate(a) => {
            for d in commands::cmd_mutate(&a.resolve()?)? {
                println!("{}", d.display());
            }
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            commands::cmd_run(&cfg)?;
            print!("{}", commands::cmd_report(&cfg.output_dir()?)?);
        }
        Command::Detect {
            scenes,
            preset,
            noise_sigma,
            cluster_radius,
            min_points,
            iou_threshold,
            seed,
            out,
        } => {
            commands::cmd_detect(&commands::DetectArgs {
                scenes,
                preset,
                noise_sigma,
                cluster_radius,
                min_points,
                iou_threshold,
                seed,
                out,
            })?;
        }
        Command::Availability {
            latency,
            sensor_rate,
            threshold_ms,
            seed,
            out,
        } => {
            let r = commands::cmd_availability(&commands::AvailabilityArgs {
                latency,
                sensor_rate_hz: sensor_rate,
                threshold_ms,
                seed,
                out,
            })?;
            println!(
                "dropped {} of {} frames",
                r.dropped_frames.len(),
                r.total_frames
            );
        }
        Command::Trajectory {
            scene,
            matches,
            availability,
            horizon,
            step_dt,
            fit_window,
            moving_threshold,
            seed,
            out,
        } => {
            let r = commands::cmd_trajectory(&commands::TrajectoryArgs {
                scene,
                matches,
                availability,
                eval: EvalParams {
                    predictor: PredictorParams {
                        horizon,
                        step_dt,
                        fit_window,
                    },
                    moving_threshold_m: moving_threshold,
                },
                seed,
                out,
            })?;
            println!("{} obstacles, {} moving", r.rows.len(), r.moving_count);
        }
        Command::Stats {
            baseline,
            variant,
            column,
            alternative,
            moving_only,
            out,
        } => {
            let args = commands::StatsArgs {
                baseline,
                variant,
                column,
                alternative: alternative.into(),
                moving_only,
            };
            let result = commands::cmd_stats(&args)?;
            let stamp = commands::stamp_for(
                &serde_json::json!({
                    "command": "stats",
                    "baseline": args.baseline,
                    "variant": args.variant,
                    "column": args.column,
                    "alternative": args.alternative,
                    "moving_only": args.moving_only,
                }),
                0,
            );
            let v = stamp.wrap(&serde_json::json!({ "column": args.column, "result": result }))?;
            let mut text = serde_json::to_string_pretty(&v).map_err(|e| CliError::Stage(e.to_string()))?;
            text.push('\n');
            match out {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
        Command::Simulate {
            presets,
            mode,
            seed,
            max_tokens,
            arrivals,
            out,
        } => {
            let (runs, stamp) = commands::cmd_simulate(&commands::SimulateArgs {
                presets,
                mode,
                seed,
                max_tokens,
                arrivals: match arrivals {
                    ArrivalArg::Poisson => ArrivalProcess::Poisson,
                    ArrivalArg::Deterministic => ArrivalProcess::Deterministic,
                },
            })?;
            commands::write_simulation(out.as_deref(), &runs, &stamp)?;
        }
        Command::Report { run } => print!("{}", commands::cmd_report(&run)?),
        Command::Fixture {
            kind,
            scene_id,
            seed,
            frames,
            rate,
            speed,
            out,
        } => {
            let s = commands::cmd_fixture(&commands::FixtureArgs {
                kind,
                scene_id,
                seed,
                frames,
                rate,
                speed,
                out,
            })?;
            println!("{}: {} frames", s.scene_id, s.frames.len());
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pperf: {e}");
            e.exit_code()
        }
    }
}
