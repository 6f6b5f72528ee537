//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use perception_perf::availability::{compute_dropped_frames, write_summary_csv, AvailabilityReport};
use perception_perf::detector::{LatencyModel, LatencyTrace, MatchRecord};
use perception_perf::fixtures::{generate, single_mover, street_scene_spec};
use perception_perf::qpn::{preset_config, run_model, run_simulation, write_table_csv, ArrivalProcess, CapacityMode, SimMetrics, PRESETS};
use perception_perf::scene::{encode_scene, Scene};
use perception_perf::stats::Alternative;
use perception_perf::trajectory::EvalParams;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ResolvedConfig, SimMode};
use crate::error::{CliError, CliResult};
use crate::output::{write_atomic, write_csv_with, write_json, RunStamp};
use crate::pipeline::{
    delays_for, detect_scene, evaluate, load_scene_input, paired_comparison, prepare, run_variant,
    summarize, Comparison, VariantSummary,
};

/// Stamp for commands driven by flags: the hash covers the given
/// parameters.
pub fn stamp_for(params: &Value, seed: u64) -> RunStamp {
    let bytes = serde_json::to_vec(params).expect("params serialize");
    RunStamp {
        config_sha256: hex::encode(Sha256::digest(&bytes)),
        seed,
    }
}

fn write_scene(dir: &Path, scene: &Scene, stamp: &RunStamp) -> CliResult<()> {
    for (rel, bytes) in encode_scene(scene, Some(&stamp.to_value()))? {
        write_atomic(&dir.join(rel), &bytes)?;
    }
    Ok(())
}

fn load_all(cfg: &ResolvedConfig) -> CliResult<Vec<Scene>> {
    let scenes: Vec<Scene> = cfg
        .scene_paths()
        .iter()
        .map(|p| load_scene_input(p))
        .collect::<CliResult<_>>()?;
    let mut ids = std::collections::BTreeSet::new();
    for s in &scenes {
        if !ids.insert(s.scene_id.as_str()) {
            return Err(CliError::Data(format!("scene id `{}` appears twice", s.scene_id)));
        }
    }
    Ok(scenes)
}

/// Writes one directory per mutation: mutated scenes plus provenance.
pub fn cmd_mutate(cfg: &ResolvedConfig) -> CliResult<Vec<PathBuf>> {
    let out = cfg.output_dir()?;
    let scenes = load_all(cfg)?;
    let variants = cfg.config.variants()?;
    // Mutate everything before writing anything.
    let mut staged = Vec::new();
    for v in variants.iter().filter(|v| v.spec.is_some()) {
        let mut prepared = Vec::new();
        for s in &scenes {
            prepared.push(prepare(s, v.spec.as_ref())?);
        }
        staged.push((v, prepared));
    }
    let mut dirs = Vec::new();
    for (v, prepared) in staged {
        let dir = out.join(&v.name);
        let mut prov = BTreeMap::new();
        for p in &prepared {
            write_scene(&dir.join(&p.scene.scene_id), &p.scene, &cfg.stamp)?;
            prov.insert(p.scene.scene_id.clone(), &p.provenance);
        }
        write_json(
            &dir.join("provenance.json"),
            &cfg.stamp,
            &json!({ "variant": v.name, "mutation": v.spec, "scenes": prov }),
        )?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_sha256: String,
    pub seed: u64,
    pub variants: Vec<VariantSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub simulations: Vec<SimMetrics>,
}

/// Full pipeline over the baseline and every mutation variant, plus the
/// optional simulation block.
pub fn cmd_run(cfg: &ResolvedConfig) -> CliResult<RunSummary> {
    let out = cfg.output_dir()?;
    let c = &cfg.config;
    let scenes = load_all(cfg)?;
    let variants = c.variants()?;
    let detector = c.detector.params(c.detector_seed())?;
    let eval = c.predictor.eval_params();
    let rates: BTreeMap<String, f64> = scenes
        .iter()
        .map(|s| (s.scene_id.clone(), c.sensor_rate_hz.unwrap_or(s.frame_rate)))
        .collect();
    let threshold = |id: &str| c.threshold_ms.unwrap_or_else(|| 1000.0 / rates[id]);

    let mut outcomes = Vec::new();
    if !scenes.is_empty() {
        for v in &variants {
            outcomes.push(run_variant(
                &v.name,
                v.spec.as_ref(),
                &scenes,
                &detector,
                c.detector.iou_threshold,
                &rates,
                &threshold,
                &eval,
            )?);
        }
    }
    let summaries = if outcomes.is_empty() {
        Vec::new()
    } else {
        summarize(&outcomes, c.stats.alternative)?
    };

    let mut simulations = Vec::new();
    if let Some(sim) = &c.simulate {
        for preset in &sim.presets {
            for &mode in &sim.modes {
                simulations.push(simulate_one(
                    preset,
                    mode,
                    c.simulate_seed(preset, mode),
                    sim.max_tokens,
                    sim.arrivals,
                )?);
            }
        }
    }

    let stamp = &cfg.stamp;
    let mut resolved = c.clone();
    resolved.output_dir = None;
    write_json(
        &out.join("run.json"),
        stamp,
        &json!({
            "config": resolved,
            "variants": variants.iter().map(|v| json!({"name": v.name, "mutation": v.spec})).collect::<Vec<_>>(),
        }),
    )?;
    for o in &outcomes {
        let dir = out.join("variants").join(&o.name);
        write_csv_with(&dir.join("latency.csv"), |b| o.trace.write_csv(b, Some(&stamp.comment())))?;
        write_csv_with(&dir.join("availability.csv"), |b| {
            o.availability.write_csv(b, Some(&stamp.comment()))
        })?;
        write_json(&dir.join("availability.json"), stamp, &o.availability)?;
        write_csv_with(&dir.join("deviations.csv"), |b| {
            o.deviations.write_csv(b, Some(&stamp.comment()))
        })?;
        write_json(&dir.join("deviations.json"), stamp, &o.deviations)?;
        if o.spec.is_some() {
            write_json(
                &dir.join("provenance.json"),
                stamp,
                &json!({ "variant": o.name, "mutation": o.spec, "scenes": o.provenance }),
            )?;
        }
    }
    if !outcomes.is_empty() {
        let rows = perception_perf::availability::availability_summary(
            &outcomes[0].availability,
            &outcomes
                .iter()
                .map(|o| (o.name.clone(), o.availability.clone()))
                .collect::<Vec<_>>(),
        );
        write_csv_with(&out.join("availability_summary.csv"), |b| {
            write_summary_csv(&rows, b, Some(&stamp.comment()))
        })?;
    }
    if !simulations.is_empty() {
        write_csv_with(&out.join("simulate").join("table.csv"), |b| {
            write_table_csv(&simulations, b, Some(&stamp.comment()))
        })?;
    }
    let summary = RunSummary {
        config_sha256: stamp.config_sha256.clone(),
        seed: stamp.seed,
        variants: summaries,
        simulations,
    };
    let mut bytes = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Stage(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(&out.join("summary.json"), &bytes)?;
    Ok(summary)
}

pub fn simulate_one(
    preset: &str,
    mode: SimMode,
    seed: u64,
    max_tokens: u64,
    arrivals: ArrivalProcess,
) -> CliResult<SimMetrics> {
    let mut model = preset_config(preset, seed)?;
    model.max_tokens = max_tokens;
    model.arrivals = arrivals;
    Ok(match mode {
        SimMode::Unbounded => run_simulation(&model, CapacityMode::Unbounded)?,
        SimMode::KeepLatest => run_simulation(&model, CapacityMode::KeepLatest)?,
        SimMode::AsConfigured => run_model(&model)?,
    })
}

pub struct SimulateArgs {
    pub presets: Vec<String>,
    pub mode: SimMode,
    pub seed: u64,
    pub max_tokens: u64,
    pub arrivals: ArrivalProcess,
}

/// Runs each preset and returns the metrics with the stamp used for output.
pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<(Vec<SimMetrics>, RunStamp)> {
    let mut presets = Vec::new();
    for p in &args.presets {
        if p == "all" {
            presets.extend(PRESETS.iter().map(|s| s.to_string()));
        } else if PRESETS.contains(&p.as_str()) {
            presets.push(p.clone());
        } else {
            return Err(CliError::Data(format!(
                "unknown preset `{p}`; expected one of {} or all",
                PRESETS.join(", ")
            )));
        }
    }
    let stamp = stamp_for(
        &json!({
            "command": "simulate",
            "presets": presets,
            "mode": args.mode,
            "max_tokens": args.max_tokens,
            "arrivals": args.arrivals,
        }),
        args.seed,
    );
    let runs = presets
        .iter()
        .map(|p| simulate_one(p, args.mode, args.seed, args.max_tokens, args.arrivals))
        .collect::<CliResult<Vec<_>>>()?;
    Ok((runs, stamp))
}

pub fn write_simulation(out: Option<&Path>, runs: &[SimMetrics], stamp: &RunStamp) -> CliResult<()> {
    let mut buf = Vec::new();
    write_table_csv(runs, &mut buf, Some(&stamp.comment()))?;
    match out {
        Some(p) => write_atomic(p, &buf),
        None => {
            print!("{}", String::from_utf8_lossy(&buf));
            Ok(())
        }
    }
}

pub struct DetectArgs {
    pub scenes: Vec<PathBuf>,
    pub preset: String,
    pub noise_sigma: Option<f64>,
    pub cluster_radius: f64,
    pub min_points: usize,
    pub iou_threshold: f64,
    pub seed: u64,
    pub out: PathBuf,
}

/// Writes `latency.csv` and `matches.json` for the given scenes.
pub fn cmd_detect(args: &DetectArgs) -> CliResult<RunStamp> {
    let scenes = args
        .scenes
        .iter()
        .map(|p| load_scene_input(p))
        .collect::<CliResult<Vec<_>>>()?;
    let mut latency = LatencyModel::preset(&args.preset)?;
    if let Some(s) = args.noise_sigma {
        latency.noise_sigma = s;
    }
    let params = perception_perf::detector::DetectorParams {
        cluster_radius: args.cluster_radius,
        min_points: args.min_points,
        latency,
        seed: args.seed,
        measure: false,
    };
    let stamp = stamp_for(
        &json!({
            "command": "detect",
            "scenes": scenes.iter().map(|s| &s.scene_id).collect::<Vec<_>>(),
            "detector": params,
            "iou_threshold": args.iou_threshold,
        }),
        args.seed,
    );
    let mut trace = LatencyTrace::default();
    let mut matches = BTreeMap::new();
    for s in &scenes {
        let d = detect_scene(s, &params, args.iou_threshold)?;
        trace.records.extend(d.records);
        matches.insert(s.scene_id.clone(), d.matches);
    }
    write_csv_with(&args.out.join("latency.csv"), |b| trace.write_csv(b, Some(&stamp.comment())))?;
    write_json(&args.out.join("matches.json"), &stamp, &json!({ "scenes": matches }))?;
    Ok(stamp)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))
}

pub struct AvailabilityArgs {
    pub latency: Vec<PathBuf>,
    pub sensor_rate_hz: f64,
    pub threshold_ms: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_availability(args: &AvailabilityArgs) -> CliResult<AvailabilityReport> {
    let mut trace = LatencyTrace::default();
    for p in &args.latency {
        let t = LatencyTrace::read_csv(read_text(p)?.as_bytes())
            .map_err(|e| CliError::input(p.display(), e))?;
        trace.records.extend(t.records);
    }
    trace.validate().map_err(|e| CliError::input("latency trace", e))?;
    let rates: BTreeMap<String, f64> = trace
        .records
        .iter()
        .map(|r| (r.scene_id.clone(), args.sensor_rate_hz))
        .collect();
    let threshold = args.threshold_ms.unwrap_or(1000.0 / args.sensor_rate_hz);
    let report = compute_dropped_frames(&delays_for(&trace, &rates)?, threshold)?;
    let stamp = stamp_for(
        &json!({
            "command": "availability",
            "sensor_rate_hz": args.sensor_rate_hz,
            "threshold_ms": threshold,
            "frames": trace.records.len(),
        }),
        args.seed,
    );
    write_csv_with(&args.out.join("availability.csv"), |b| report.write_csv(b, Some(&stamp.comment())))?;
    write_json(&args.out.join("availability.json"), &stamp, &report)?;
    Ok(report)
}

pub struct TrajectoryArgs {
    pub scene: PathBuf,
    pub matches: PathBuf,
    pub availability: PathBuf,
    pub eval: EvalParams,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Deserialize)]
struct MatchesFile {
    scenes: BTreeMap<String, BTreeMap<usize, Vec<MatchRecord>>>,
}

pub fn cmd_trajectory(args: &TrajectoryArgs) -> CliResult<perception_perf::trajectory::DeviationReport> {
    let scene = load_scene_input(&args.scene)?;
    let matches: MatchesFile = serde_json::from_str(&read_text(&args.matches)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.matches.display())))?;
    let report: AvailabilityReport = serde_json::from_str(&read_text(&args.availability)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.availability.display())))?;
    let scene_matches = matches.scenes.get(&scene.scene_id).ok_or_else(|| {
        CliError::Data(format!("no matches for scene {} in {}", scene.scene_id, args.matches.display()))
    })?;
    let dropped = report
        .dropped_frames
        .iter()
        .filter(|d| d.scene_id == scene.scene_id)
        .map(|d| d.frame_index)
        .collect();
    let dev = evaluate(&scene, scene_matches, &dropped, &args.eval)?;
    let stamp = stamp_for(
        &json!({
            "command": "trajectory",
            "scene": scene.scene_id,
            "eval": args.eval,
            "dropped": dropped,
        }),
        args.seed,
    );
    write_csv_with(&args.out.join("deviations.csv"), |b| dev.write_csv(b, Some(&stamp.comment())))?;
    write_json(&args.out.join("deviations.json"), &stamp, &dev)?;
    Ok(dev)
}

pub struct StatsArgs {
    pub baseline: PathBuf,
    pub variant: PathBuf,
    pub column: String,
    pub alternative: Alternative,
    pub moving_only: bool,
}

type Keyed = Vec<((String, String), f64)>;

fn read_column(path: &Path, column: &str, moving_only: bool) -> CliResult<Keyed> {
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let value = col(column)
        .ok_or_else(|| CliError::Data(format!("{}: no column `{column}`", path.display())))?;
    let scene = col("scene_id");
    let key = col("frame_index")
        .or_else(|| col("obstacle_id"))
        .ok_or_else(|| CliError::Data(format!("{}: no frame_index or obstacle_id column", path.display())))?;
    let moving = col("moving");
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if moving_only && moving.is_some_and(|m| &rec[m] != "true") {
            continue;
        }
        let v: f64 = rec[value]
            .parse()
            .map_err(|e| CliError::Data(format!("{}: `{}`: {e}", path.display(), &rec[value])))?;
        let s = scene.map(|i| rec[i].to_string()).unwrap_or_default();
        out.push(((s, rec[key].to_string()), v));
    }
    Ok(out)
}

pub fn cmd_stats(args: &StatsArgs) -> CliResult<Comparison> {
    let base = read_column(&args.baseline, &args.column, args.moving_only)?;
    let var: BTreeMap<_, _> = read_column(&args.variant, &args.column, args.moving_only)?
        .into_iter()
        .collect();
    if var.len() != base.len() {
        return Err(CliError::Data(format!(
            "baseline has {} rows, variant {}",
            base.len(),
            var.len()
        )));
    }
    let mut b = Vec::with_capacity(base.len());
    let mut v = Vec::with_capacity(base.len());
    for (k, x) in base {
        let y = var
            .get(&k)
            .ok_or_else(|| CliError::Data(format!("variant lacks row {}/{}", k.0, k.1)))?;
        b.push(x);
        v.push(*y);
    }
    paired_comparison(b, v, args.alternative)
}

/// Renders a run summary as a fixed-width table.
pub fn cmd_report(run_dir: &Path) -> CliResult<String> {
    let path = run_dir.join("summary.json");
    let s: RunSummary = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let opt = |v: Option<f64>, prec: usize| v.map_or("-".to_string(), |x| format!("{x:.prec$}"));
    let mut out = format!("config {}  seed {}\n", s.config_sha256, s.seed);
    if !s.variants.is_empty() {
        out.push_str(&format!(
            "{:<20} {:>7} {:>10} {:>8} {:>8} {:>9} {:>9} {:>9} {:>10} {:>7}\n",
            "variant", "frames", "lat_ms", "det", "drop", "d_drop", "ade_m", "fde_m", "p_lat", "delta"
        ));
        for v in &s.variants {
            let (p, d) = match v.stats.as_ref().and_then(|m| m.get("latency_ms")) {
                Some(Comparison::Tested(t)) => (format!("{:.3e}", t.p_value), format!("{:.3}", t.delta)),
                Some(Comparison::Skipped { .. }) => ("n/a".into(), "n/a".into()),
                None => ("-".into(), "-".into()),
            };
            out.push_str(&format!(
                "{:<20} {:>7} {:>10} {:>8} {:>8} {:>9} {:>9} {:>9} {:>10} {:>7}\n",
                v.name,
                v.frames,
                opt(v.mean_latency_ms, 2),
                opt(v.mean_detections, 2),
                opt(v.drop_fraction, 4),
                opt(v.drop_fraction_delta, 4),
                opt(v.moving_mean_ade_m, 4),
                opt(v.moving_mean_fde_m, 4),
                p,
                d
            ));
        }
    }
    if !s.simulations.is_empty() {
        out.push_str(&format!(
            "\n{:<22} {:<11} {:<6} {:>10} {:>8} {:>12} {:>12} {:>8}\n",
            "config", "mode", "node", "X", "U", "P", "S_s", "drop"
        ));
        for m in &s.simulations {
            let mode = match m.mode {
                CapacityMode::Unbounded => "unbounded",
                CapacityMode::KeepLatest => "keep-latest",
            };
            for n in &m.nodes {
                out.push_str(&format!(
                    "{:<22} {:<11} {:<6} {:>10.4} {:>8.4} {:>12.4} {:>12} {:>8.4}\n",
                    m.model,
                    mode,
                    n.node.to_string(),
                    n.throughput,
                    n.utilization,
                    n.population,
                    opt(n.sojourn_s, 4),
                    n.drop_fraction()
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FixtureKind {
    Street,
    Mover,
}

pub struct FixtureArgs {
    pub kind: FixtureKind,
    pub scene_id: String,
    pub seed: u64,
    pub frames: usize,
    pub rate: f64,
    pub speed: f64,
    pub out: PathBuf,
}

pub fn cmd_fixture(args: &FixtureArgs) -> CliResult<Scene> {
    let scene = match args.kind {
        FixtureKind::Street => generate(&street_scene_spec(&args.scene_id, args.seed)),
        FixtureKind::Mover => {
            if args.frames == 0 || !(args.rate > 0.0) {
                return Err(CliError::Data("frames and rate must be positive".into()));
            }
            single_mover(&args.scene_id, args.frames, args.rate, args.speed, args.seed)
        }
    };
    scene.validate()?;
    let stamp = stamp_for(
        &json!({
            "command": "fixture",
            "kind": args.kind,
            "scene_id": args.scene_id,
            "frames": args.frames,
            "rate": args.rate,
            "speed": args.speed,
        }),
        args.seed,
    );
    write_scene(&args.out, &scene, &stamp)?;
    Ok(scene)
}
