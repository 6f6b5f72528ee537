//! Stage functions shared by the subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use perception_perf::availability::{
    availability_summary, compute_delays, compute_dropped_frames, AvailabilityReport, DelayTrace,
};
use perception_perf::detector::{detect, match_detections, DetectorParams, LatencyRecord, LatencyTrace, MatchRecord};
use perception_perf::mutators::{mutate_scene, MutationResult, MutationSpec, Provenance};
use perception_perf::scene::{load_scene, Scene};
use perception_perf::stats::{compare, Alternative, PairedSample, TestResult};
use perception_perf::trajectory::{evaluate_scene, DeviationReport, EvalParams, FrameObstacles, SceneEvaluation};
use perception_perf::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn load_scene_input(path: &Path) -> CliResult<Scene> {
    load_scene(path).map_err(|e| CliError::input(format!("scene {}", path.display()), e))
}

/// Frame-level provenance records of one mutated scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameProvenance {
    pub frame_index: usize,
    pub points_added: usize,
    pub records: Vec<Provenance>,
}

/// A scene after an optional mutation, with the ground truth it is scored
/// against.
pub struct PreparedScene {
    pub scene: Scene,
    pub provenance: Vec<FrameProvenance>,
}

pub fn prepare(scene: &Scene, spec: Option<&MutationSpec>) -> CliResult<PreparedScene> {
    let Some(spec) = spec else {
        return Ok(PreparedScene {
            scene: scene.clone(),
            provenance: Vec::new(),
        });
    };
    let results: Vec<MutationResult> = mutate_scene(scene, spec)?;
    let provenance = results
        .iter()
        .map(|r| FrameProvenance {
            frame_index: r.mutated_frame.frame_index,
            points_added: r.total_points_added(),
            records: r.provenance.clone(),
        })
        .collect();
    Ok(PreparedScene {
        scene: perception_perf::mutators::apply_to_scene(scene, &results),
        provenance,
    })
}

/// Detection output of one scene.
pub struct SceneDetections {
    pub records: Vec<LatencyRecord>,
    pub matches: BTreeMap<usize, Vec<MatchRecord>>,
}

pub fn detect_scene(scene: &Scene, params: &DetectorParams, iou_threshold: f64) -> CliResult<SceneDetections> {
    let mut records = Vec::with_capacity(scene.frames.len());
    let mut matches = BTreeMap::new();
    for frame in &scene.frames {
        let (dets, latency_ms) = detect(frame, params)?;
        let gt: Vec<_> = frame.gt_annotations().cloned().collect();
        matches.insert(frame.frame_index, match_detections(&dets, &gt, iou_threshold)?);
        records.push(LatencyRecord {
            scene_id: frame.scene_id.clone(),
            frame_index: frame.frame_index,
            latency_ms,
            detection_count: dets.len(),
        });
    }
    Ok(SceneDetections { records, matches })
}

/// Delays per scene, each at its own sensor rate.
pub fn delays_for(trace: &LatencyTrace, rates: &BTreeMap<String, f64>) -> CliResult<DelayTrace> {
    let mut out = DelayTrace::default();
    for rec in &trace.records {
        let rate = rates
            .get(&rec.scene_id)
            .copied()
            .ok_or_else(|| CliError::Data(format!("no sensor rate for scene {}", rec.scene_id)))?;
        let one = LatencyTrace {
            records: vec![rec.clone()],
        };
        out.records.extend(compute_delays(&one, rate)?.records);
    }
    Ok(out)
}

pub fn frames_of(scene: &Scene) -> Vec<FrameObstacles> {
    scene
        .frames
        .iter()
        .map(|f| FrameObstacles::from_annotations(f.frame_index, &f.annotations))
        .collect()
}

pub fn evaluate(
    scene: &Scene,
    matches: &BTreeMap<usize, Vec<MatchRecord>>,
    dropped: &BTreeSet<usize>,
    params: &EvalParams,
) -> CliResult<DeviationReport> {
    let frames = frames_of(scene);
    Ok(evaluate_scene(
        &SceneEvaluation {
            scene_id: &scene.scene_id,
            frames: &frames,
            matches,
            dropped,
            frame_dt: scene.frame_period(),
        },
        params,
    )?)
}

/// Outcome of one paired comparison; degenerate samples are reported, not
/// treated as failures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Comparison {
    Tested(TestResult),
    Skipped { skipped: String },
}

pub fn paired_comparison(baseline: Vec<f64>, variant: Vec<f64>, alt: Alternative) -> CliResult<Comparison> {
    if baseline.is_empty() {
        return Ok(Comparison::Skipped {
            skipped: "no paired values".into(),
        });
    }
    let sample = PairedSample::new(baseline, variant)?;
    match compare(&sample, alt) {
        Ok(r) => Ok(Comparison::Tested(r)),
        Err(CoreError::Degenerate(m)) => Ok(Comparison::Skipped { skipped: m }),
        Err(e) => Err(e.into()),
    }
}

/// Everything computed for one variant across all scenes.
pub struct VariantOutcome {
    pub name: String,
    pub spec: Option<MutationSpec>,
    pub trace: LatencyTrace,
    pub availability: AvailabilityReport,
    pub deviations: DeviationReport,
    pub provenance: BTreeMap<String, Vec<FrameProvenance>>,
}

pub fn run_variant(
    name: &str,
    spec: Option<&MutationSpec>,
    scenes: &[Scene],
    detector: &DetectorParams,
    iou_threshold: f64,
    rates: &BTreeMap<String, f64>,
    threshold_ms: &dyn Fn(&str) -> f64,
    eval: &EvalParams,
) -> CliResult<VariantOutcome> {
    let mut trace = LatencyTrace::default();
    let mut prepared = Vec::with_capacity(scenes.len());
    let mut provenance = BTreeMap::new();
    for scene in scenes {
        let p = prepare(scene, spec)?;
        let d = detect_scene(&p.scene, detector, iou_threshold)?;
        trace.records.extend(d.records);
        if spec.is_some() {
            provenance.insert(scene.scene_id.clone(), p.provenance.clone());
        }
        prepared.push((p, d.matches));
    }
    trace.validate()?;

    // Availability runs per scene so each can use its own threshold; the
    // reports are then concatenated.
    let delays = delays_for(&trace, rates)?;
    let mut per_scene_reports = Vec::new();
    for scene in scenes {
        let part = DelayTrace {
            records: delays
                .records
                .iter()
                .filter(|r| r.scene_id == scene.scene_id)
                .cloned()
                .collect(),
        };
        per_scene_reports.push(compute_dropped_frames(&part, threshold_ms(&scene.scene_id))?);
    }
    let availability = concat_reports(per_scene_reports);

    let dropped = availability.dropped_by_scene();
    let mut reports = Vec::new();
    for (p, matches) in &prepared {
        let set: BTreeSet<usize> = dropped
            .get(p.scene.scene_id.as_str())
            .map(|v| v.iter().copied().collect())
            .unwrap_or_default();
        reports.push(evaluate(&p.scene, matches, &set, eval)?);
    }
    Ok(VariantOutcome {
        name: name.to_string(),
        spec: spec.copied(),
        trace,
        availability,
        deviations: DeviationReport::merge(reports),
        provenance,
    })
}

fn concat_reports(parts: Vec<AvailabilityReport>) -> AvailabilityReport {
    let threshold_ms = parts.first().map_or(0.0, |p| p.threshold_ms);
    let mut out = AvailabilityReport {
        threshold_ms,
        total_frames: 0,
        dropped_frames: Vec::new(),
        drop_fraction: None,
        per_scene: Vec::new(),
    };
    for p in parts {
        out.total_frames += p.total_frames;
        out.dropped_frames.extend(p.dropped_frames);
        out.per_scene.extend(p.per_scene);
    }
    out.drop_fraction =
        (out.total_frames > 0).then(|| out.dropped_frames.len() as f64 / out.total_frames as f64);
    out
}

/// Per-variant row of the run summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub mutation: Option<MutationSpec>,
    pub frames: usize,
    pub mean_latency_ms: Option<f64>,
    pub mean_detections: Option<f64>,
    pub points_added: usize,
    pub dropped_frames: usize,
    pub drop_fraction: Option<f64>,
    pub drop_fraction_delta: Option<f64>,
    pub moving_obstacles: usize,
    pub moving_mean_ade_m: Option<f64>,
    pub moving_mean_fde_m: Option<f64>,
    /// Paired comparisons against the baseline; absent for the baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<BTreeMap<String, Comparison>>,
}

pub fn summarize(outcomes: &[VariantOutcome], alt: Alternative) -> CliResult<Vec<VariantSummary>> {
    let base = &outcomes[0];
    let rows = availability_summary(
        &base.availability,
        &outcomes
            .iter()
            .map(|o| (o.name.clone(), o.availability.clone()))
            .collect::<Vec<_>>(),
    );
    let base_moving: BTreeMap<(&str, &str), (f64, f64)> = base
        .deviations
        .rows
        .iter()
        .filter(|r| r.moving)
        .map(|r| ((r.scene_id.as_str(), r.obstacle_id.as_str()), (r.ade_m, r.fde_m)))
        .collect();
    let mut out = Vec::new();
    for (o, row) in outcomes.iter().zip(rows) {
        let n = o.trace.records.len();
        let mean_det = (n > 0).then(|| {
            o.trace.records.iter().map(|r| r.detection_count as f64).sum::<f64>() / n as f64
        });
        let stats = if o.spec.is_none() {
            None
        } else {
            let mut m = BTreeMap::new();
            m.insert(
                "latency_ms".to_string(),
                paired_comparison(base.trace.latencies(), o.trace.latencies(), alt)?,
            );
            let mut ade = (Vec::new(), Vec::new());
            let mut fde = (Vec::new(), Vec::new());
            for r in &o.deviations.rows {
                if let Some(&(a, f)) = base_moving.get(&(r.scene_id.as_str(), r.obstacle_id.as_str())) {
                    ade.0.push(a);
                    ade.1.push(r.ade_m);
                    fde.0.push(f);
                    fde.1.push(r.fde_m);
                }
            }
            m.insert("ade_m".to_string(), paired_comparison(ade.0, ade.1, alt)?);
            m.insert("fde_m".to_string(), paired_comparison(fde.0, fde.1, alt)?);
            Some(m)
        };
        out.push(VariantSummary {
            name: o.name.clone(),
            mutation: o.spec,
            frames: n,
            mean_latency_ms: o.trace.mean_latency(),
            mean_detections: mean_det,
            points_added: o
                .provenance
                .values()
                .flat_map(|v| v.iter().map(|p| p.points_added))
                .sum(),
            dropped_frames: row.dropped,
            drop_fraction: row.drop_fraction,
            drop_fraction_delta: row.delta_vs_baseline,
            moving_obstacles: o.deviations.moving_count,
            moving_mean_ade_m: o.deviations.moving_mean_ade_m,
            moving_mean_fde_m: o.deviations.moving_mean_fde_m,
            stats,
        });
    }
    Ok(out)
}
