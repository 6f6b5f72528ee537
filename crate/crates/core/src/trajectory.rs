//! Obstacle histories, deviation transfer, frame dropping, a constant-velocity
//! predictor and ADE/FDE.
//!
//! Frame-indexed obstacle sets ("schema A") are regrouped into per-obstacle
//! histories ("schema B"). Detection deviations are written into the
//! histories, dropped frames are replaced by the previous frame's values, and
//! the predictions made with and without drops are compared.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::MatchRecord;
use crate::format::sig9;
use crate::scene::ObstacleAnnotation;
use crate::{Error, Result};

pub const DEFAULT_HORIZON: usize = 6;
pub const DEFAULT_STEP_DT_S: f64 = 0.5;
pub const DEFAULT_FIT_WINDOW: usize = 4;
pub const DEFAULT_MOVING_THRESHOLD_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleState {
    pub obstacle_id: String,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Obstacles present in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObstacles {
    pub frame_index: usize,
    pub obstacles: Vec<ObstacleState>,
}

impl FrameObstacles {
    /// Ground-truth obstacles of a frame; injected obstacles are skipped.
    pub fn from_annotations(frame_index: usize, annotations: &[ObstacleAnnotation]) -> Self {
        Self {
            frame_index,
            obstacles: annotations
                .iter()
                .filter(|a| !a.synthetic)
                .map(|a| ObstacleState {
                    obstacle_id: a.obstacle_id.clone(),
                    x: a.bbox.center[0],
                    y: a.bbox.center[1],
                    yaw: a.bbox.yaw,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistorySample {
    pub frame_index: usize,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub present: bool,
}

impl HistorySample {
    fn copy_pose_from(&mut self, other: &HistorySample) {
        self.x = other.x;
        self.y = other.y;
        self.yaw = other.yaw;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleHistory {
    pub obstacle_id: String,
    pub samples: Vec<HistorySample>,
}

/// Regroups frames into one history per obstacle, spanning its first to
/// last appearance. Frames where it is missing get `present = false` and
/// hold the last seen pose.
pub fn convert_schema(frames: &[FrameObstacles]) -> Vec<ObstacleHistory> {
    let mut sorted: Vec<&FrameObstacles> = frames.iter().collect();
    sorted.sort_by_key(|f| f.frame_index);
    let mut seen: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for f in &sorted {
        for o in &f.obstacles {
            let e = seen
                .entry(o.obstacle_id.as_str())
                .or_insert((f.frame_index, f.frame_index));
            e.1 = f.frame_index;
        }
    }
    seen.into_iter()
        .map(|(id, (first, last))| {
            let mut samples: Vec<HistorySample> = Vec::with_capacity(last - first + 1);
            for fi in first..=last {
                let state = sorted
                    .iter()
                    .find(|f| f.frame_index == fi)
                    .and_then(|f| f.obstacles.iter().find(|o| o.obstacle_id == id));
                let sample = match state {
                    Some(o) => HistorySample {
                        frame_index: fi,
                        x: o.x,
                        y: o.y,
                        yaw: o.yaw,
                        present: true,
                    },
                    None => {
                        let prev = samples.last().expect("history starts at a present frame");
                        HistorySample {
                            frame_index: fi,
                            present: false,
                            ..*prev
                        }
                    }
                };
                samples.push(sample);
            }
            ObstacleHistory {
                obstacle_id: id.to_string(),
                samples,
            }
        })
        .collect()
}

/// Inverse of [`convert_schema`]: present samples regrouped by frame, for
/// each index in `frame_indices`, obstacles sorted by id.
pub fn regroup_by_frame(histories: &[ObstacleHistory], frame_indices: &[usize]) -> Vec<FrameObstacles> {
    frame_indices
        .iter()
        .map(|&fi| {
            let mut obstacles: Vec<ObstacleState> = histories
                .iter()
                .filter_map(|h| {
                    h.samples
                        .iter()
                        .find(|s| s.frame_index == fi && s.present)
                        .map(|s| ObstacleState {
                            obstacle_id: h.obstacle_id.clone(),
                            x: s.x,
                            y: s.y,
                            yaw: s.yaw,
                        })
                })
                .collect();
            obstacles.sort_by(|a, b| a.obstacle_id.cmp(&b.obstacle_id));
            FrameObstacles {
                frame_index: fi,
                obstacles,
            }
        })
        .collect()
}

enum Status {
    Detected([f64; 2]),
    Undetected,
}

/// Writes detection deviations into the histories.
///
/// Matched frames are shifted by the detection displacement. Frames where
/// the obstacle went undetected (or was absent) repeat the previous adjusted
/// pose; leading undetected frames take the first detected pose. An obstacle
/// never detected stays at its first pose. Frames with no match record for
/// the obstacle are left as ground truth.
pub fn transfer_deviations(
    histories: &[ObstacleHistory],
    matches: &BTreeMap<usize, Vec<MatchRecord>>,
) -> Vec<ObstacleHistory> {
    histories
        .iter()
        .map(|h| {
            let status: Vec<Status> = h
                .samples
                .iter()
                .map(|s| {
                    if !s.present {
                        return Status::Undetected;
                    }
                    let rec = matches
                        .get(&s.frame_index)
                        .and_then(|ms| ms.iter().find(|m| m.gt_id == h.obstacle_id));
                    match rec {
                        Some(MatchRecord {
                            detection: None, ..
                        }) => Status::Undetected,
                        Some(m) => Status::Detected(m.displacement),
                        None => Status::Detected([0.0, 0.0]),
                    }
                })
                .collect();
            let mut samples = h.samples.clone();
            let Some(first) = status.iter().position(|s| matches!(s, Status::Detected(_))) else {
                let anchor = samples[0];
                for s in &mut samples {
                    s.copy_pose_from(&anchor);
                }
                return ObstacleHistory {
                    obstacle_id: h.obstacle_id.clone(),
                    samples,
                };
            };
            for i in first..samples.len() {
                match status[i] {
                    Status::Detected([dx, dy]) => {
                        samples[i].x += dx;
                        samples[i].y += dy;
                    }
                    Status::Undetected => {
                        let prev = samples[i - 1];
                        samples[i].copy_pose_from(&prev);
                    }
                }
            }
            let anchor = samples[first];
            for s in &mut samples[..first] {
                s.copy_pose_from(&anchor);
            }
            ObstacleHistory {
                obstacle_id: h.obstacle_id.clone(),
                samples,
            }
        })
        .collect()
}

/// Replaces each dropped frame's pose with the previous frame's (after its
/// own replacement). A dropped first sample keeps its pose, so an obstacle
/// whose frames are all dropped is frozen at its first pose.
pub fn apply_frame_drops(histories: &[ObstacleHistory], dropped: &BTreeSet<usize>) -> Vec<ObstacleHistory> {
    histories
        .iter()
        .map(|h| {
            let mut samples = h.samples.clone();
            for i in 1..samples.len() {
                if dropped.contains(&samples[i].frame_index) {
                    let prev = samples[i - 1];
                    samples[i].copy_pose_from(&prev);
                }
            }
            ObstacleHistory {
                obstacle_id: h.obstacle_id.clone(),
                samples,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub horizon: usize,
    pub step_dt: f64,
    /// Number of trailing samples used for the velocity fit.
    pub fit_window: usize,
}

impl Default for PredictorParams {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            step_dt: DEFAULT_STEP_DT_S,
            fit_window: DEFAULT_FIT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub obstacle_id: String,
    pub horizon: usize,
    pub step_dt: f64,
    pub waypoints: Vec<[f64; 2]>,
}

/// Constant-velocity extrapolation from the last sample, with velocity the
/// least-squares slope over the trailing `fit_window` samples. Sample times
/// are `frame_index * frame_dt`.
pub fn predict(
    history: &ObstacleHistory,
    params: &PredictorParams,
    frame_dt: f64,
) -> Result<TrajectoryPrediction> {
    if history.samples.is_empty() {
        return Err(Error::Parameter(format!(
            "history of {} is empty",
            history.obstacle_id
        )));
    }
    if params.horizon == 0 || params.fit_window == 0 {
        return Err(Error::Parameter("horizon and fit window must be positive".into()));
    }
    let n = history.samples.len();
    let window = &history.samples[n.saturating_sub(params.fit_window)..];
    let t: Vec<f64> = window.iter().map(|s| s.frame_index as f64 * frame_dt).collect();
    let m = window.len() as f64;
    let t_mean = t.iter().sum::<f64>() / m;
    let x_mean = window.iter().map(|s| s.x).sum::<f64>() / m;
    let y_mean = window.iter().map(|s| s.y).sum::<f64>() / m;
    let stt: f64 = t.iter().map(|ti| (ti - t_mean).powi(2)).sum();
    let (vx, vy) = if stt > 0.0 {
        let sxt: f64 = window.iter().zip(&t).map(|(s, ti)| (ti - t_mean) * (s.x - x_mean)).sum();
        let syt: f64 = window.iter().zip(&t).map(|(s, ti)| (ti - t_mean) * (s.y - y_mean)).sum();
        (sxt / stt, syt / stt)
    } else {
        (0.0, 0.0)
    };
    let last = window.last().unwrap();
    let waypoints = (1..=params.horizon)
        .map(|i| {
            let dt = i as f64 * params.step_dt;
            [last.x + vx * dt, last.y + vy * dt]
        })
        .collect();
    Ok(TrajectoryPrediction {
        obstacle_id: history.obstacle_id.clone(),
        horizon: params.horizon,
        step_dt: params.step_dt,
        waypoints,
    })
}

/// Average and final displacement between two predictions.
pub fn ade_fde(a: &TrajectoryPrediction, b: &TrajectoryPrediction) -> Result<(f64, f64)> {
    if a.waypoints.len() != b.waypoints.len() || a.waypoints.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "prediction horizons differ or are empty: {} vs {}",
            a.waypoints.len(),
            b.waypoints.len()
        )));
    }
    let d: Vec<f64> = a
        .waypoints
        .iter()
        .zip(&b.waypoints)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, *d.last().unwrap()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleDeviation {
    pub scene_id: String,
    pub obstacle_id: String,
    pub moving: bool,
    pub ade_m: f64,
    pub fde_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub rows: Vec<ObstacleDeviation>,
    pub moving_count: usize,
    /// Means over moving obstacles only; `None` when there are none.
    pub moving_mean_ade_m: Option<f64>,
    pub moving_mean_fde_m: Option<f64>,
}

impl DeviationReport {
    pub fn from_rows(rows: Vec<ObstacleDeviation>) -> Self {
        let moving: Vec<&ObstacleDeviation> = rows.iter().filter(|r| r.moving).collect();
        let n = moving.len();
        let mean = |f: fn(&ObstacleDeviation) -> f64| {
            (n > 0).then(|| moving.iter().map(|r| f(r)).sum::<f64>() / n as f64)
        };
        Self {
            moving_count: n,
            moving_mean_ade_m: mean(|r| r.ade_m),
            moving_mean_fde_m: mean(|r| r.fde_m),
            rows,
        }
    }

    pub fn merge(reports: impl IntoIterator<Item = DeviationReport>) -> Self {
        Self::from_rows(reports.into_iter().flat_map(|r| r.rows).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W, comment: Option<&str>) -> Result<()> {
        let mut w = w;
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io("<csv>", e))?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scene_id", "obstacle_id", "moving", "ade_m", "fde_m"])?;
        for r in &self.rows {
            out.write_record([
                r.scene_id.clone(),
                r.obstacle_id.clone(),
                r.moving.to_string(),
                sig9(r.ade_m),
                sig9(r.fde_m),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub predictor: PredictorParams,
    pub moving_threshold_m: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            predictor: PredictorParams::default(),
            moving_threshold_m: DEFAULT_MOVING_THRESHOLD_M,
        }
    }
}

/// Everything needed to score one scene of one variant.
#[derive(Debug, Clone)]
pub struct SceneEvaluation<'a> {
    pub scene_id: &'a str,
    /// Ground truth as adjusted by the variant's mutation.
    pub frames: &'a [FrameObstacles],
    pub matches: &'a BTreeMap<usize, Vec<MatchRecord>>,
    pub dropped: &'a BTreeSet<usize>,
    pub frame_dt: f64,
}

/// Per obstacle: ADE/FDE between predictions from the deviation-adjusted
/// history with and without the dropped frames.
pub fn evaluate_scene(input: &SceneEvaluation<'_>, params: &EvalParams) -> Result<DeviationReport> {
    let gt = convert_schema(input.frames);
    let adjusted = transfer_deviations(&gt, input.matches);
    let with_drops = apply_frame_drops(&adjusted, input.dropped);
    let mut rows = Vec::with_capacity(gt.len());
    for ((truth, reference), dropped) in gt.iter().zip(&adjusted).zip(&with_drops) {
        let p_ref = predict(reference, &params.predictor, input.frame_dt)?;
        let p_drop = predict(dropped, &params.predictor, input.frame_dt)?;
        let (ade, fde) = ade_fde(&p_ref, &p_drop)?;
        let present: Vec<&HistorySample> = truth.samples.iter().filter(|s| s.present).collect();
        let (a, b) = (present[0], present[present.len() - 1]);
        let travelled = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        rows.push(ObstacleDeviation {
            scene_id: input.scene_id.to_string(),
            obstacle_id: truth.obstacle_id.clone(),
            moving: travelled >= params.moving_threshold_m,
            ade_m: ade,
            fde_m: fde,
        });
    }
    Ok(DeviationReport::from_rows(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line_history(n: usize, vx: f64, frame_dt: f64) -> ObstacleHistory {
        ObstacleHistory {
            obstacle_id: "a".into(),
            samples: (0..n)
                .map(|i| HistorySample {
                    frame_index: i,
                    x: vx * i as f64 * frame_dt,
                    y: 1.0,
                    yaw: 0.0,
                    present: true,
                })
                .collect(),
        }
    }

    #[test]
    fn straight_line_prediction() {
        let h = line_history(10, 2.0, 0.05);
        let p = predict(&h, &PredictorParams::default(), 0.05).unwrap();
        let last = 2.0 * 9.0 * 0.05;
        for (i, w) in p.waypoints.iter().enumerate() {
            assert_abs_diff_eq!(w[0] - last, (i + 1) as f64, epsilon = 1e-9);
            assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn stationary_and_single_sample() {
        let h = line_history(5, 0.0, 0.05);
        let p = predict(&h, &PredictorParams::default(), 0.05).unwrap();
        assert!(p.waypoints.iter().all(|w| *w == [0.0, 1.0]));
        let one = line_history(1, 3.0, 0.05);
        let p = predict(&one, &PredictorParams::default(), 0.05).unwrap();
        assert!(p.waypoints.iter().all(|w| *w == [0.0, 1.0]));
        let empty = ObstacleHistory {
            obstacle_id: "e".into(),
            samples: vec![],
        };
        assert!(predict(&empty, &PredictorParams::default(), 0.05).is_err());
    }

    #[test]
    fn frozen_tail_slows_prediction() {
        let h = line_history(10, 2.0, 0.05);
        let dropped = apply_frame_drops(&[h.clone()], &[8, 9].into_iter().collect());
        let params = PredictorParams::default();
        let a = predict(&h, &params, 0.05).unwrap();
        let b = predict(&dropped[0], &params, 0.05).unwrap();
        let va = a.waypoints[1][0] - a.waypoints[0][0];
        let vb = b.waypoints[1][0] - b.waypoints[0][0];
        assert!(vb < va);
        let (ade, fde) = ade_fde(&a, &b).unwrap();
        assert!(ade > 0.0 && fde > 0.0);
    }

    fn pred(points: Vec<[f64; 2]>) -> TrajectoryPrediction {
        TrajectoryPrediction {
            obstacle_id: "p".into(),
            horizon: points.len(),
            step_dt: 0.5,
            waypoints: points,
        }
    }

    #[test]
    fn ade_fde_examples() {
        let base: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 0.0]).collect();
        let a = pred(base.clone());
        assert_eq!(ade_fde(&a, &a).unwrap(), (0.0, 0.0));
        let b = pred(base.iter().map(|p| [p[0], 0.3]).collect());
        let (ade, fde) = ade_fde(&a, &b).unwrap();
        assert_abs_diff_eq!(ade, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(fde, 0.3, epsilon = 1e-12);
        let c = pred(base.iter().enumerate().map(|(i, p)| [p[0], 0.1 * (i + 1) as f64]).collect());
        let (ade, fde) = ade_fde(&a, &c).unwrap();
        assert_abs_diff_eq!(ade, 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(fde, 0.6, epsilon = 1e-12);
        assert!(ade_fde(&a, &pred(base[..5].to_vec())).is_err());
    }

    #[test]
    fn drop_rules() {
        let h = line_history(10, 2.0, 0.05);
        assert_eq!(apply_frame_drops(&[h.clone()], &BTreeSet::new())[0], h);
        let d = apply_frame_drops(&[h.clone()], &[5].into_iter().collect());
        assert_eq!((d[0].samples[5].x, d[0].samples[5].y), (h.samples[4].x, h.samples[4].y));
        assert_eq!(d[0].samples[6], h.samples[6]);
        let all: BTreeSet<usize> = (0..10).collect();
        let d = apply_frame_drops(&[h.clone()], &all);
        assert!(d[0].samples.iter().all(|s| s.x == h.samples[0].x && s.y == h.samples[0].y));
    }

    #[test]
    fn schema_conversion_marks_absence() {
        let st = |id: &str, x: f64| ObstacleState {
            obstacle_id: id.into(),
            x,
            y: 0.0,
            yaw: 0.0,
        };
        let frames = vec![
            FrameObstacles {
                frame_index: 0,
                obstacles: vec![st("a", 0.0)],
            },
            FrameObstacles {
                frame_index: 1,
                obstacles: vec![],
            },
            FrameObstacles {
                frame_index: 2,
                obstacles: vec![st("a", 2.0)],
            },
        ];
        let h = convert_schema(&frames);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].samples.len(), 3);
        assert!(!h[0].samples[1].present);
        assert_eq!(h[0].samples[1].x, 0.0);
        assert_eq!(regroup_by_frame(&h, &[0, 1, 2]), frames);
    }

    fn record(id: &str, detected: bool, d: [f64; 2]) -> MatchRecord {
        MatchRecord {
            gt_id: id.into(),
            detection: detected.then_some(0),
            iou: if detected { 1.0 } else { 0.0 },
            displacement: d,
        }
    }

    #[test]
    fn deviation_transfer_rules() {
        let h = line_history(5, 2.0, 0.05);
        let zero: BTreeMap<usize, Vec<MatchRecord>> =
            (0..5).map(|i| (i, vec![record("a", true, [0.0, 0.0])])).collect();
        assert_eq!(transfer_deviations(&[h.clone()], &zero)[0], h);

        let shifted: BTreeMap<usize, Vec<MatchRecord>> =
            (0..5).map(|i| (i, vec![record("a", true, [0.5, 0.0])])).collect();
        let out = transfer_deviations(&[h.clone()], &shifted);
        for (a, b) in out[0].samples.iter().zip(&h.samples) {
            assert_eq!(a.x, b.x + 0.5);
            assert_eq!(a.y, b.y);
        }

        let mut miss = zero.clone();
        miss.insert(3, vec![record("a", false, [0.0, 0.0])]);
        let out = transfer_deviations(&[h.clone()], &miss);
        assert_eq!(out[0].samples[3].x, out[0].samples[2].x);

        let mut lead = zero.clone();
        lead.insert(0, vec![record("a", false, [0.0, 0.0])]);
        lead.insert(1, vec![record("a", false, [0.0, 0.0])]);
        let out = transfer_deviations(&[h.clone()], &lead);
        assert_eq!(out[0].samples[0].x, h.samples[2].x);
        assert_eq!(out[0].samples[1].x, h.samples[2].x);

        let never: BTreeMap<usize, Vec<MatchRecord>> =
            (0..5).map(|i| (i, vec![record("a", false, [0.0, 0.0])])).collect();
        let out = transfer_deviations(&[h.clone()], &never);
        assert!(out[0].samples.iter().all(|s| s.x == h.samples[0].x));
    }
}
