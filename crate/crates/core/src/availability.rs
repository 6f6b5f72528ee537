//! Per-frame delay and dropped-frame estimation from latency traces.
//!
//! A frame's delay is the part of its latency exceeding one sensor period.
//! Dropped frames follow an accumulate-and-fire rule: delay accumulates frame
//! by frame; once the accumulator reaches the threshold, the current frame is
//! dropped and the accumulator is reduced by the threshold (the dropped
//! frame's own delay is not added). The accumulator restarts at each scene.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::LatencyTrace;
use crate::format::sig9;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRecord {
    pub scene_id: String,
    pub frame_index: usize,
    pub delay_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayTrace {
    pub records: Vec<DelayRecord>,
}

/// One frame period in milliseconds.
pub fn frame_budget_ms(sensor_rate_hz: f64) -> f64 {
    1000.0 / sensor_rate_hz
}

pub fn compute_delays(trace: &LatencyTrace, sensor_rate_hz: f64) -> Result<DelayTrace> {
    if !(sensor_rate_hz.is_finite() && sensor_rate_hz > 0.0) {
        return Err(Error::Parameter(format!(
            "sensor rate must be positive, got {sensor_rate_hz}"
        )));
    }
    let budget = frame_budget_ms(sensor_rate_hz);
    Ok(DelayTrace {
        records: trace
            .records
            .iter()
            .map(|r| DelayRecord {
                scene_id: r.scene_id.clone(),
                frame_index: r.frame_index,
                delay_ms: (r.latency_ms - budget).max(0.0),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedFrame {
    pub scene_id: String,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAvailability {
    pub scene_id: String,
    pub frames: usize,
    pub dropped: usize,
    pub drop_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityReport {
    pub threshold_ms: f64,
    pub total_frames: usize,
    pub dropped_frames: Vec<DroppedFrame>,
    /// `None` for an empty trace.
    pub drop_fraction: Option<f64>,
    pub per_scene: Vec<SceneAvailability>,
}

impl AvailabilityReport {
    /// Dropped frame indices grouped by scene.
    pub fn dropped_by_scene(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for d in &self.dropped_frames {
            m.entry(d.scene_id.as_str()).or_default().push(d.frame_index);
        }
        m
    }

    /// `scene_id,frame_index` rows of the dropped frames.
    pub fn write_csv<W: Write>(&self, w: W, comment: Option<&str>) -> Result<()> {
        let mut w = w;
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io("<csv>", e))?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scene_id", "frame_index"])?;
        for d in &self.dropped_frames {
            out.write_record([d.scene_id.clone(), d.frame_index.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn compute_dropped_frames(delays: &DelayTrace, threshold_ms: f64) -> Result<AvailabilityReport> {
    if !(threshold_ms.is_finite() && threshold_ms > 0.0) {
        return Err(Error::Parameter(format!(
            "threshold must be positive, got {threshold_ms}"
        )));
    }
    let mut accumulated = 0.0;
    let mut dropped = Vec::new();
    let mut per_scene: Vec<SceneAvailability> = Vec::new();
    let mut current: Option<&str> = None;
    for r in &delays.records {
        if current != Some(r.scene_id.as_str()) {
            current = Some(r.scene_id.as_str());
            accumulated = 0.0;
            per_scene.push(SceneAvailability {
                scene_id: r.scene_id.clone(),
                frames: 0,
                dropped: 0,
                drop_fraction: 0.0,
            });
        }
        let scene = per_scene.last_mut().unwrap();
        scene.frames += 1;
        if accumulated >= threshold_ms {
            accumulated = (accumulated - threshold_ms).max(0.0);
            dropped.push(DroppedFrame {
                scene_id: r.scene_id.clone(),
                frame_index: r.frame_index,
            });
            scene.dropped += 1;
        } else {
            accumulated += r.delay_ms;
        }
    }
    for s in &mut per_scene {
        s.drop_fraction = s.dropped as f64 / s.frames as f64;
    }
    let total = delays.records.len();
    Ok(AvailabilityReport {
        threshold_ms,
        total_frames: total,
        drop_fraction: (total > 0).then(|| dropped.len() as f64 / total as f64),
        dropped_frames: dropped,
        per_scene,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAvailability {
    pub variant: String,
    pub frames: usize,
    pub dropped: usize,
    /// `None` when the variant's trace was empty.
    pub drop_fraction: Option<f64>,
    /// Difference to the baseline's drop fraction; `None` when either side
    /// is undefined.
    pub delta_vs_baseline: Option<f64>,
}

/// Compares each variant's drop fraction with the baseline's.
pub fn availability_summary(
    baseline: &AvailabilityReport,
    variants: &[(String, AvailabilityReport)],
) -> Vec<VariantAvailability> {
    variants
        .iter()
        .map(|(name, r)| VariantAvailability {
            variant: name.clone(),
            frames: r.total_frames,
            dropped: r.dropped_frames.len(),
            drop_fraction: r.drop_fraction,
            delta_vs_baseline: match (r.drop_fraction, baseline.drop_fraction) {
                (Some(v), Some(b)) => Some(v - b),
                _ => None,
            },
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(
    rows: &[VariantAvailability],
    w: W,
    comment: Option<&str>,
) -> Result<()> {
    let mut w = w;
    if let Some(c) = comment {
        writeln!(w, "# {c}").map_err(|e| Error::io("<csv>", e))?;
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "frames", "dropped", "drop_fraction", "delta_vs_baseline"])?;
    let opt = |v: Option<f64>| v.map(sig9).unwrap_or_else(|| "NA".into());
    for r in rows {
        out.write_record([
            r.variant.clone(),
            r.frames.to_string(),
            r.dropped.to_string(),
            opt(r.drop_fraction),
            opt(r.delta_vs_baseline),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
