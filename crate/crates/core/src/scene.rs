//! Scene data model and the on-disk scene directory format.
//!
//! A scene directory holds `manifest.json` (scene id, frame rate, frame
//! count) and `frames/NNNNNN.json`, one record per frame. Points are stored
//! as a flat `[x, y, z, intensity, x, y, z, intensity, ...]` array.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use crate::geometry::{point_in_box, BoundingBox3D, Point3D};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleAnnotation {
    pub obstacle_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox3D,
    /// Set on obstacles injected by a mutation; these have no ground truth.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl ObstacleAnnotation {
    pub fn new(id: impl Into<String>, category: impl Into<String>, bbox: BoundingBox3D) -> Self {
        Self {
            obstacle_id: id.into(),
            category: category.into(),
            bbox,
            synthetic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub scene_id: String,
    pub frame_index: usize,
    pub timestamp: f64,
    pub points: Vec<Point3D>,
    pub annotations: Vec<ObstacleAnnotation>,
}

impl PointCloudFrame {
    pub fn validate(&self) -> Result<()> {
        if !self.timestamp.is_finite() {
            return Err(Error::Validation(format!(
                "frame {}: non-finite timestamp",
                self.frame_index
            )));
        }
        for p in &self.points {
            p.validate()
                .map_err(|e| Error::Validation(format!("frame {}: {e}", self.frame_index)))?;
        }
        let mut ids = BTreeSet::new();
        for a in &self.annotations {
            a.bbox.validate().map_err(|e| {
                Error::Validation(format!(
                    "frame {} obstacle {}: {e}",
                    self.frame_index, a.obstacle_id
                ))
            })?;
            if !ids.insert(a.obstacle_id.as_str()) {
                return Err(Error::Validation(format!(
                    "frame {}: duplicate obstacle id {}",
                    self.frame_index, a.obstacle_id
                )));
            }
        }
        Ok(())
    }

    /// Ground-truth annotations, excluding injected obstacles.
    pub fn gt_annotations(&self) -> impl Iterator<Item = &ObstacleAnnotation> {
        self.annotations.iter().filter(|a| !a.synthetic)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub frame_rate: f64,
    pub frames: Vec<PointCloudFrame>,
}

impl Scene {
    pub fn frame_period(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Validation(format!(
                "frame_rate must be positive, got {}",
                self.frame_rate
            )));
        }
        let period = self.frame_period();
        for (i, f) in self.frames.iter().enumerate() {
            if f.scene_id != self.scene_id {
                return Err(Error::Validation(format!(
                    "frame {i}: scene_id {} does not match scene {}",
                    f.scene_id, self.scene_id
                )));
            }
            f.validate()?;
            if i > 0 {
                let prev = &self.frames[i - 1];
                if f.frame_index != prev.frame_index + 1 {
                    return Err(Error::Validation(format!(
                        "frame_index not contiguous: {} follows {}",
                        f.frame_index, prev.frame_index
                    )));
                }
                let dt = f.timestamp - prev.timestamp;
                if dt <= 0.0 {
                    return Err(Error::Validation(format!(
                        "timestamps not strictly increasing at frame {}",
                        f.frame_index
                    )));
                }
                if (dt - period).abs() > 0.01 * period {
                    return Err(Error::Validation(format!(
                        "frame {}: interval {dt} s inconsistent with {} Hz",
                        f.frame_index, self.frame_rate
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Indices of the frame's points that belong to each annotated obstacle.
///
/// A point inside several boxes goes to the box with the nearest center
/// (ties: lexicographically smaller id). Every annotation gets an entry.
pub fn extract_obstacle_point_indices(frame: &PointCloudFrame) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = frame
        .annotations
        .iter()
        .map(|a| (a.obstacle_id.clone(), Vec::new()))
        .collect();
    if frame.annotations.is_empty() {
        return out;
    }
    for (i, p) in frame.points.iter().enumerate() {
        let mut best: Option<(&ObstacleAnnotation, f64)> = None;
        for a in &frame.annotations {
            if !point_in_box(p, &a.bbox) {
                continue;
            }
            let c = a.bbox.center;
            let d2 = (p.x - c[0]).powi(2) + (p.y - c[1]).powi(2) + (p.z - c[2]).powi(2);
            best = match best {
                None => Some((a, d2)),
                Some((b, bd)) => {
                    if d2 < bd || (d2 == bd && a.obstacle_id < b.obstacle_id) {
                        Some((a, d2))
                    } else {
                        Some((b, bd))
                    }
                }
            };
        }
        if let Some((a, _)) = best {
            out.get_mut(&a.obstacle_id).unwrap().push(i);
        }
    }
    out
}

pub fn extract_obstacle_points(frame: &PointCloudFrame) -> BTreeMap<String, Vec<Point3D>> {
    extract_obstacle_point_indices(frame)
        .into_iter()
        .map(|(id, idx)| (id, idx.into_iter().map(|i| frame.points[i]).collect()))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    scene_id: String,
    frame_rate: f64,
    frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_info: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    scene_id: String,
    frame_index: usize,
    timestamp: f64,
    points: Vec<f64>,
    annotations: Vec<ObstacleAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run_info: Option<serde_json::Value>,
}

fn frame_file_name(ordinal: usize) -> String {
    format!("{ordinal:06}.json")
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, frame: Option<usize>) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        frame,
        field: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Serializes a scene into `(relative path, bytes)` pairs for the scene
/// directory layout. `run_info`, if given, is stored in the manifest and in
/// every frame file; the loader ignores it.
pub fn encode_scene(scene: &Scene, run_info: Option<&serde_json::Value>) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let manifest = Manifest {
        scene_id: scene.scene_id.clone(),
        frame_rate: scene.frame_rate,
        frame_count: scene.frames.len(),
        run_info: run_info.cloned(),
    };
    let mut files = vec![(PathBuf::from("manifest.json"), serde_json::to_vec_pretty(&manifest)?)];
    for (i, f) in scene.frames.iter().enumerate() {
        let rec = FrameRecord {
            scene_id: f.scene_id.clone(),
            frame_index: f.frame_index,
            timestamp: f.timestamp,
            points: f
                .points
                .iter()
                .flat_map(|p| [p.x, p.y, p.z, p.intensity])
                .collect(),
            annotations: f.annotations.clone(),
            run_info: run_info.cloned(),
        };
        files.push((Path::new("frames").join(frame_file_name(i)), serde_json::to_vec(&rec)?));
    }
    Ok(files)
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    for (rel, bytes) in encode_scene(scene, None)? {
        let path = dir.join(rel);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = parse_json(&text, None)?;
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for i in 0..manifest.frame_count {
        let path = dir.join("frames").join(frame_file_name(i));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rec: FrameRecord = parse_json(&text, Some(i))?;
        if rec.points.len() % 4 != 0 {
            return Err(Error::Parse {
                frame: Some(i),
                field: "points".into(),
                message: format!("flat point array length {} is not a multiple of 4", rec.points.len()),
            });
        }
        let points = rec
            .points
            .chunks_exact(4)
            .map(|c| Point3D::new(c[0], c[1], c[2], c[3]))
            .collect();
        frames.push(PointCloudFrame {
            scene_id: rec.scene_id,
            frame_index: rec.frame_index,
            timestamp: rec.timestamp,
            points,
            annotations: rec.annotations,
        });
    }
    let scene = Scene {
        scene_id: manifest.scene_id,
        frame_rate: manifest.frame_rate,
        frames,
    };
    scene.validate()?;
    Ok(scene)
}
