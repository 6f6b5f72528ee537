//! Latency-stressing scene mutation operators.
//!
//! * [`add_noise`] upsamples jittered points into a thin band right outside
//!   each obstacle's side face, inflating its apparent extent.
//! * [`add_obstacles`] duplicates every obstacle a fixed lateral distance
//!   away when the copy fits without overlapping anything.
//! * [`move_obstacles`] pulls obstacles toward the lateral center of mass of
//!   all obstacle points, stopping short of contact.
//!
//! All operators are deterministic in `(frame, spec)`; the random stream for a
//! frame is derived from `(seed, operator, scene_id, frame_index)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{bev_gap, bev_intersection_area, BoundingBox3D, Point3D};
use crate::scene::{extract_obstacle_point_indices, ObstacleAnnotation, PointCloudFrame, Scene};
use crate::seed::rng_for;
use crate::{Error, Result};

/// Per-axis standard deviation of the jitter applied to upsampled noise points.
pub const NOISE_JITTER_M: f64 = 0.05;
/// Width of the band behind a side face used when the noise region is empty.
pub const FACE_BAND_M: f64 = 0.1;
/// Minimum BEV clearance kept between moved obstacles.
pub const MOVE_CLEARANCE_M: f64 = 0.05;
pub const DEFAULT_DUPLICATE_DISTANCE_M: f64 = 3.0;
const MOVE_STEP_M: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MutationKind {
    AddNoise,
    AddObstacles,
    MoveObstacles,
}

impl MutationKind {
    fn tag(self) -> &'static str {
        match self {
            MutationKind::AddNoise => "add-noise",
            MutationKind::AddObstacles => "add-obstacles",
            MutationKind::MoveObstacles => "move-obstacles",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "+y")]
    PosY,
    #[serde(rename = "-y")]
    NegY,
    #[serde(rename = "toward-center")]
    TowardCenter,
}

impl Direction {
    fn lateral_order(self) -> [f64; 2] {
        match self {
            Direction::NegY => [-1.0, 1.0],
            _ => [1.0, -1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationSpec {
    pub kind: MutationKind,
    pub direction: Direction,
    pub distance_m: f64,
    pub seed: u64,
}

impl MutationSpec {
    pub fn noise(distance_m: f64, seed: u64) -> Self {
        Self {
            kind: MutationKind::AddNoise,
            direction: Direction::PosY,
            distance_m,
            seed,
        }
    }

    pub fn duplicate(seed: u64) -> Self {
        Self {
            kind: MutationKind::AddObstacles,
            direction: Direction::PosY,
            distance_m: DEFAULT_DUPLICATE_DISTANCE_M,
            seed,
        }
    }

    pub fn move_to_center(distance_m: f64, seed: u64) -> Self {
        Self {
            kind: MutationKind::MoveObstacles,
            direction: Direction::TowardCenter,
            distance_m,
            seed,
        }
    }

    /// Short variant name, e.g. `noise-0.3`.
    pub fn label(&self) -> String {
        let prefix = match self.kind {
            MutationKind::AddNoise => "noise",
            MutationKind::AddObstacles => "add-obstacles",
            MutationKind::MoveObstacles => "move",
        };
        let side = match (self.kind, self.direction) {
            (MutationKind::MoveObstacles, _) | (_, Direction::PosY) => "",
            (_, Direction::NegY) => "-neg-y",
            (_, Direction::TowardCenter) => "-center",
        };
        format!("{prefix}-{}{side}", self.distance_m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.distance_m.is_finite() && self.distance_m > 0.0) {
            return Err(Error::Parameter(format!(
                "mutation distance must be positive, got {}",
                self.distance_m
            )));
        }
        if self.kind != MutationKind::MoveObstacles && self.direction == Direction::TowardCenter {
            return Err(Error::Parameter(format!(
                "{} needs a +y or -y direction",
                self.kind.tag()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ProvenanceDetail {
    Noise {
        points_added: usize,
        side: f64,
        /// True when the noise band was empty and face points were used.
        face_fallback: bool,
    },
    Duplicated {
        duplicate_id: String,
        side: f64,
        offset: [f64; 2],
        points: usize,
    },
    DuplicateSkipped {
        reason: String,
    },
    Moved {
        dy: f64,
        clamped: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub obstacle_id: String,
    pub operator: MutationKind,
    pub distance_m: f64,
    #[serde(flatten)]
    pub detail: ProvenanceDetail,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MutationResult {
    pub mutated_frame: PointCloudFrame,
    /// Ground truth after the mutation (injected obstacles excluded).
    pub adjusted_annotations: Vec<ObstacleAnnotation>,
    pub points_added: BTreeMap<String, usize>,
    pub provenance: Vec<Provenance>,
}

impl MutationResult {
    pub fn total_points_added(&self) -> usize {
        self.points_added.values().sum()
    }

    fn unchanged(frame: &PointCloudFrame) -> Self {
        Self {
            mutated_frame: frame.clone(),
            adjusted_annotations: frame.gt_annotations().cloned().collect(),
            points_added: BTreeMap::new(),
            provenance: Vec::new(),
        }
    }
}

/// `floor(num_obs * d_noise / width_obs)`.
pub fn noise_count(num_obs: usize, d_noise: f64, width_obs: f64) -> Result<usize> {
    if !(width_obs.is_finite() && width_obs > 0.0) {
        return Err(Error::Parameter(format!(
            "obstacle width must be positive, got {width_obs}"
        )));
    }
    if !(d_noise.is_finite() && d_noise > 0.0) {
        return Err(Error::Parameter(format!(
            "noise distance must be positive, got {d_noise}"
        )));
    }
    Ok((num_obs as f64 * d_noise / width_obs).floor() as usize)
}

/// Applies `spec` to a single frame. Duplicate side choices are not shared
/// with other frames; use [`mutate_scene`] for scene-consistent duplicates.
pub fn mutate_frame(frame: &PointCloudFrame, spec: &MutationSpec) -> Result<MutationResult> {
    match spec.kind {
        MutationKind::AddNoise => add_noise(frame, spec),
        MutationKind::AddObstacles => add_obstacles(frame, spec, &mut BTreeMap::new()),
        MutationKind::MoveObstacles => move_obstacles(frame, spec),
    }
}

pub fn mutate_scene(scene: &Scene, spec: &MutationSpec) -> Result<Vec<MutationResult>> {
    spec.validate()?;
    let mut sides = BTreeMap::new();
    scene
        .frames
        .iter()
        .map(|f| match spec.kind {
            MutationKind::AddObstacles => add_obstacles(f, spec, &mut sides),
            _ => mutate_frame(f, spec),
        })
        .collect()
}

/// Returns a copy of `scene` with every frame replaced by its mutated version.
pub fn apply_to_scene(scene: &Scene, results: &[MutationResult]) -> Scene {
    Scene {
        scene_id: scene.scene_id.clone(),
        frame_rate: scene.frame_rate,
        frames: results.iter().map(|r| r.mutated_frame.clone()).collect(),
    }
}

fn frame_rng(spec: &MutationSpec, frame: &PointCloudFrame) -> rand_chacha::ChaCha8Rng {
    rng_for(
        spec.seed,
        &[
            "mutate".into(),
            spec.kind.tag().into(),
            frame.scene_id.as_str().into(),
            frame.frame_index.into(),
        ],
    )
}

fn in_noise_region(b: &BoundingBox3D, side: f64, d: f64, local: [f64; 3]) -> bool {
    let [lx, ly, lz] = local;
    let s = side * ly;
    lx.abs() <= b.length() / 2.0
        && lz.abs() <= b.height() / 2.0
        && s >= b.width() / 2.0
        && s <= b.width() / 2.0 + d
}

pub fn add_noise(frame: &PointCloudFrame, spec: &MutationSpec) -> Result<MutationResult> {
    if spec.kind != MutationKind::AddNoise {
        return Err(Error::Parameter("add_noise needs an AddNoise spec".into()));
    }
    spec.validate()?;
    if frame.annotations.is_empty() {
        return Ok(MutationResult::unchanged(frame));
    }
    let mut rng = frame_rng(spec, frame);
    let side = spec.direction.lateral_order()[0];
    let d = spec.distance_m;
    let members = extract_obstacle_point_indices(frame);
    let mut mutated = frame.clone();
    let mut points_added = BTreeMap::new();
    let mut provenance = Vec::new();

    for ann in frame.gt_annotations() {
        let b = &ann.bbox;
        let own = &members[&ann.obstacle_id];
        let count = noise_count(own.len(), d, b.width())?;
        let mut face_fallback = false;
        if count > 0 {
            let in_region: Vec<&Point3D> = frame
                .points
                .iter()
                .filter(|p| in_noise_region(b, side, d, b.to_local(p.x, p.y, p.z)))
                .collect();
            let sources: Vec<Point3D> = if !in_region.is_empty() {
                (0..count)
                    .map(|_| *in_region[rng.random_range(0..in_region.len())])
                    .collect()
            } else {
                face_fallback = true;
                let band: Vec<usize> = own
                    .iter()
                    .copied()
                    .filter(|&i| {
                        let p = &frame.points[i];
                        side * b.to_local(p.x, p.y, p.z)[1] >= b.width() / 2.0 - FACE_BAND_M
                    })
                    .collect();
                let pool = if band.is_empty() { own } else { &band };
                (0..count)
                    .map(|_| {
                        let p = frame.points[pool[rng.random_range(0..pool.len())]];
                        let [lx, _, lz] = b.to_local(p.x, p.y, p.z);
                        let w = b.to_world(lx, side * (b.width() / 2.0 + d / 2.0), lz);
                        Point3D::new(w[0], w[1], w[2], p.intensity)
                    })
                    .collect()
            };
            for p in sources {
                let jx: f64 = rng.sample(StandardNormal);
                let jy: f64 = rng.sample(StandardNormal);
                let jz: f64 = rng.sample(StandardNormal);
                mutated.points.push(p.translated(
                    jx * NOISE_JITTER_M,
                    jy * NOISE_JITTER_M,
                    jz * NOISE_JITTER_M,
                ));
            }
        }
        points_added.insert(ann.obstacle_id.clone(), count);
        provenance.push(Provenance {
            obstacle_id: ann.obstacle_id.clone(),
            operator: spec.kind,
            distance_m: d,
            detail: ProvenanceDetail::Noise {
                points_added: count,
                side,
                face_fallback,
            },
        });
    }

    Ok(MutationResult {
        adjusted_annotations: frame.gt_annotations().cloned().collect(),
        mutated_frame: mutated,
        points_added,
        provenance,
    })
}

/// Duplicates each ground-truth obstacle `spec.distance_m` along its lateral
/// axis. `sides` remembers the side chosen per obstacle so the same side is
/// reused in later frames of a scene.
pub fn add_obstacles(
    frame: &PointCloudFrame,
    spec: &MutationSpec,
    sides: &mut BTreeMap<String, f64>,
) -> Result<MutationResult> {
    if spec.kind != MutationKind::AddObstacles {
        return Err(Error::Parameter(
            "add_obstacles needs an AddObstacles spec".into(),
        ));
    }
    spec.validate()?;
    if frame.annotations.is_empty() {
        return Ok(MutationResult::unchanged(frame));
    }
    let members = extract_obstacle_point_indices(frame);
    let mut occupied: Vec<BoundingBox3D> = frame.annotations.iter().map(|a| a.bbox).collect();
    let mut mutated = frame.clone();
    let mut points_added = BTreeMap::new();
    let mut provenance = Vec::new();

    for ann in frame.gt_annotations() {
        let candidates: Vec<f64> = match sides.get(&ann.obstacle_id) {
            Some(&s) => vec![s],
            None => spec.direction.lateral_order().to_vec(),
        };
        let axis = ann.bbox.lateral_axis();
        let placed = candidates.iter().find_map(|&s| {
            let offset = [axis[0] * s * spec.distance_m, axis[1] * s * spec.distance_m];
            let dup = ann.bbox.translated(offset[0], offset[1], 0.0);
            occupied
                .iter()
                .all(|o| bev_intersection_area(&dup, o) == 0.0)
                .then_some((s, offset, dup))
        });
        let Some((s, offset, dup)) = placed else {
            provenance.push(Provenance {
                obstacle_id: ann.obstacle_id.clone(),
                operator: spec.kind,
                distance_m: spec.distance_m,
                detail: ProvenanceDetail::DuplicateSkipped {
                    reason: format!("no collision-free side among {candidates:?}"),
                },
            });
            points_added.insert(ann.obstacle_id.clone(), 0);
            continue;
        };
        sides.insert(ann.obstacle_id.clone(), s);
        occupied.push(dup);
        let own = &members[&ann.obstacle_id];
        for &i in own {
            mutated
                .points
                .push(frame.points[i].translated(offset[0], offset[1], 0.0));
        }
        let duplicate_id = format!("{}+dup", ann.obstacle_id);
        mutated.annotations.push(ObstacleAnnotation {
            obstacle_id: duplicate_id.clone(),
            category: ann.category.clone(),
            bbox: dup,
            synthetic: true,
        });
        points_added.insert(ann.obstacle_id.clone(), own.len());
        provenance.push(Provenance {
            obstacle_id: ann.obstacle_id.clone(),
            operator: spec.kind,
            distance_m: spec.distance_m,
            detail: ProvenanceDetail::Duplicated {
                duplicate_id,
                side: s,
                offset,
                points: own.len(),
            },
        });
    }

    Ok(MutationResult {
        adjusted_annotations: frame.gt_annotations().cloned().collect(),
        mutated_frame: mutated,
        points_added,
        provenance,
    })
}

/// Shifts every ground-truth obstacle (points and box) along ego y toward
/// the y center of mass of all obstacle points, by at most
/// `spec.distance_m`. Obstacles advance together in small steps; an obstacle
/// stops for good once its next step would bring it closer than
/// [`MOVE_CLEARANCE_M`] to another box.
pub fn move_obstacles(frame: &PointCloudFrame, spec: &MutationSpec) -> Result<MutationResult> {
    if spec.kind != MutationKind::MoveObstacles {
        return Err(Error::Parameter(
            "move_obstacles needs a MoveObstacles spec".into(),
        ));
    }
    spec.validate()?;
    let members = extract_obstacle_point_indices(frame);
    let gt: Vec<usize> = (0..frame.annotations.len())
        .filter(|&i| !frame.annotations[i].synthetic)
        .collect();
    let (sum, n) = gt
        .iter()
        .flat_map(|&i| members[&frame.annotations[i].obstacle_id].iter())
        .fold((0.0, 0usize), |(s, n), &pi| (s + frame.points[pi].y, n + 1));
    if n == 0 {
        return Ok(MutationResult::unchanged(frame));
    }
    let com_y = sum / n as f64;

    let boxes: Vec<BoundingBox3D> = frame.annotations.iter().map(|a| a.bbox).collect();
    let mut target = vec![0.0; boxes.len()];
    for &i in &gt {
        let gap = com_y - boxes[i].center[1];
        target[i] = gap.signum() * gap.abs().min(spec.distance_m);
    }
    let mut shift = vec![0.0; boxes.len()];
    let mut active: Vec<bool> = target.iter().map(|t| *t != 0.0).collect();
    let mut clamped = vec![false; boxes.len()];
    while active.iter().any(|a| *a) {
        for i in 0..boxes.len() {
            if !active[i] {
                continue;
            }
            let remaining = target[i] - shift[i];
            let step = remaining.signum() * remaining.abs().min(MOVE_STEP_M);
            let next = if remaining.abs() <= MOVE_STEP_M {
                target[i]
            } else {
                shift[i] + step
            };
            let here = boxes[i].translated(0.0, shift[i], 0.0);
            let there = boxes[i].translated(0.0, next, 0.0);
            let ok = (0..boxes.len()).filter(|&j| j != i).all(|j| {
                let other = boxes[j].translated(0.0, shift[j], 0.0);
                let after = bev_gap(&there, &other);
                after >= MOVE_CLEARANCE_M || after >= bev_gap(&here, &other)
            });
            if ok {
                shift[i] = next;
                if next == target[i] {
                    active[i] = false;
                }
            } else {
                active[i] = false;
                clamped[i] = true;
            }
        }
    }

    let mut mutated = frame.clone();
    let mut provenance = Vec::new();
    for &i in &gt {
        let ann = &mut mutated.annotations[i];
        let dy = shift[i];
        ann.bbox.center[1] += dy;
        for &pi in &members[&ann.obstacle_id] {
            mutated.points[pi].y += dy;
        }
        provenance.push(Provenance {
            obstacle_id: ann.obstacle_id.clone(),
            operator: spec.kind,
            distance_m: spec.distance_m,
            detail: ProvenanceDetail::Moved {
                dy,
                clamped: clamped[i],
            },
        });
    }
    Ok(MutationResult {
        adjusted_annotations: mutated.gt_annotations().cloned().collect(),
        mutated_frame: mutated,
        points_added: gt
            .iter()
            .map(|&i| (frame.annotations[i].obstacle_id.clone(), 0))
            .collect(),
        provenance,
    })
}
