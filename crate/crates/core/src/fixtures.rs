//! Deterministic synthetic scenes used as bundled fixtures and in tests.
//!
//! Obstacles move at constant velocity along the ego x axis (yaw 0). Each is
//! filled with points sampled uniformly inside its box, with a count that
//! falls off with range and grows with side area; sparse clutter is scattered away from all boxes.
//! Coordinates are rounded to millimetres to keep fixture files small.

use rand::Rng;

use crate::geometry::{bev_gap, BoundingBox3D, Point3D};
use crate::scene::{ObstacleAnnotation, PointCloudFrame, Scene};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureObstacle {
    pub id: String,
    pub category: String,
    pub size: [f64; 3],
    pub start: [f64; 2],
    pub velocity: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub scene_id: String,
    pub frame_count: usize,
    pub frame_rate: f64,
    pub seed: u64,
    pub obstacles: Vec<FixtureObstacle>,
    pub clutter_points: usize,
    /// Points per obstacle are `range_points / range_m`, scaled by the
    /// obstacle's side area relative to a car, clamped to
    /// `[min_points, max_points]`.
    pub range_points: f64,
    pub min_points: usize,
    pub max_points: usize,
}

const CAR: [f64; 3] = [4.08, 1.73, 1.56];

fn obstacle(id: &str, category: &str, size: [f64; 3], start: [f64; 2], velocity: [f64; 2]) -> FixtureObstacle {
    FixtureObstacle {
        id: id.to_string(),
        category: category.to_string(),
        size,
        start,
        velocity,
    }
}

/// Multi-lane street scene: moving and parked cars, a truck and a
/// pedestrian; 20 frames at 20 Hz.
pub fn street_scene_spec(scene_id: &str, seed: u64) -> FixtureSpec {
    FixtureSpec {
        scene_id: scene_id.to_string(),
        frame_count: 20,
        frame_rate: 20.0,
        seed,
        obstacles: vec![
            obstacle("car-01", "car", CAR, [10.0, 0.0], [3.0, 0.0]),
            obstacle("car-02", "car", CAR, [18.0, 3.5], [5.0, 0.0]),
            obstacle("car-03", "car", CAR, [-12.0, -3.5], [4.0, 0.0]),
            obstacle("car-04", "car", CAR, [25.0, -3.5], [0.0, 0.0]),
            obstacle("car-05", "car", CAR, [6.0, 7.2], [0.0, 0.0]),
            obstacle("car-06", "car", CAR, [14.0, 7.2], [0.0, 0.0]),
            obstacle("truck-07", "truck", [8.0, 2.5, 3.0], [-22.0, 3.5], [2.0, 0.0]),
            obstacle("ped-08", "pedestrian", [0.8, 0.8, 1.8], [8.0, -7.5], [0.0, 1.2]),
        ],
        clutter_points: 300,
        range_points: 3000.0,
        min_points: 56,
        max_points: 698,
    }
}

fn mm(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

pub fn generate(spec: &FixtureSpec) -> Scene {
    let frames = (0..spec.frame_count)
        .map(|fi| {
            let t = fi as f64 / spec.frame_rate;
            let mut rng = rng_for(spec.seed, &["fixture".into(), spec.scene_id.as_str().into(), fi.into()]);
            let annotations: Vec<ObstacleAnnotation> = spec
                .obstacles
                .iter()
                .map(|o| {
                    let center = [
                        o.start[0] + o.velocity[0] * t,
                        o.start[1] + o.velocity[1] * t,
                        o.size[2] / 2.0,
                    ];
                    ObstacleAnnotation::new(
                        o.id.clone(),
                        o.category.clone(),
                        BoundingBox3D::new(center, o.size, 0.0),
                    )
                })
                .collect();
            let mut points = Vec::new();
            for a in &annotations {
                let b = &a.bbox;
                let range = (b.center[0].powi(2) + b.center[1].powi(2)).sqrt().max(1.0);
                let side = (b.size[0] * b.size[2]) / (CAR[0] * CAR[2]);
                let n = ((spec.range_points * side / range).round() as usize)
                    .clamp(spec.min_points, spec.max_points);
                // keep a 1 cm margin so millimetre rounding stays inside
                let half = b.size.map(|s| s / 2.0 - 0.01);
                for _ in 0..n {
                    let lx = rng.random_range(-half[0]..=half[0]);
                    let ly = rng.random_range(-half[1]..=half[1]);
                    let lz = rng.random_range(-half[2]..=half[2]);
                    let w = b.to_world(lx, ly, lz);
                    let intensity = (rng.random::<f64>() * 100.0).round() / 100.0;
                    points.push(Point3D::new(mm(w[0]), mm(w[1]), mm(w[2]), intensity));
                }
            }
            let mut placed = 0;
            while placed < spec.clutter_points {
                let x = mm(rng.random_range(-40.0..40.0));
                let y = mm(rng.random_range(-20.0..20.0));
                let z = mm(rng.random_range(0.0..2.0));
                let probe = BoundingBox3D::new([x, y, z], [0.01, 0.01, 0.01], 0.0);
                if annotations.iter().any(|a| bev_gap(&probe, &a.bbox) < 1.0) {
                    continue;
                }
                points.push(Point3D::new(x, y, z, (rng.random::<f64>() * 100.0).round() / 100.0));
                placed += 1;
            }
            PointCloudFrame {
                scene_id: spec.scene_id.clone(),
                frame_index: fi,
                timestamp: t,
                points,
                annotations,
            }
        })
        .collect();
    Scene {
        scene_id: spec.scene_id.clone(),
        frame_rate: spec.frame_rate,
        frames,
    }
}

/// One obstacle moving at `speed` m/s along x; no clutter.
pub fn single_mover(scene_id: &str, frame_count: usize, frame_rate: f64, speed: f64, seed: u64) -> Scene {
    generate(&FixtureSpec {
        scene_id: scene_id.to_string(),
        frame_count,
        frame_rate,
        seed,
        obstacles: vec![obstacle("mover", "car", CAR, [10.0, 0.0], [speed, 0.0])],
        clutter_points: 0,
        range_points: 2000.0,
        min_points: 56,
        max_points: 698,
    })
}
