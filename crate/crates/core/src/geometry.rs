//! Points, yaw-aware boxes and bird's-eye-view (BEV) footprint geometry.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point3D {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite() && self.z.is_finite()) {
            return Err(Error::Validation(format!("non-finite point {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Validation(format!(
                "intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        Ok(())
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            z: self.z + dz,
            intensity: self.intensity,
        }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Yaw-aware 3D box. `size` is (length, width, height); length runs along
/// the box's local x axis, which points at `yaw` in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl BoundingBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
        }
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Validation(format!(
                "box dimensions must be positive, got {:?}",
                self.size
            )));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite box center {:?}",
                self.center
            )));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::Validation(format!(
                "yaw {} not normalized to (-pi, pi]",
                self.yaw
            )));
        }
        Ok(())
    }

    /// Ego-frame point -> box-local coordinates (rotation by -yaw about the
    /// center).
    pub fn to_local(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, z - self.center[2]]
    }

    /// Box-local coordinates -> ego frame.
    pub fn to_world(&self, lx: f64, ly: f64, lz: f64) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * lx - s * ly,
            self.center[1] + s * lx + c * ly,
            self.center[2] + lz,
        ]
    }

    /// Ego-frame direction of the box's local +y axis.
    pub fn lateral_axis(&self) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [-s, c]
    }

    pub fn translated(&self, dx: f64, dy: f64, dz: f64) -> Self {
        Self {
            center: [self.center[0] + dx, self.center[1] + dy, self.center[2] + dz],
            size: self.size,
            yaw: self.yaw,
        }
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let hl = self.size[0] / 2.0;
        let hw = self.size[1] / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| {
            let w = self.to_world(lx, ly, 0.0);
            [w[0], w[1]]
        })
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }
}

/// Inclusive containment test in the box's local frame.
pub fn point_in_box(p: &Point3D, b: &BoundingBox3D) -> bool {
    let [lx, ly, lz] = b.to_local(p.x, p.y, p.z);
    lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0 && lz.abs() <= b.size[2] / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        s += a[0] * b[1] - a[1] * b[0];
    }
    s.abs() / 2.0
}

/// Sutherland-Hodgman clipping of `subject` against the convex CCW polygon
/// `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let t = cp / (cp - cq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn bev_intersection_area(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    polygon_area(&clip_convex(&a.footprint(), &b.footprint()))
}

/// Intersection-over-union of the two BEV footprints, in [0, 1].
pub fn bev_iou(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn segment_point_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn convex_contains(poly: &[[f64; 2]; 4], p: [f64; 2]) -> bool {
    (0..4).all(|i| cross(poly[i], poly[(i + 1) % 4], p) >= 0.0)
}

/// Minimum BEV distance between two footprints; 0 when they touch or
/// overlap.
pub fn bev_gap(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let fa = a.footprint();
    let fb = b.footprint();
    if fa.iter().any(|&p| convex_contains(&fb, p)) || fb.iter().any(|&p| convex_contains(&fa, p))
    {
        return 0.0;
    }
    if bev_intersection_area(a, b) > 0.0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..4 {
        for j in 0..4 {
            best = best.min(segment_point_distance(fa[i], fb[j], fb[(j + 1) % 4]));
            best = best.min(segment_point_distance(fb[j], fa[i], fa[(i + 1) % 4]));
        }
    }
    best
}
