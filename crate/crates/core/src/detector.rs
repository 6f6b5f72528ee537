//! Geometric surrogate 3D detector, detection-count latency model, GT
//! matching and latency-trace CSV I/O.
//!
//! The surrogate clusters points in BEV with single linkage and fits a yaw-0
//! box to each cluster. Its "latency" comes from a polynomial in the number
//! of detections `K` (`c0 + c1*K + c3*K^3` plus optional Gaussian jitter), so
//! any mutation that changes `K` changes the modeled latency.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::format::sig9;
pub use crate::geometry::bev_iou;
use crate::geometry::{BoundingBox3D, Point3D};
use crate::scene::{ObstacleAnnotation, PointCloudFrame};
use crate::seed::rng_for;
use crate::{Error, Result};

pub const DEFAULT_CLUSTER_RADIUS_M: f64 = 0.5;
pub const DEFAULT_MIN_POINTS: usize = 5;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Height given to clusters that are flat in z.
pub const DEGENERATE_HEIGHT_M: f64 = 1.5;
/// Floor for a cluster's BEV extents so single-line clusters still form a box.
pub const MIN_EXTENT_M: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox3D,
    pub score: f64,
    pub point_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub c0: f64,
    pub c1: f64,
    pub c3: f64,
    pub noise_sigma: f64,
}

pub const LATENCY_PRESETS: [&str; 2] = ["apollo-nuscenes", "autoware-awsim"];

impl LatencyModel {
    /// Named presets.
    ///
    /// `apollo-nuscenes`: ~95.2 ms (10.5 fps) as K -> 0 and 116 ms at the
    /// K = 10 operating point; sigma chosen so ~75% of frames land within
    /// 20 ms of the mean.
    /// `autoware-awsim`: ~103.1 ms (9.7 fps) as K -> 0 and 128.1 ms at K = 10.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "apollo-nuscenes" => Ok(Self {
                c0: 1000.0 / 10.5,
                c1: 1.5,
                c3: (116.0 - 1000.0 / 10.5 - 15.0) / 1000.0,
                noise_sigma: 17.4,
            }),
            "autoware-awsim" => Ok(Self {
                c0: 1000.0 / 9.7,
                c1: 2.0,
                c3: (128.1 - 1000.0 / 9.7 - 20.0) / 1000.0,
                noise_sigma: 17.4,
            }),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.c0, self.c1, self.c3, self.noise_sigma]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || self.c0 < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Parameter(format!("invalid latency model {self:?}")));
        }
        Ok(())
    }

    /// Noise-free latency, clamped at zero.
    pub fn predict(&self, k: usize) -> f64 {
        let k = k as f64;
        (self.c0 + self.c1 * k + self.c3 * k * k * k).max(0.0)
    }

    pub fn sample<R: Rng>(&self, k: usize, rng: &mut R) -> f64 {
        let kf = k as f64;
        let mean = self.c0 + self.c1 * kf + self.c3 * kf * kf * kf;
        if self.noise_sigma == 0.0 {
            return mean.max(0.0);
        }
        let z: f64 = rng.sample(StandardNormal);
        (mean + z * self.noise_sigma).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub cluster_radius: f64,
    pub min_points: usize,
    pub latency: LatencyModel,
    pub seed: u64,
    /// Report wall-clock time of the surrogate instead of the model. Not
    /// reproducible; meant for smoke tests.
    #[serde(default)]
    pub measure: bool,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            cluster_radius: DEFAULT_CLUSTER_RADIUS_M,
            min_points: DEFAULT_MIN_POINTS,
            latency: LatencyModel::preset("apollo-nuscenes").unwrap(),
            seed: 0,
            measure: false,
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

fn point_cmp(a: &Point3D, b: &Point3D) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
        .then(a.intensity.total_cmp(&b.intensity))
}

/// Single-linkage Euclidean clustering in BEV (x, y).
///
/// Points link when their BEV distance is at most `cluster_radius`. Clusters
/// smaller than `min_points` are dropped. Output is canonical: points within
/// a cluster are sorted, and clusters are sorted by their first point, so the
/// result does not depend on input order.
pub fn cluster_points(
    points: &[Point3D],
    cluster_radius: f64,
    min_points: usize,
) -> Result<Vec<Vec<Point3D>>> {
    if !(cluster_radius.is_finite() && cluster_radius > 0.0) {
        return Err(Error::Parameter(format!(
            "cluster radius must be positive, got {cluster_radius}"
        )));
    }
    if min_points == 0 {
        return Err(Error::Parameter("min_points must be at least 1".into()));
    }
    let cell = |p: &Point3D| {
        (
            (p.x / cluster_radius).floor() as i64,
            (p.y / cluster_radius).floor() as i64,
        )
    };
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let r2 = cluster_radius * cluster_radius;
    let mut sets = DisjointSet::new(points.len());
    for (i, p) in points.iter().enumerate() {
        let (cx, cy) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else {
                    continue;
                };
                for &j in bucket {
                    if j <= i {
                        continue;
                    }
                    let q = &points[j];
                    if (p.x - q.x).powi(2) + (p.y - q.y).powi(2) <= r2 {
                        sets.union(i, j);
                    }
                }
            }
        }
    }
    let mut groups: HashMap<usize, Vec<Point3D>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        groups.entry(sets.find(i)).or_default().push(*p);
    }
    let mut clusters: Vec<Vec<Point3D>> = groups
        .into_values()
        .filter(|g| g.len() >= min_points)
        .map(|mut g| {
            g.sort_by(point_cmp);
            g
        })
        .collect();
    clusters.sort_by(|a, b| point_cmp(&a[0], &b[0]).then(a.len().cmp(&b.len())));
    Ok(clusters)
}

/// Yaw-0 tight box around a non-empty cluster.
pub fn fit_box(cluster: &[Point3D]) -> BoundingBox3D {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cluster {
        for (k, v) in [p.x, p.y, p.z].into_iter().enumerate() {
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
        }
    }
    let center = [0, 1, 2].map(|k| (lo[k] + hi[k]) / 2.0);
    let size = [
        (hi[0] - lo[0]).max(MIN_EXTENT_M),
        (hi[1] - lo[1]).max(MIN_EXTENT_M),
        if hi[2] - lo[2] < MIN_EXTENT_M {
            DEGENERATE_HEIGHT_M
        } else {
            hi[2] - lo[2]
        },
    ];
    BoundingBox3D::new(center, size, 0.0)
}

/// Runs the surrogate detector and returns its detections plus the frame's
/// latency in milliseconds.
pub fn detect(frame: &PointCloudFrame, params: &DetectorParams) -> Result<(Vec<Detection>, f64)> {
    params.latency.validate()?;
    let started = Instant::now();
    let detections: Vec<Detection> =
        cluster_points(&frame.points, params.cluster_radius, params.min_points)?
            .iter()
            .map(|c| Detection {
                bbox: fit_box(c),
                score: (c.len() as f64 / 100.0).min(1.0),
                point_count: c.len(),
            })
            .collect();
    let latency = if params.measure {
        started.elapsed().as_secs_f64() * 1000.0
    } else {
        let mut rng = rng_for(
            params.seed,
            &[
                "latency".into(),
                frame.scene_id.as_str().into(),
                frame.frame_index.into(),
            ],
        );
        params.latency.sample(detections.len(), &mut rng)
    };
    Ok((detections, latency))
}

/// Least-squares fit of latency against detection count.
///
/// `degree` 1 fits `c0 + c1*K`; `degree` 3 fits `c0 + c1*K + c3*K^3`.
/// `noise_sigma` of the result is the residual standard error.
pub fn fit_latency_model(samples: &[(usize, f64)], degree: u8) -> Result<LatencyModel> {
    if degree != 1 && degree != 3 {
        return Err(Error::Parameter(format!("degree must be 1 or 3, got {degree}")));
    }
    let mut distinct: Vec<usize> = samples.iter().map(|s| s.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < degree as usize + 1 {
        return Err(Error::Fit(format!(
            "need at least {} distinct detection counts, got {}",
            degree + 1,
            distinct.len()
        )));
    }
    let cols = if degree == 1 { 2 } else { 3 };
    let design = DMatrix::from_fn(samples.len(), cols, |r, c| {
        let k = samples[r].0 as f64;
        match c {
            0 => 1.0,
            1 => k,
            _ => k * k * k,
        }
    });
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if !(min_sv > max_sv * 1e-12) {
        return Err(Error::Fit("rank-deficient design matrix".into()));
    }
    let coef = svd
        .solve(&y, max_sv * 1e-12)
        .map_err(|e| Error::Fit(e.to_string()))?;
    let residual = &y - &design * &coef;
    let dof = samples.len().saturating_sub(cols);
    let noise_sigma = if dof > 0 {
        (residual.norm_squared() / dof as f64).sqrt()
    } else {
        0.0
    };
    Ok(LatencyModel {
        c0: coef[0],
        c1: coef[1],
        c3: if degree == 3 { coef[2] } else { 0.0 },
        noise_sigma,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub gt_id: String,
    /// Index into the detection list; `None` means the GT went undetected.
    pub detection: Option<usize>,
    pub iou: f64,
    /// Detection center minus GT center in (x, y).
    pub displacement: [f64; 2],
}

/// Greedy one-to-one matching in descending IoU order.
///
/// Pairs below `iou_threshold` never match. Ties in IoU are broken by GT
/// order, then detection order. Output follows the order of `gt`.
pub fn match_detections(
    dets: &[Detection],
    gt: &[ObstacleAnnotation],
    iou_threshold: f64,
) -> Result<Vec<MatchRecord>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Parameter(format!(
            "iou threshold must be in (0, 1], got {iou_threshold}"
        )));
    }
    let mut pairs = Vec::new();
    for (g, ann) in gt.iter().enumerate() {
        for (d, det) in dets.iter().enumerate() {
            let iou = bev_iou(&ann.bbox, &det.bbox);
            if iou >= iou_threshold {
                pairs.push((iou, g, d));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_match: Vec<Option<(usize, f64)>> = vec![None; gt.len()];
    let mut det_used = vec![false; dets.len()];
    for (iou, g, d) in pairs {
        if gt_match[g].is_none() && !det_used[d] {
            gt_match[g] = Some((d, iou));
            det_used[d] = true;
        }
    }
    Ok(gt
        .iter()
        .zip(gt_match)
        .map(|(ann, m)| match m {
            Some((d, iou)) => {
                let dc = dets[d].bbox.center;
                let gc = ann.bbox.center;
                MatchRecord {
                    gt_id: ann.obstacle_id.clone(),
                    detection: Some(d),
                    iou,
                    displacement: [dc[0] - gc[0], dc[1] - gc[1]],
                }
            }
            None => MatchRecord {
                gt_id: ann.obstacle_id.clone(),
                detection: None,
                iou: 0.0,
                displacement: [0.0, 0.0],
            },
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub scene_id: String,
    pub frame_index: usize,
    pub latency_ms: f64,
    pub detection_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyTrace {
    pub records: Vec<LatencyRecord>,
}

impl LatencyTrace {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if !(r.latency_ms.is_finite() && r.latency_ms >= 0.0) {
                return Err(Error::Validation(format!(
                    "record {i}: latency {} must be finite and non-negative",
                    r.latency_ms
                )));
            }
            if i > 0 {
                let p = &self.records[i - 1];
                if p.scene_id == r.scene_id && r.frame_index <= p.frame_index {
                    return Err(Error::Validation(format!(
                        "record {i}: frame {} out of order in scene {}",
                        r.frame_index, r.scene_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mean_latency(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.latency_ms).sum::<f64>() / self.records.len() as f64)
    }

    pub fn latencies(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.latency_ms).collect()
    }

    /// Writes `scene_id,frame_index,latency_ms,detection_count`, preceded by
    /// an optional `# ...` comment line.
    pub fn write_csv<W: Write>(&self, w: W, comment: Option<&str>) -> Result<()> {
        let mut w = w;
        if let Some(c) = comment {
            writeln!(w, "# {c}").map_err(|e| Error::io("<csv>", e))?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scene_id", "frame_index", "latency_ms", "detection_count"])?;
        for r in &self.records {
            out.write_record([
                r.scene_id.clone(),
                r.frame_index.to_string(),
                sig9(r.latency_ms),
                r.detection_count.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<LatencyRecord>, _>>()?;
        let trace = Self { records };
        trace.validate()?;
        Ok(trace)
    }
}
