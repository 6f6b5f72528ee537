use std::cmp::Ordering;
use std::f64::consts::PI;

use perception_perf::detector::{
    bev_iou, cluster_points, detect, fit_latency_model, match_detections, Detection,
    DetectorParams, LatencyModel, LatencyRecord, LatencyTrace,
};
use perception_perf::fixtures::{generate, street_scene_spec};
use perception_perf::scene::{BoundingBox3D, ObstacleAnnotation, Point3D, PointCloudFrame};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn pt(x: f64, y: f64) -> Point3D {
    Point3D::new(x, y, 0.0, 0.5)
}

fn cmp_point(a: &Point3D, b: &Point3D) -> Ordering {
    a.x.total_cmp(&b.x)
        .then(a.y.total_cmp(&b.y))
        .then(a.z.total_cmp(&b.z))
        .then(a.intensity.total_cmp(&b.intensity))
}

fn canonical(mut clusters: Vec<Vec<Point3D>>) -> Vec<Vec<Point3D>> {
    for c in &mut clusters {
        c.sort_by(cmp_point);
    }
    clusters.sort_by(|a, b| cmp_point(&a[0], &b[0]));
    clusters
}

// O(n^2) single linkage with a plain parent array.
fn brute_clusters(points: &[Point3D], r: f64, min: usize) -> Vec<Vec<Point3D>> {
    let n = points.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut Vec<usize>, mut i: usize) -> usize {
        while p[i] != i {
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = (points[i].x - points[j].x).hypot(points[i].y - points[j].y);
            if d <= r {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<Point3D>> = Default::default();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(points[i]);
    }
    canonical(groups.into_values().filter(|g| g.len() >= min).collect())
}

#[test]
fn clustering_examples() {
    let mut pts: Vec<Point3D> = (0..6).map(|i| pt(0.1 * i as f64, 0.0)).collect();
    pts.extend((0..6).map(|i| pt(10.0 + 0.1 * i as f64, 0.0)));
    assert_eq!(cluster_points(&pts, 0.5, 5).unwrap().len(), 2);
    assert!(cluster_points(&[], 0.5, 5).unwrap().is_empty());

    let chain: Vec<Point3D> = (0..30).map(|i| pt(0.4 * i as f64, 0.0)).collect();
    let got = cluster_points(&chain, 0.5, 5).unwrap();
    assert_eq!(got.len(), 1);
    assert_eq!(canonical(got), brute_clusters(&chain, 0.5, 5));

    assert!(cluster_points(&chain, 0.0, 5).is_err());
    assert!(cluster_points(&chain, 0.5, 0).is_err());
}

#[test]
fn empty_frame_latency_is_c0() {
    let frame = PointCloudFrame {
        scene_id: "e".into(),
        frame_index: 0,
        timestamp: 0.0,
        points: vec![],
        annotations: vec![],
    };
    let mut params = DetectorParams::default();
    params.latency.noise_sigma = 0.0;
    let (dets, lat) = detect(&frame, &params).unwrap();
    assert!(dets.is_empty());
    assert_eq!(lat, params.latency.c0);
}

#[test]
fn latency_arithmetic() {
    let m = LatencyModel {
        c0: 100.0,
        c1: 0.5,
        c3: 0.001,
        noise_sigma: 0.0,
    };
    assert!((m.predict(10) - 106.0).abs() < 1e-12);
}

#[test]
fn latency_presets_hit_their_anchors() {
    let a = LatencyModel::preset("apollo-nuscenes").unwrap();
    assert!((a.predict(0) - 1000.0 / 10.5).abs() < 1e-9);
    assert!((a.predict(10) - 116.0).abs() < 1e-9);
    let b = LatencyModel::preset("autoware-awsim").unwrap();
    assert!((b.predict(10) - 128.1).abs() < 1e-9);
    assert!(LatencyModel::preset("nope").is_err());
}

#[test]
fn fixture_frames_give_one_detection_per_obstacle() {
    let scene = generate(&street_scene_spec("street-0001", 1));
    let params = DetectorParams::default();
    for frame in &scene.frames {
        let (dets, _) = detect(frame, &params).unwrap();
        assert_eq!(dets.len(), frame.annotations.len(), "frame {}", frame.frame_index);
        let m = match_detections(&dets, &frame.annotations, 0.3).unwrap();
        for r in &m {
            assert!(r.detection.is_some(), "{} unmatched", r.gt_id);
            assert!(r.iou >= 0.3);
        }
        for d in &dets {
            assert!((0.0..=1.0).contains(&d.score));
        }
    }
}

#[test]
fn detection_is_deterministic_per_seed() {
    let scene = generate(&street_scene_spec("street-0001", 1));
    let params = DetectorParams::default();
    let a = detect(&scene.frames[3], &params).unwrap();
    let b = detect(&scene.frames[3], &params).unwrap();
    assert_eq!(a, b);
}

#[test]
fn latency_is_monotone_in_k_without_noise() {
    for name in ["apollo-nuscenes", "autoware-awsim"] {
        let m = LatencyModel::preset(name).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in 0..200 {
            let v = m.predict(k);
            assert!(v >= prev);
            prev = v;
        }
    }
}

#[test]
fn exact_fits() {
    let s: Vec<(usize, f64)> = (0..10).map(|k| (k, 100.0 + 2.0 * k as f64)).collect();
    let m = fit_latency_model(&s, 1).unwrap();
    assert!((m.c0 - 100.0).abs() < 1e-6 && (m.c1 - 2.0).abs() < 1e-6 && m.c3 == 0.0);

    let s: Vec<(usize, f64)> = (0..10).map(|k| (k, 116.0)).collect();
    for deg in [1, 3] {
        let m = fit_latency_model(&s, deg).unwrap();
        assert!((m.c0 - 116.0).abs() < 1e-6);
        assert!(m.c1.abs() < 1e-6 && m.c3.abs() < 1e-6);
    }
    assert!(fit_latency_model(&[(3, 1.0), (3, 2.0), (3, 4.0)], 1).is_err());
    assert!(fit_latency_model(&[(1, 1.0), (2, 2.0), (3, 4.0)], 3).is_err());
}

// Gaussian elimination on the 3x3 normal equations, plus (X^T X)^-1.
fn normal_equations(s: &[(usize, f64)]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = [[0.0; 6]; 3];
    let mut rhs = [0.0; 3];
    for &(k, y) in s {
        let row = [1.0, k as f64, (k as f64).powi(3)];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += row[i] * row[j];
            }
            rhs[i] += row[i] * y;
        }
    }
    for i in 0..3 {
        a[i][3 + i] = 1.0;
    }
    let mut aug = a;
    let mut b = rhs;
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        b.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = aug[r][col] / aug[col][col];
                for c in 0..6 {
                    aug[r][c] -= f * aug[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut coef = [0.0; 3];
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        coef[i] = b[i] / aug[i][i];
        for j in 0..3 {
            inv[i][j] = aug[i][3 + j] / aug[i][i];
        }
    }
    (coef, inv)
}

#[test]
fn noisy_cubic_recovers_generating_coefficients() {
    let truth = [95.0, 1.5, 0.02];
    let sigma = 5.0;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let samples: Vec<(usize, f64)> = (0..400)
        .map(|i| {
            let k = i % 25;
            let kf = k as f64;
            let noise: f64 = rng.sample(StandardNormal);
            (k, truth[0] + truth[1] * kf + truth[2] * kf.powi(3) + sigma * noise)
        })
        .collect();
    let m = fit_latency_model(&samples, 3).unwrap();
    let (oracle, inv) = normal_equations(&samples);
    let got = [m.c0, m.c1, m.c3];
    for i in 0..3 {
        assert!((got[i] - oracle[i]).abs() <= 1e-6 * oracle[i].abs().max(1.0));
        let se = sigma * inv[i][i].sqrt();
        assert!((got[i] - truth[i]).abs() <= 3.0 * se, "coef {i}: {} vs {}", got[i], truth[i]);
    }
    assert!((m.noise_sigma - sigma).abs() < 1.0);

    // residuals are orthogonal to every design column
    let cols: [fn(f64) -> f64; 3] = [|_| 1.0, |k| k, |k| k.powi(3)];
    for col in cols {
        let (mut dot, mut scale) = (0.0, 0.0);
        for &(k, y) in &samples {
            let kf = k as f64;
            let r = y - m.predict(k);
            dot += col(kf) * r;
            scale += (col(kf) * y).abs();
        }
        assert!(dot.abs() <= 1e-6 * scale);
    }
}

// Stratified-sample estimate of the footprint IoU.
fn sampled_iou(a: &BoundingBox3D, b: &BoundingBox3D, grid: usize, rng: &mut ChaCha8Rng) -> f64 {
    let inside = |bx: &BoundingBox3D, x: f64, y: f64| {
        let (s, c) = bx.yaw.sin_cos();
        let dx = x - bx.center[0];
        let dy = y - bx.center[1];
        (c * dx + s * dy).abs() <= bx.size[0] / 2.0 && (-s * dx + c * dy).abs() <= bx.size[1] / 2.0
    };
    let r = |bx: &BoundingBox3D| bx.size[0].hypot(bx.size[1]) / 2.0;
    let x0 = (a.center[0] - r(a)).min(b.center[0] - r(b));
    let x1 = (a.center[0] + r(a)).max(b.center[0] + r(b));
    let y0 = (a.center[1] - r(a)).min(b.center[1] - r(b));
    let y1 = (a.center[1] + r(a)).max(b.center[1] + r(b));
    let (hx, hy) = ((x1 - x0) / grid as f64, (y1 - y0) / grid as f64);
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..grid {
        for j in 0..grid {
            let x = x0 + (i as f64 + rng.random::<f64>()) * hx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * hy;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[test]
fn iou_examples_and_sampled_cross_check() {
    let a = BoundingBox3D::new([0.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0);
    let b = BoundingBox3D::new([1.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0);
    let far = BoundingBox3D::new([10.0, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0);
    assert_eq!(bev_iou(&a, &a), 1.0);
    assert_eq!(bev_iou(&a, &far), 0.0);
    assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    assert!((sampled_iou(&a, &b, 600, &mut rng) - 1.0 / 3.0).abs() < 1e-3);
    for _ in 0..10 {
        let a = BoundingBox3D::new(
            [0.0, 0.0, 0.0],
            [rng.random_range(1.0..5.0), rng.random_range(1.0..3.0), 1.0],
            rng.random_range(-PI..PI),
        );
        let b = BoundingBox3D::new(
            [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.0],
            [rng.random_range(1.0..5.0), rng.random_range(1.0..3.0), 1.0],
            rng.random_range(-PI..PI),
        );
        let est = sampled_iou(&a, &b, 600, &mut rng);
        assert!((bev_iou(&a, &b) - est).abs() < 1e-3, "{} vs {est}", bev_iou(&a, &b));
    }
}

fn det(b: BoundingBox3D) -> Detection {
    Detection {
        bbox: b,
        score: 1.0,
        point_count: 100,
    }
}

fn ann(id: &str, b: BoundingBox3D) -> ObstacleAnnotation {
    ObstacleAnnotation::new(id, "car", b)
}

#[test]
fn matching_examples() {
    let g1 = BoundingBox3D::new([0.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0);
    let g2 = BoundingBox3D::new([3.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0);
    let gt = vec![ann("a", g1), ann("b", g2)];
    let m = match_detections(&[det(g1), det(g2)], &gt, 0.5).unwrap();
    assert!(m.iter().all(|r| r.detection.is_some() && r.displacement == [0.0, 0.0]));
    let m = match_detections(&[], &gt, 0.5).unwrap();
    assert!(m.iter().all(|r| r.detection.is_none()));
    // one detection straddling both, closer to b
    let d = BoundingBox3D::new([2.0, 0.0, 0.0], [4.0, 2.0, 1.5], 0.0);
    let m = match_detections(&[det(d)], &gt, 0.1).unwrap();
    assert_eq!(m[0].detection, None);
    assert_eq!(m[1].detection, Some(0));
    assert!((m[1].displacement[0] + 1.0).abs() < 1e-12);
}

// Best partial matching by lexicographic comparison of its IoUs sorted
// descending; a longer vector wins on a shared prefix.
fn exhaustive_match_ious(iou: &[Vec<f64>], thr: f64) -> Vec<f64> {
    fn rec(g: usize, iou: &[Vec<f64>], thr: f64, used: &mut Vec<bool>, cur: &mut Vec<f64>, best: &mut Vec<f64>) {
        if g == iou.len() {
            let mut v = cur.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            if better(&v, best) {
                *best = v;
            }
            return;
        }
        rec(g + 1, iou, thr, used, cur, best);
        for d in 0..used.len() {
            if !used[d] && iou[g][d] >= thr {
                used[d] = true;
                cur.push(iou[g][d]);
                rec(g + 1, iou, thr, used, cur, best);
                cur.pop();
                used[d] = false;
            }
        }
    }
    fn better(a: &[f64], b: &[f64]) -> bool {
        for (x, y) in a.iter().zip(b) {
            if x != y {
                return x > y;
            }
        }
        a.len() > b.len()
    }
    let n_det = iou.first().map_or(0, |r| r.len());
    let mut best = Vec::new();
    rec(0, iou, thr, &mut vec![false; n_det], &mut Vec::new(), &mut best);
    best
}

fn arb_box() -> impl Strategy<Value = BoundingBox3D> {
    (-3.0..3.0f64, -3.0..3.0f64, 1.0..4.0f64, 1.0..3.0f64, -PI..PI)
        .prop_map(|(x, y, l, w, yaw)| BoundingBox3D::new([x, y, 0.0], [l, w, 1.0], yaw))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn greedy_matches_exhaustive_oracle(
        gts in prop::collection::vec(arb_box(), 0..=3),
        dets in prop::collection::vec(arb_box(), 0..=3),
        thr in 0.05..0.6f64,
    ) {
        let gt: Vec<_> = gts.iter().enumerate().map(|(i, b)| ann(&format!("g{i}"), *b)).collect();
        let ds: Vec<_> = dets.iter().map(|b| det(*b)).collect();
        let m = match_detections(&ds, &gt, thr).unwrap();
        let table: Vec<Vec<f64>> = gts.iter().map(|g| dets.iter().map(|d| bev_iou(g, d)).collect()).collect();
        let mut got: Vec<f64> = m.iter().filter(|r| r.detection.is_some()).map(|r| r.iou).collect();
        got.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(got, exhaustive_match_ious(&table, thr));
        let mut used: Vec<usize> = m.iter().filter_map(|r| r.detection).collect();
        let n = used.len();
        used.dedup();
        used.sort();
        used.dedup();
        prop_assert_eq!(used.len(), n);
    }

    #[test]
    fn iou_symmetric_bounded_and_rigid_invariant(
        a in arb_box(), b in arb_box(), theta in -PI..PI, tx in -50.0..50.0f64, ty in -50.0..50.0f64,
    ) {
        let ab = bev_iou(&a, &b);
        prop_assert!((ab - bev_iou(&b, &a)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        let mv = |bx: &BoundingBox3D| {
            let (s, c) = theta.sin_cos();
            let [x, y, z] = bx.center;
            BoundingBox3D::new([c * x - s * y + tx, s * x + c * y + ty, z], bx.size, bx.yaw + theta)
        };
        prop_assert!((ab - bev_iou(&mv(&a), &mv(&b))).abs() < 1e-9);
        prop_assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn clustering_matches_oracle_and_ignores_order(
        raw in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 0..120),
        r in 0.2..1.0f64,
        min in 1usize..6,
        seed in any::<u64>(),
    ) {
        let pts: Vec<Point3D> = raw.iter().map(|&(x, y)| pt(x, y)).collect();
        let got = cluster_points(&pts, r, min).unwrap();
        prop_assert_eq!(canonical(got.clone()), brute_clusters(&pts, r, min));
        let mut shuffled = pts.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        prop_assert_eq!(cluster_points(&shuffled, r, min).unwrap(), got);
    }
}

#[test]
fn latency_trace_csv_round_trip() {
    let t = LatencyTrace {
        records: vec![
            LatencyRecord {
                scene_id: "s".into(),
                frame_index: 0,
                latency_ms: 101.25,
                detection_count: 3,
            },
            LatencyRecord {
                scene_id: "s".into(),
                frame_index: 1,
                latency_ms: 1.0 / 3.0,
                detection_count: 0,
            },
        ],
    };
    let mut buf = Vec::new();
    t.write_csv(&mut buf, Some("seed=1")).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("# seed=1\nscene_id,frame_index,latency_ms,detection_count\n"));
    let back = LatencyTrace::read_csv(&buf[..]).unwrap();
    assert_eq!(back.records.len(), 2);
    assert!((back.records[1].latency_ms - 1.0 / 3.0).abs() < 1e-9);
}
