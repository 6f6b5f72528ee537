use std::collections::BTreeMap;

use perception_perf::detector::bev_iou;
use perception_perf::fixtures::{generate, street_scene_spec};
use perception_perf::mutators::{
    add_noise, add_obstacles, move_obstacles, mutate_frame, mutate_scene, noise_count,
    MutationSpec, ProvenanceDetail, MOVE_CLEARANCE_M, NOISE_JITTER_M,
};
use perception_perf::scene::{
    extract_obstacle_point_indices, BoundingBox3D, ObstacleAnnotation, Point3D, PointCloudFrame,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAR: [f64; 3] = [4.08, 1.73, 1.56];

fn fill_box(b: &BoundingBox3D, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3D> {
    (0..n)
        .map(|_| {
            let l = [
                rng.random_range(-0.49..0.49) * b.size[0],
                rng.random_range(-0.49..0.49) * b.size[1],
                rng.random_range(-0.49..0.49) * b.size[2],
            ];
            let w = b.to_world(l[0], l[1], l[2]);
            Point3D::new(w[0], w[1], w[2], rng.random_range(0.0..1.0))
        })
        .collect()
}

fn frame_with(boxes: &[(BoundingBox3D, usize)], seed: u64) -> PointCloudFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut annotations = Vec::new();
    for (k, (b, n)) in boxes.iter().enumerate() {
        points.extend(fill_box(b, *n, &mut rng));
        annotations.push(ObstacleAnnotation::new(format!("obs-{k}"), "car", *b));
    }
    PointCloudFrame {
        scene_id: "t".into(),
        frame_index: 0,
        timestamp: 0.0,
        points,
        annotations,
    }
}

// Axis-aligned overlap area for yaw-0 boxes, independent of polygon clipping.
fn aligned_overlap(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let ox = (a.size[0] + b.size[0]) / 2.0 - (a.center[0] - b.center[0]).abs();
    let oy = (a.size[1] + b.size[1]) / 2.0 - (a.center[1] - b.center[1]).abs();
    ox.max(0.0) * oy.max(0.0)
}

// Footprint gap between yaw-0 boxes.
fn aligned_gap(a: &BoundingBox3D, b: &BoundingBox3D) -> f64 {
    let gx = ((a.center[0] - b.center[0]).abs() - (a.size[0] + b.size[0]) / 2.0).max(0.0);
    let gy = ((a.center[1] - b.center[1]).abs() - (a.size[1] + b.size[1]) / 2.0).max(0.0);
    gx.hypot(gy)
}

#[test]
fn noise_count_examples() {
    assert_eq!(noise_count(698, 0.1, 1.73).unwrap(), 40);
    assert_eq!(noise_count(0, 0.5, 1.73).unwrap(), 0);
    assert_eq!(noise_count(518, 0.3, 1.73).unwrap(), 89);
    assert!(noise_count(10, 0.1, 0.0).is_err());
}

#[test]
fn noise_on_698_point_car_lands_beside_its_face() {
    let b = BoundingBox3D::new([10.0, 0.0, 0.78], CAR, 0.4);
    let frame = frame_with(&[(b, 698)], 11);
    let r = add_noise(&frame, &MutationSpec::noise(0.1, 5)).unwrap();
    assert_eq!(r.total_points_added(), 40);
    assert_eq!(r.mutated_frame.points.len(), 738);
    assert_eq!(r.mutated_frame.annotations, frame.annotations);
    assert_eq!(r.adjusted_annotations, frame.annotations);
    let m = 4.0 * NOISE_JITTER_M;
    for p in &r.mutated_frame.points[698..] {
        let [lx, ly, lz] = b.to_local(p.x, p.y, p.z);
        assert!(lx.abs() <= CAR[0] / 2.0 + m);
        assert!(lz.abs() <= CAR[2] / 2.0 + m);
        assert!(ly >= CAR[1] / 2.0 - m && ly <= CAR[1] / 2.0 + 0.1 + m, "ly = {ly}");
    }
}

#[test]
fn noise_on_empty_frame_is_identity() {
    let frame = frame_with(&[], 1);
    let r = add_noise(&frame, &MutationSpec::noise(0.3, 1)).unwrap();
    assert_eq!(r.mutated_frame, frame);
}

#[test]
fn same_seed_same_output() {
    let frame = frame_with(
        &[
            (BoundingBox3D::new([10.0, 0.0, 0.78], CAR, 0.0), 300),
            (BoundingBox3D::new([0.0, 6.0, 0.78], CAR, 1.0), 120),
        ],
        3,
    );
    for spec in [
        MutationSpec::noise(0.5, 9),
        MutationSpec::duplicate(9),
        MutationSpec::move_to_center(0.3, 9),
    ] {
        let a = mutate_frame(&frame, &spec).unwrap();
        let b = mutate_frame(&frame, &spec).unwrap();
        assert_eq!(a, b);
    }
    let a = add_noise(&frame, &MutationSpec::noise(0.5, 9)).unwrap();
    let b = add_noise(&frame, &MutationSpec::noise(0.5, 10)).unwrap();
    assert_ne!(a.mutated_frame.points, b.mutated_frame.points);
}

#[test]
fn isolated_car_is_duplicated_whole() {
    let b = BoundingBox3D::new([10.0, 0.0, 0.78], CAR, 0.0);
    let frame = frame_with(&[(b, 250)], 4);
    let r = add_obstacles(&frame, &MutationSpec::duplicate(1), &mut BTreeMap::new()).unwrap();
    assert_eq!(r.total_points_added(), 250);
    assert_eq!(r.mutated_frame.annotations.len(), 2);
    let dup = &r.mutated_frame.annotations[1];
    assert!(dup.synthetic);
    let d = (dup.bbox.center[0] - 10.0).hypot(dup.bbox.center[1]);
    assert!((d - 3.0).abs() < 1e-12);
    assert_eq!(r.adjusted_annotations, frame.annotations);
    for (orig, copy) in frame.points.iter().zip(&r.mutated_frame.points[250..]) {
        assert_eq!(copy.x, orig.x);
        assert!((copy.y - orig.y - 3.0).abs() < 1e-12);
        assert_eq!(copy.z, orig.z);
    }
}

#[test]
fn flanked_obstacle_is_skipped() {
    let boxes: Vec<_> = [-2.5, 0.0, 2.5]
        .iter()
        .map(|&y| (BoundingBox3D::new([10.0, y, 0.78], CAR, 0.0), 50))
        .collect();
    let frame = frame_with(&boxes, 8);
    // both candidate duplicates of the middle car overlap a neighbour
    for s in [1.0, -1.0] {
        let cand = boxes[1].0.translated(0.0, 3.0 * s, 0.0);
        assert!(boxes.iter().any(|(b, _)| aligned_overlap(&cand, b) > 0.0));
    }
    let r = add_obstacles(&frame, &MutationSpec::duplicate(1), &mut BTreeMap::new()).unwrap();
    let middle = r.provenance.iter().find(|p| p.obstacle_id == "obs-1").unwrap();
    assert!(matches!(middle.detail, ProvenanceDetail::DuplicateSkipped { .. }));
    assert_eq!(r.points_added["obs-1"], 0);
    assert!(r
        .mutated_frame
        .annotations
        .iter()
        .all(|a| a.obstacle_id != "obs-1+dup"));
    // outer cars still find room on their open side
    assert_eq!(r.points_added["obs-0"], 50);
    assert_eq!(r.points_added["obs-2"], 50);
}

#[test]
fn duplicate_side_is_kept_across_frames() {
    let b = BoundingBox3D::new([10.0, 0.0, 0.78], CAR, 0.0);
    let blocker = BoundingBox3D::new([10.0, 3.0, 0.78], CAR, 0.0);
    let mut f0 = frame_with(&[(b, 40), (blocker, 40)], 1);
    f0.annotations.truncate(1);
    f0.points.truncate(40);
    let mut f1 = frame_with(&[(b, 40), (blocker, 40)], 2);
    f1.frame_index = 1;
    f1.timestamp = 0.1;
    let scene = perception_perf::scene::Scene {
        scene_id: "t".into(),
        frame_rate: 10.0,
        frames: vec![f0, f1],
    };
    let rs = mutate_scene(&scene, &MutationSpec::duplicate(0)).unwrap();
    // frame 0 picks +y; in frame 1 +y is blocked and the memo forbids switching
    assert_eq!(rs[0].points_added["obs-0"], 40);
    assert_eq!(rs[1].points_added["obs-0"], 0);
}

#[test]
fn empty_frame_unchanged_by_duplicate_and_move() {
    let frame = frame_with(&[], 1);
    let r = add_obstacles(&frame, &MutationSpec::duplicate(1), &mut BTreeMap::new()).unwrap();
    assert_eq!(r.mutated_frame, frame);
    let r = move_obstacles(&frame, &MutationSpec::move_to_center(0.5, 1)).unwrap();
    assert_eq!(r.mutated_frame, frame);
}

fn mirrored_frame(ys: &[f64]) -> PointCloudFrame {
    let mut points = Vec::new();
    let mut annotations = Vec::new();
    for (k, &y) in ys.iter().enumerate() {
        let b = BoundingBox3D::new([10.0, y, 0.78], CAR, 0.0);
        for i in 0..10 {
            let dx = 0.1 * i as f64;
            points.push(Point3D::new(10.0 + dx, y + 0.5, 0.5, 0.5));
            points.push(Point3D::new(10.0 - dx, y - 0.5, 0.5, 0.5));
        }
        annotations.push(ObstacleAnnotation::new(format!("obs-{k}"), "car", b));
    }
    PointCloudFrame {
        scene_id: "m".into(),
        frame_index: 0,
        timestamp: 0.0,
        points,
        annotations,
    }
}

#[test]
fn symmetric_pair_moves_full_distance() {
    let frame = mirrored_frame(&[-5.0, 5.0]);
    let r = move_obstacles(&frame, &MutationSpec::move_to_center(0.5, 0)).unwrap();
    let ys: Vec<f64> = r.adjusted_annotations.iter().map(|a| a.bbox.center[1]).collect();
    assert!((ys[0] + 4.5).abs() < 1e-12);
    assert!((ys[1] - 4.5).abs() < 1e-12);
}

#[test]
fn centered_obstacle_stays() {
    let frame = mirrored_frame(&[0.0]);
    let r = move_obstacles(&frame, &MutationSpec::move_to_center(0.5, 0)).unwrap();
    assert_eq!(r.mutated_frame, frame);
}

#[test]
fn close_pair_is_clamped_at_clearance() {
    let y = (CAR[1] + 0.4) / 2.0;
    let frame = mirrored_frame(&[-y, y]);
    assert!((aligned_gap(&frame.annotations[0].bbox, &frame.annotations[1].bbox) - 0.4).abs() < 1e-12);
    let r = move_obstacles(&frame, &MutationSpec::move_to_center(0.5, 0)).unwrap();
    let a = &r.adjusted_annotations;
    let gap = aligned_gap(&a[0].bbox, &a[1].bbox);
    assert!(gap >= MOVE_CLEARANCE_M - 1e-9, "gap {gap}");
    assert!(gap < 0.4);
    for p in &r.provenance {
        match &p.detail {
            ProvenanceDetail::Moved { dy, clamped } => {
                assert!(*clamped);
                assert!(dy.abs() < 0.5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn fixture_noise_stays_below_670_per_frame() {
    let scene = generate(&street_scene_spec("street-0001", 1));
    for d in [0.1, 0.3, 0.5] {
        for r in mutate_scene(&scene, &MutationSpec::noise(d, 1)).unwrap() {
            assert!(r.total_points_added() < 670, "d={d}: {}", r.total_points_added());
        }
    }
}

fn arb_frame() -> impl Strategy<Value = PointCloudFrame> {
    (
        prop::collection::vec(
            (-30.0..30.0f64, -30.0..30.0f64, -3.2..3.2f64, 0usize..120),
            0..5,
        ),
        any::<u64>(),
    )
        .prop_map(|(boxes, seed)| {
            let boxes: Vec<_> = boxes
                .into_iter()
                .map(|(x, y, yaw, n)| (BoundingBox3D::new([x, y, 0.78], CAR, yaw), n))
                .collect();
            frame_with(&boxes, seed)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn noise_preserves_existing_points(frame in arb_frame(), d in 0.05..1.0f64, seed in any::<u64>()) {
        let r = add_noise(&frame, &MutationSpec::noise(d, seed)).unwrap();
        let n = frame.points.len();
        prop_assert_eq!(&r.mutated_frame.points[..n], &frame.points[..]);
        prop_assert_eq!(&r.mutated_frame.annotations, &frame.annotations);
        prop_assert_eq!(r.mutated_frame.points.len(), n + r.total_points_added());
    }

    #[test]
    fn duplicates_add_their_source_and_never_overlap(frame in arb_frame(), seed in any::<u64>()) {
        let r = add_obstacles(&frame, &MutationSpec::duplicate(seed), &mut BTreeMap::new()).unwrap();
        let members = extract_obstacle_point_indices(&frame);
        let expected: usize = r.provenance.iter().map(|p| match &p.detail {
            ProvenanceDetail::Duplicated { .. } => members[&p.obstacle_id].len(),
            _ => 0,
        }).sum();
        prop_assert_eq!(r.mutated_frame.points.len(), frame.points.len() + expected);
        let anns = &r.mutated_frame.annotations;
        for (i, a) in anns.iter().enumerate().filter(|(_, a)| a.synthetic) {
            for (j, b) in anns.iter().enumerate() {
                if i != j {
                    prop_assert_eq!(bev_iou(&a.bbox, &b.bbox), 0.0);
                }
            }
        }
    }

    #[test]
    fn move_is_a_rigid_y_translation(frame in arb_frame(), d in 0.05..1.0f64) {
        let r = move_obstacles(&frame, &MutationSpec::move_to_center(d, 0)).unwrap();
        let members = extract_obstacle_point_indices(&frame);
        for ((orig, moved), prov) in frame.annotations.iter().zip(&r.adjusted_annotations).zip(&r.provenance) {
            let ProvenanceDetail::Moved { dy, .. } = prov.detail else { panic!("not a move") };
            prop_assert_eq!(&prov.obstacle_id, &orig.obstacle_id);
            prop_assert!(dy.abs() <= d + 1e-12);
            prop_assert_eq!(moved.bbox.center[1], orig.bbox.center[1] + dy);
            prop_assert_eq!(moved.bbox.center[0], orig.bbox.center[0]);
            for &i in &members[&orig.obstacle_id] {
                let (p, q) = (&frame.points[i], &r.mutated_frame.points[i]);
                prop_assert_eq!(q.x, p.x);
                prop_assert_eq!(q.z, p.z);
                prop_assert_eq!(q.y, p.y + dy);
            }
        }
        prop_assert_eq!(r.mutated_frame.points.len(), frame.points.len());
    }
}
