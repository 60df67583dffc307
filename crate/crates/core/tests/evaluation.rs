mod common;

use std::f64::consts::{FRAC_PI_2, PI};

use evstereo::boxes::{Box7, Class, Detection};
use evstereo::eval::{
    ap_compute, iou_3d, map_summary, r40_from_flags, rotated_iou_bev, Difficulty, GroundTruthFrame, GtBox, Metric,
};
use proptest::prelude::*;
use rand::Rng;

fn rect(x: f64, z: f64, l: f64, w: f64) -> Box7 {
    Box7 {
        x,
        y: 0.0,
        z,
        h: 1.0,
        w,
        l,
        yaw: 0.0,
    }
}

fn arb_box() -> impl Strategy<Value = Box7> {
    (-2.0f64..2.0, -0.5f64..0.5, -2.0f64..2.0, 0.3f64..2.0, 0.3f64..2.0, 0.3f64..4.0, -PI..PI)
        .prop_map(|(x, y, z, h, w, l, yaw)| Box7 { x, y, z, h, w, l, yaw })
}

#[test]
fn axis_aligned_overlaps_are_exact() {
    // 4×2 and 2×2 offset by (2, 1): overlap 1×1.
    let a = rect(0.0, 0.0, 4.0, 2.0);
    let b = rect(2.0, 1.0, 2.0, 2.0);
    assert!((rotated_iou_bev(&a, &b).unwrap() - 1.0 / 11.0).abs() < 1e-12);
    // Containment.
    let inner = rect(0.5, 0.0, 1.0, 1.0);
    assert!((rotated_iou_bev(&a, &inner).unwrap() - 1.0 / 8.0).abs() < 1e-12);
    // Half-height vertical overlap halves the 3-D intersection.
    let up = Box7 { y: 0.5, ..a };
    assert!((iou_3d(&a, &up).unwrap() - 4.0 / 12.0).abs() < 1e-12);
    // Touching edges have zero overlap.
    assert_eq!(rotated_iou_bev(&a, &rect(3.0, 0.0, 2.0, 2.0)).unwrap(), 0.0);
}

#[test]
fn quarter_turn_swaps_length_and_width() {
    let a = rect(0.2, -0.4, 3.0, 1.2);
    let b = Box7 {
        l: 1.2,
        w: 3.0,
        yaw: FRAC_PI_2,
        ..a
    };
    assert!((rotated_iou_bev(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    assert!((iou_3d(&a, &Box7 { yaw: PI, ..a }).unwrap() - 1.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        for m in Metric::ALL {
            let ab = m.iou(&a, &b).unwrap();
            let ba = m.iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            prop_assert!((m.iou(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        }
        // With equal heights the vertical overlap can only lower the IoU.
        let b = Box7 { h: a.h, ..b };
        prop_assert!(iou_3d(&a, &b).unwrap() <= rotated_iou_bev(&a, &b).unwrap() + 1e-12);
    }

    #[test]
    fn iou_is_invariant_to_rigid_motion_in_the_ground_plane(a in arb_box(), b in arb_box(), phi in -PI..PI, tx in -5.0f64..5.0, tz in -5.0f64..5.0) {
        let (s, c) = phi.sin_cos();
        // Rotation by yaw φ maps (x, z) to (x cos φ + z sin φ, −x sin φ + z cos φ).
        let mv = |bx: &Box7| Box7 {
            x: bx.x * c + bx.z * s + tx,
            z: -bx.x * s + bx.z * c + tz,
            yaw: bx.yaw + phi,
            ..*bx
        };
        let before = rotated_iou_bev(&a, &b).unwrap();
        let after = rotated_iou_bev(&mv(&a), &mv(&b)).unwrap();
        prop_assert!((before - after).abs() < 1e-9);
    }
}

#[test]
fn analytic_iou_agrees_with_monte_carlo() {
    let mut r = common::rng(31);
    for _ in 0..20 {
        let a = common::random_box(&mut r, 1.0);
        let b = common::random_box(&mut r, 1.0);
        let bev = rotated_iou_bev(&a, &b).unwrap();
        let mc = common::iou_bev_mc(&a, &b, 200_000, &mut r);
        assert!((bev - mc).abs() < 1e-2, "{bev} vs {mc}");
        let v = iou_3d(&a, &b).unwrap();
        let mc = common::iou_3d_mc(&a, &b, 200_000, &mut r);
        assert!((v - mc).abs() < 1e-2, "{v} vs {mc}");
    }
}

fn ap(dets: &[Detection], gts: &[GroundTruthFrame]) -> f64 {
    ap_compute(dets, gts, common::case_class(), 0.7, Difficulty::Moderate, Metric::Ap3d)
        .unwrap()
        .value
}

#[test]
fn ap_matches_threshold_enumeration() {
    let mut r = common::rng(2);
    for _ in 0..300 {
        let (cases, gt) = common::random_ap_case(&mut r);
        let (dets, gts) = common::case_inputs(&cases, &gt);
        let want = common::ap_enumeration_oracle(&cases, &gt);
        let got = ap(&dets, &gts);
        assert!((got - want).abs() < 1e-9, "{cases:?} {gt:?}: {got} vs {want}");
    }
}

#[test]
fn ap_ignores_monotone_score_transforms() {
    let mut r = common::rng(3);
    for _ in 0..100 {
        let (cases, gt) = common::random_ap_case(&mut r);
        let (dets, gts) = common::case_inputs(&cases, &gt);
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                score: (3.0 * d.score - 1.0).tanh(),
                ..*d
            })
            .collect();
        assert_eq!(ap(&dets, &gts), ap(&squashed, &gts));
    }
}

#[test]
fn lowest_scored_false_positive_changes_nothing() {
    let mut r = common::rng(4);
    for _ in 0..100 {
        let (cases, gt) = common::random_ap_case(&mut r);
        let (mut dets, gts) = common::case_inputs(&cases, &gt);
        let before = ap(&dets, &gts);
        dets.push(Detection {
            t_us: 0,
            class: common::case_class(),
            score: -1.0,
            bbox: Box7 {
                x: -500.0,
                ..common::case_gt_box(0, 0)
            },
        });
        assert_eq!(before, ap(&dets, &gts));
    }
}

#[test]
fn stricter_threshold_never_raises_ap() {
    let mut r = common::rng(5);
    let gt_box = |i: usize| Box7 {
        x: 8.0 * i as f64,
        ..Class::Vehicle.template()
    };
    let gts = vec![GroundTruthFrame {
        t_us: 0,
        boxes: (0..6)
            .map(|i| GtBox {
                class: Class::Vehicle,
                difficulty: Difficulty::Easy,
                bbox: gt_box(i),
            })
            .collect(),
    }];
    let dets: Vec<Detection> = (0..6)
        .map(|i| Detection {
            t_us: 0,
            class: Class::Vehicle,
            score: r.random_range(0.0..1.0),
            bbox: Box7 {
                x: gt_box(i).x + r.random_range(-0.8..0.8),
                z: gt_box(i).z + r.random_range(-0.8..0.8),
                ..gt_box(i)
            },
        })
        .collect();
    let mut last = f64::INFINITY;
    for thr in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let v = ap_compute(&dets, &gts, Class::Vehicle, thr, Difficulty::Easy, Metric::ApBev)
            .unwrap()
            .value;
        assert!(v <= last);
        last = v;
    }
}

#[test]
fn moderate_bucket_includes_easy_boxes() {
    let g = |x: f64, difficulty| GtBox {
        class: Class::Pedestrian,
        difficulty,
        bbox: Box7 {
            x,
            ..Class::Pedestrian.template()
        },
    };
    let gts = vec![GroundTruthFrame {
        t_us: 0,
        boxes: vec![g(0.0, Difficulty::Easy), g(5.0, Difficulty::Moderate)],
    }];
    let det = Detection {
        t_us: 0,
        class: Class::Pedestrian,
        score: 0.8,
        bbox: gts[0].boxes[0].bbox,
    };
    let run = |d| {
        ap_compute(&[det], &gts, Class::Pedestrian, 0.5, d, Metric::ApBev)
            .unwrap()
            .value
    };
    assert_eq!(run(Difficulty::Easy), 100.0);
    // One of two moderate boxes found: recall 1/2 at precision 1.
    assert_eq!(run(Difficulty::Moderate), 50.0);
}

#[test]
fn r40_hand_cases() {
    assert_eq!(r40_from_flags(&[], 3), 0.0);
    assert_eq!(r40_from_flags(&[true, true], 0), 0.0);
    assert_eq!(r40_from_flags(&[true, true], 2), 100.0);
    // TP, FP, TP over 2 GT: recall 1/2 at 1, recall 1 at 2/3.
    let v = r40_from_flags(&[true, false, true], 2);
    assert!((v - 100.0 * (20.0 * 1.0 + 20.0 * 2.0 / 3.0) / 40.0).abs() < 1e-9);
}

#[test]
fn detections_in_other_frames_are_false_positives() {
    let (cases, gt) = (
        vec![common::CaseDet {
            frame: 0,
            score: 0.9,
            gt: Some(0),
        }],
        vec![1],
    );
    let (mut dets, gts) = common::case_inputs(&cases, &gt);
    assert_eq!(ap(&dets, &gts), 100.0);
    dets[0].t_us += 1;
    assert_eq!(ap(&dets, &gts), 0.0);
    assert!(map_summary(&[]).unwrap().is_empty());
}
