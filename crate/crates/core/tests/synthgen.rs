mod common;

use evstereo::boxes::{Box7, Class};
use evstereo::eval::Difficulty;
use evstereo::synth::{emit_ground_truth, render_events, EgoKeyframe, Keyframe, ObjectSpec, SceneSpec};

fn track(class: Class, from: Box7, to: Box7, end: i64) -> ObjectSpec {
    ObjectSpec {
        class,
        texture_density: 0.2,
        keyframes: vec![
            Keyframe { t_us: 0, bbox: from },
            Keyframe { t_us: end, bbox: to },
        ],
    }
}

fn two_object_scene() -> SceneSpec {
    let car = Box7 {
        x: 1.0,
        z: 8.0,
        ..Class::Vehicle.template()
    };
    let ped = Box7 {
        x: -2.0,
        z: 6.0,
        yaw: 1.2,
        ..Class::Pedestrian.template()
    };
    SceneSpec {
        rig: common::desk_rig(),
        duration_us: 40_000,
        micro_step_us: 200,
        seed: 11,
        ego: vec![],
        objects: vec![
            track(Class::Vehicle, car, Box7 { x: 1.8, yaw: 0.2, ..car }, 40_000),
            track(Class::Pedestrian, ped, Box7 { x: -1.6, z: 5.5, ..ped }, 40_000),
        ],
    }
}

#[test]
fn streams_are_valid_and_deterministic() {
    let s = two_object_scene();
    let (l, r) = render_events(&s).unwrap();
    assert!(!l.is_empty() && !r.is_empty());
    for st in [&l, &r] {
        assert_eq!((st.width, st.height), (s.rig.width, s.rig.height));
        assert!(st.events().windows(2).all(|w| w[0].t <= w[1].t));
        assert!(st.events().iter().all(|e| e.t > 0 && e.t <= s.duration_us && e.t % s.micro_step_us == 0));
    }
    assert_eq!((l.clone(), r.clone()), render_events(&s).unwrap());
    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(render_events(&other).unwrap().0, l);
}

#[test]
fn faster_playback_compresses_timestamps_exactly() {
    let s = two_object_scene();
    let fast = s.time_compressed(2).unwrap();
    let (l, r) = render_events(&s).unwrap();
    let (lf, rf) = render_events(&fast).unwrap();
    let halve = |st: &evstereo::event::EventStream| st.events().iter().map(|e| (e.u, e.v, e.t / 2, e.p)).collect::<Vec<_>>();
    let keep = |st: &evstereo::event::EventStream| st.events().iter().map(|e| (e.u, e.v, e.t, e.p)).collect::<Vec<_>>();
    assert_eq!(halve(&l), keep(&lf));
    assert_eq!(halve(&r), keep(&rf));
    assert!(s.time_compressed(3).is_err());
}

#[test]
fn ego_motion_is_relative_object_motion() {
    let obj = Box7 {
        x: 0.5,
        z: 7.0,
        ..Class::Vehicle.template()
    };
    let mut moving_camera = two_object_scene();
    moving_camera.objects = vec![track(Class::Vehicle, obj, obj, 40_000)];
    moving_camera.ego = vec![
        EgoKeyframe {
            t_us: 0,
            position: [0.0; 3],
            yaw: 0.0,
        },
        EgoKeyframe {
            t_us: 40_000,
            position: [0.5, 0.0, 1.0],
            yaw: 0.0,
        },
    ];
    let mut moving_object = moving_camera.clone();
    moving_object.ego.clear();
    moving_object.objects = vec![track(Class::Vehicle, obj, Box7 { x: 0.0, z: 6.0, ..obj }, 40_000)];
    for t in (0..=40_000).step_by(1_000) {
        let a = moving_camera.pose_at(0, t).unwrap();
        let b = moving_object.pose_at(0, t).unwrap();
        for (p, q) in a.to_array().iter().zip(b.to_array()) {
            assert!((p - q).abs() < 1e-12, "t {t}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn camera_yaw_rotates_object_heading() {
    let obj = Box7 {
        x: 0.0,
        z: 8.0,
        yaw: 0.3,
        ..Class::Vehicle.template()
    };
    let mut s = two_object_scene();
    s.objects = vec![track(Class::Vehicle, obj, obj, 40_000)];
    s.ego = vec![
        EgoKeyframe {
            t_us: 0,
            position: [0.0; 3],
            yaw: 0.0,
        },
        EgoKeyframe {
            t_us: 40_000,
            position: [0.0; 3],
            yaw: 0.1,
        },
    ];
    let end = s.pose_at(0, 40_000).unwrap();
    assert!((end.yaw - 0.2).abs() < 1e-12);
    // Distance from the camera is preserved under its rotation.
    assert!((end.x.hypot(end.z) - 8.0).abs() < 1e-12);
}

#[test]
fn ground_truth_follows_the_tracks() {
    let s = two_object_scene();
    let instants = [10_000, 20_000, 40_000];
    let frames = emit_ground_truth(&s, &instants).unwrap();
    assert_eq!(frames.len(), 3);
    for (f, &t) in frames.iter().zip(&instants) {
        assert_eq!(f.t_us, t);
        assert_eq!(f.boxes.len(), 2);
        for (i, b) in f.boxes.iter().enumerate() {
            assert_eq!(b.class, s.objects[i].class);
            assert_eq!(b.difficulty, Difficulty::Easy);
            assert_eq!(b.bbox, s.pose_at(i, t).unwrap());
        }
    }
    let mid = &frames[1].boxes[0].bbox;
    assert!((mid.x - 1.4).abs() < 1e-12 && (mid.yaw - 0.1).abs() < 1e-12);
    assert!(emit_ground_truth(&s, &[50_000]).is_err());
}

#[test]
fn invalid_scenes_are_rejected() {
    let mut behind = two_object_scene();
    behind.objects[0].keyframes[1].bbox.z = -3.0;
    assert!(render_events(&behind).is_err());
    let mut unsorted = two_object_scene();
    unsorted.objects[0].keyframes.swap(0, 1);
    assert!(unsorted.validate().is_err());
    let mut flat = two_object_scene();
    flat.objects[1].keyframes[0].bbox.h = 0.0;
    assert!(flat.validate().is_err());
}

#[test]
fn spec_json_round_trip() {
    let s = two_object_scene();
    let json = serde_json::to_string(&s).unwrap();
    let back: SceneSpec = serde_json::from_str(&json).unwrap();
    assert_eq!(back, s);
}
