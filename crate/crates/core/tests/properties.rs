use std::collections::BTreeMap;

use linf_slam::geometry::residual_ratio;
use linf_slam::io::{read_points, read_poses, write_points, write_poses};
use linf_slam::krot::{triangulate_point_linf, KRotConfig};
use linf_slam::metrics::{evaluate, Similarity};
use linf_slam::rotavg::chordal_cost;
use linf_slam::synth::look_at;
use linf_slam::tdc::DirectionConstraint;
use linf_slam::{CovisibilityGraph, Edge, KeyframePose, MapPoint, Rotation};
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Rotation> {
    vec3(3.0).prop_map(|w| Rotation::exp(&w))
}

fn similarity() -> impl Strategy<Value = Similarity> {
    (0.1f64..10.0, rotation(), vec3(50.0)).prop_map(|(s, r, d)| Similarity { s, r, d })
}

fn trajectory(n: usize) -> impl Strategy<Value = BTreeMap<usize, KeyframePose>> {
    prop::collection::vec((rotation(), vec3(10.0)), n).prop_map(|v| v.into_iter().enumerate().map(|(i, (r, c))| (i, KeyframePose::from_centre(r, &c))).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_log_round_trip(w in vec3(3.0)) {
        prop_assume!(w.norm() < std::f64::consts::PI - 1e-3);
        let r = Rotation::exp(&w);
        prop_assert!((r.log() - w).norm() < 1e-9);
        prop_assert!((r.matrix() * r.matrix().transpose() - nalgebra::Matrix3::identity()).amax() < 1e-12);
        prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_invariant_to_a_similarity_of_the_estimate(gt in trajectory(6), noise in trajectory(6), sim in similarity()) {
        let est: BTreeMap<_, _> = gt.iter().map(|(f, p)| {
            let n = &noise[f];
            (*f, KeyframePose::from_centre(Rotation::exp(&(n.r.log() * 0.01)) * p.r, &(p.centre() + n.centre() * 0.01)))
        }).collect();
        let (a, _) = evaluate(&est, &gt).unwrap();
        let (b, _) = evaluate(&sim.apply_poses(&est), &gt).unwrap();
        for (x, y) in a.pos_err.iter().zip(&b.pos_err).chain(a.rot_err_deg.iter().zip(&b.rot_err_deg)) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn poses_and_points_survive_a_file_round_trip(poses in trajectory(5), pts in prop::collection::vec(vec3(1e3), 1..20)) {
        let mut buf = Vec::new();
        write_poses(&mut buf, &poses).unwrap();
        let back = read_poses(&buf[..]).unwrap();
        for (f, p) in &poses {
            prop_assert!(back[f].r.angle_to(&p.r) < 1e-14);
            prop_assert_eq!(back[f].t, p.t);
        }
        let pts: Vec<MapPoint> = pts.into_iter().enumerate().map(|(track_id, x)| MapPoint { track_id, x }).collect();
        let mut buf = Vec::new();
        write_points(&mut buf, &pts).unwrap();
        prop_assert_eq!(read_points(&buf[..]).unwrap(), pts);
    }

    #[test]
    fn chordal_cost_ignores_the_world_frame(rots in prop::collection::vec(rotation(), 4), meas in prop::collection::vec(rotation(), 6), g in rotation()) {
        let pairs = [(0, 1), (1, 2), (2, 3), (0, 3), (0, 2), (1, 3)];
        let mut graph = CovisibilityGraph::new();
        for ((j, k), m) in pairs.iter().zip(&meas) {
            graph.add_edge(Edge { j: *j, k: *k, r_jk: *m, t_e: None, weight: 1 }).unwrap();
        }
        let a: BTreeMap<_, _> = rots.iter().copied().enumerate().collect();
        let b: BTreeMap<_, _> = rots.iter().map(|r| *r * g).enumerate().collect();
        let (ca, cb) = (chordal_cost(&graph, &a).unwrap(), chordal_cost(&graph, &b).unwrap());
        prop_assert!((ca - cb).abs() < 1e-9 * (1.0 + ca));
    }

    #[test]
    fn direction_cone_agrees_with_the_angle(t in vec3(1.0), d in vec3(5.0), alpha_deg in 0.5f64..45.0) {
        prop_assume!(t.norm() > 1e-3 && d.norm() > 1e-3);
        let c = DirectionConstraint::new(0, 1, t, alpha_deg.to_radians()).unwrap();
        let angle = c.angle(&Vector3::zeros(), &d);
        prop_assume!((angle - c.alpha).abs() > 1e-9);
        prop_assert_eq!(c.violation(&Vector3::zeros(), &d) <= 0.0, angle < c.alpha);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn triangulation_level_is_invariant_to_a_rigid_motion(
        x in vec3(1.0),
        offsets in prop::collection::vec((vec3(2.0), (-0.01f64..0.01, -0.01f64..0.01)), 3),
        g in rotation(),
        shift in vec3(20.0),
    ) {
        let views: Vec<(KeyframePose, Vector2<f64>)> = offsets.iter().map(|(o, (nx, ny))| {
            let c = x + o + Vector3::new(0.0, 0.0, -5.0);
            let pose = KeyframePose::from_centre(look_at(&c, &x), &c);
            let q = pose.transform(&x);
            (pose, Vector2::new(q.x / q.z + nx, q.y / q.z + ny))
        }).collect();
        let sim = Similarity { s: 1.0, r: g, d: shift };
        let moved: Vec<_> = views.iter().map(|(p, u)| (sim.apply_pose(p), *u)).collect();
        let cfg = KRotConfig { tol: 1e-8, ..Default::default() };
        let (xa, ga) = triangulate_point_linf(&views, &cfg).unwrap();
        let (xb, gb) = triangulate_point_linf(&moved, &cfg).unwrap();
        prop_assert!((ga - gb).abs() <= 4.0 * cfg.tol, "{ga} vs {gb}");
        let worst = views.iter().map(|(p, u)| residual_ratio(&xa, p, u).unwrap()).fold(0.0, f64::max);
        prop_assert!(worst <= ga + 1e-6);
        let worst = moved.iter().map(|(p, u)| residual_ratio(&xb, p, u).unwrap()).fold(0.0, f64::max);
        prop_assert!(worst <= gb + 1e-6);
    }
}
