//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.
//! Tests share a lock so that timings are not distorted by each other.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use linf_slam::ba::{jacobian_check, random_instance, run_ba_slam, BaSlamConfig, SlamStatus};
use linf_slam::conic::{check_feasibility, LevelSetBuilder};
use linf_slam::geometry::residual_ratio;
use linf_slam::krot::{build_krot, remove_support_set, solve_krot, triangulate_point_linf, GaugeConfig, KRotConfig};
use linf_slam::metrics::evaluate;
use linf_slam::pipeline::{compare_runtime, detect_loops_proximity, run_linf_slam, run_linf_slam_with, KRotMode, MotionSource, PipelineConfig, SyntheticMotionSource};
use linf_slam::rotavg::{aligned_errors, irls_rotation_average, Loss, RotAvgConfig};
use linf_slam::synth::{generate, look_at, NoiseModel, SceneParams, SyntheticScene, TrajectoryKind};
use linf_slam::tdc::{build_tdc, direction_constraints, sample_tracks, solve_directions_only, solve_tdc};
use linf_slam::{CovisibilityGraph, Edge, FeatureTrack, FrameId, KeyframePose, Rotation};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, ok: bool, detail: String) {
    // written past the test harness capture so the summary lands in the log
    let _ = writeln!(std::io::stderr(), "{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn scene(kind: TrajectoryKind, n: usize, pts: usize, noise: NoiseModel, seed: u64) -> SyntheticScene {
    generate(kind, &SceneParams { n_frames: n, n_points: pts, noise, ..Default::default() }, seed).unwrap()
}

fn frames(s: &SyntheticScene) -> Vec<FrameId> {
    s.gt_poses.keys().copied().collect()
}

fn with_rotations(centres: &BTreeMap<FrameId, Vector3<f64>>, rot: &BTreeMap<FrameId, Rotation>) -> BTreeMap<FrameId, KeyframePose> {
    centres.iter().map(|(f, c)| (*f, KeyframePose::from_centre(rot[f], c))).collect()
}

#[test]
fn zero_noise_circle_is_exact() {
    let _g = serial();
    let start = Instant::now();
    let s = scene(TrajectoryKind::Circle, 20, 100, NoiseModel::none(), 101);
    let r = run_linf_slam(&frames(&s), &s.tracks, &[], &PipelineConfig::default()).unwrap();
    let rot_err = aligned_errors(&r.rotations, &s.rotations()).into_values().fold(0.0, f64::max);
    let window_gamma = r.windows.iter().filter_map(|w| w.gamma_star).fold(0.0, f64::max);
    let full = solve_krot(&build_krot(&r.rotations, &s.tracks, &GaugeConfig::default()).unwrap(), &KRotConfig::default()).unwrap();
    let (m, _) = evaluate(&full.poses(&r.rotations), &s.gt_poses).unwrap();
    let (pm, _) = evaluate(&r.poses, &s.gt_poses).unwrap();
    let rel = m.pos_rmse.max(pm.pos_rmse) / s.diameter();
    let secs = start.elapsed().as_secs_f64();
    let ok = rot_err < 1e-6 && full.gamma_star <= 1e-6 && window_gamma <= 1e-6 && rel < 1e-5 && secs < 30.0;
    report(
        "zero-noise exactness",
        ok,
        format!("rot {rot_err:.2e} rad, gamma {:.2e} (windows {window_gamma:.2e}), rmse/diameter {rel:.2e}, {secs:.1} s", full.gamma_star),
    );
}

#[test]
fn bounded_noise_windows_are_certified() {
    let _g = serial();
    let eps = 3.0 / 500.0;
    let s = scene(TrajectoryKind::Circle, 20, 200, NoiseModel::pixel(), 102);
    let cfg = KRotConfig::default();
    let rot = s.rotations();
    let mut worst = 0.0f64;
    let mut certified = true;
    for lo in (0..=10).step_by(5) {
        let set: BTreeSet<FrameId> = (lo..lo + 10).collect();
        let local = sample_tracks(&s.tracks.restricted(|f| set.contains(&f), 2), 60, lo as u64);
        let w_rot: BTreeMap<_, _> = set.iter().map(|f| (*f, rot[f])).collect();
        let p = build_krot(&w_rot, &local, &GaugeConfig::default()).unwrap();
        let sol = solve_krot(&p, &cfg).unwrap();
        worst = worst.max(sol.gamma_star);
        let below = check_feasibility(&p.program.build(sol.gamma_star - 2.0 * cfg.tol), &cfg.feas).unwrap();
        let above = check_feasibility(&p.program.build(sol.gamma_star + 2.0 * cfg.tol), &cfg.feas).unwrap();
        certified &= !below.is_feasible() && above.is_feasible();
    }
    report("bounded-noise optimality", worst <= eps && certified, format!("max gamma {worst:.5} vs bound {eps:.5}, certificates hold: {certified}"));
}

/// Minimises the larger of the two reprojection errors over points
/// `C1 + R1^T [x, y, 1] / rho`: a grid on `(x, y, rho)` followed by a pattern
/// search over fixed and random directions with a shrinking step.
fn brute_force_max_residual(views: &[(KeyframePose, Vector2<f64>)], rng: &mut ChaCha8Rng) -> f64 {
    let (p1, u1) = views[0];
    let (p2, u2) = views[1];
    let f = |v: &Vector3<f64>| {
        if v.z <= 0.0 {
            return f64::INFINITY;
        }
        let x = p1.centre() + p1.r.transpose().rotate(&Vector3::new(v.x, v.y, 1.0)) / v.z;
        let r2 = residual_ratio(&x, &p2, &u2).unwrap_or(f64::INFINITY);
        (Vector2::new(v.x, v.y) - u1).norm().max(r2)
    };
    let (half, rho_max, n) = (0.06, 1.0, 30);
    let scale = Vector3::new(2.0 * half / n as f64, 2.0 * half / n as f64, rho_max / n as f64);
    let mut best = (Vector3::new(u1.x, u1.y, 0.2), f64::INFINITY);
    for i in 0..=n {
        for j in 0..=n {
            for k in 1..=n {
                let v = Vector3::new(u1.x - half + scale.x * i as f64, u1.y - half + scale.y * j as f64, scale.z * k as f64);
                let val = f(&v);
                if val < best.1 {
                    best = (v, val);
                }
            }
        }
    }
    let mut dirs: Vec<Vector3<f64>> = (0..27)
        .map(|c| Vector3::new((c % 3) as f64 - 1.0, ((c / 3) % 3) as f64 - 1.0, (c / 9) as f64 - 1.0))
        .filter(|d| d.norm() > 0.0)
        .collect();
    dirs.extend((0..300).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))));
    let dirs: Vec<Vector3<f64>> = dirs.into_iter().map(|d| d.normalize().component_mul(&scale)).collect();
    let mut step = 1.0;
    while step > 1e-10 {
        let mut moved = false;
        for d in &dirs {
            let v = best.0 + d * step;
            let val = f(&v);
            if val < best.1 {
                best = (v, val);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best.1
}

#[test]
fn bisection_matches_brute_force() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let cfg = KRotConfig { tol: 1e-7, ..Default::default() };
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let target = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let views: Vec<(KeyframePose, Vector2<f64>)> = (0..2)
            .map(|_| {
                let c = target + Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-6.0..-3.0));
                let pose = KeyframePose::from_centre(look_at(&c, &target), &c);
                let q = pose.transform(&target);
                let u = Vector2::new(q.x / q.z, q.y / q.z) + Vector2::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
                (pose, u)
            })
            .collect();
        let (_, g) = triangulate_point_linf(&views, &cfg).unwrap();
        let brute = brute_force_max_residual(&views, &mut rng);
        worst = worst.max((g - brute).abs());
    }
    report("bisection vs brute force", worst <= 1e-4, format!("max |gamma - brute| {worst:.2e} over 25 instances"));
}

#[test]
fn single_node_average_is_the_polar_factor() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let base = Rotation::exp(&Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
        let n = rng.random_range(3..9);
        let mut g = CovisibilityGraph::new();
        let mut anchors = BTreeMap::new();
        let mut sum = Matrix3::zeros();
        for i in 1..=n {
            let noise = Rotation::exp(&Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)));
            let m = noise * base;
            sum += m.matrix();
            g.add_edge(Edge { j: i, k: 0, r_jk: m, t_e: None, weight: 1 }).unwrap();
            anchors.insert(i, Rotation::identity());
        }
        let cfg = RotAvgConfig { loss: Loss::Chordal, anchors, tol: 1e-12, ..Default::default() };
        let est = irls_rotation_average(&g, &BTreeMap::from([(0, Rotation::identity())]), &cfg).unwrap();
        worst = worst.max(est.rotations[&0].angle_to(&Rotation::project(&sum)));
    }
    report("chordal single-node mean", worst <= 1e-8, format!("max angle to polar factor {worst:.2e} rad"));
}

fn loop_source<'a>(s: &'a SyntheticScene, window: usize) -> SyntheticMotionSource<'a> {
    SyntheticMotionSource {
        poses: &s.gt_poses,
        tracks: &s.tracks,
        drift_deg_per_step: 0.2,
        drift_axis: Vector3::y(),
        direction_noise_deg: 0.5,
        loop_gap: window + 1,
        loop_weight: 1_000_000,
        min_shared: 8,
        seed: 3,
    }
}

#[test]
fn loop_closure_halves_the_drift() {
    let _g = serial();
    let s = scene(TrajectoryKind::TwoLoop, 40, 400, NoiseModel::pixel(), 11);
    let cfg = PipelineConfig { alpha_deg: 2.0, loop_sample: 300, ..Default::default() };
    let events = detect_loops_proximity(&s.gt_poses, 2.0, cfg.window);
    let start = Instant::now();
    let r = run_linf_slam_with(&frames(&s), &s.tracks, &events, &loop_source(&s, cfg.window), &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (pre, _) = evaluate(&r.pre_closure, &s.gt_poses).unwrap();
    let (post, _) = evaluate(&r.poses, &s.gt_poses).unwrap();
    let closure = r.closure.as_ref().expect("loop closure ran");
    let ok = post.pos_rmse <= 0.5 * pre.pos_rmse && secs < 120.0 && closure.n_tracks == 300;
    report(
        "loop closure",
        ok,
        format!("rmse {:.4} -> {:.4} (ratio {:.3}), rot max {:.3} deg, {} tracks, {secs:.1} s", pre.pos_rmse, post.pos_rmse, post.pos_rmse / pre.pos_rmse, post.rot_max_deg, closure.n_tracks),
    );
}

#[test]
fn structure_tightens_directions_only() {
    let _g = serial();
    let s = scene(TrajectoryKind::Circle, 14, 200, NoiseModel::pixel(), 106);
    let src = SyntheticMotionSource { drift_deg_per_step: 0.0, direction_noise_deg: 0.5, loop_gap: usize::MAX, ..loop_source(&s, 4) };
    let mut graph = CovisibilityGraph::new();
    for k in 1..14usize {
        for j in k.saturating_sub(4)..k {
            if let Some(e) = src.relative(j, k) {
                graph.add_edge(e).unwrap();
            }
        }
    }
    let rot = s.rotations();
    let cfg = KRotConfig::default();
    let dirs = direction_constraints(&graph, &rot, 2f64.to_radians()).unwrap();
    let tracks = sample_tracks(&s.tracks, 300, 0);
    let tdc = solve_tdc(&build_tdc(&rot, &tracks, &dirs, &GaugeConfig::default()).unwrap(), &cfg).unwrap();
    let only = solve_directions_only(&rot, &dirs, &GaugeConfig::default(), &cfg).unwrap();
    let (m_tdc, _) = evaluate(&tdc.poses(&rot), &s.gt_poses).unwrap();
    let (m_dir, _) = evaluate(&with_rotations(&only, &rot), &s.gt_poses).unwrap();
    report(
        "structure matters",
        m_dir.pos_rmse >= m_tdc.pos_rmse,
        format!("directions-only rmse {:.5} >= with structure {:.5}", m_dir.pos_rmse, m_tdc.pos_rmse),
    );
}

#[test]
fn pure_rotation_is_handled() {
    let _g = serial();
    let s = scene(TrajectoryKind::PureRotation, 20, 300, NoiseModel::pixel(), 107);
    let r = run_linf_slam(&frames(&s), &s.tracks, &[], &PipelineConfig::default()).unwrap();
    let rot_err = aligned_errors(&r.rotations, &s.rotations()).into_values().fold(0.0, f64::max).to_degrees();
    let ba = run_ba_slam(&frames(&s), &s.tracks, &BTreeSet::new(), &BaSlamConfig::default()).unwrap();
    let ok = rot_err < 0.5 && ba.status == SlamStatus::InitializationFailed;
    report("pure rotation", ok, format!("max rotation error {rot_err:.3} deg, BA status {:?}", ba.status));
}

#[test]
fn bundle_adjustment_is_slower_than_rotation_averaging() {
    let _g = serial();
    let s = scene(TrajectoryKind::Circle, 60, 300, NoiseModel::pixel(), 108);
    let series = compare_runtime(&frames(&s), &s.tracks, &PipelineConfig::default(), &BaSlamConfig::default()).unwrap();
    let ok = series.rows.len() >= 50 && series.median_ratio() > 1.0;
    report(
        "runtime ordering",
        ok,
        format!("{} keyframes, median rotavg {:.2e} s, median BA {:.2e} s, ratio {:.1}", series.rows.len(), series.median_rotavg(), series.median_ba(), series.median_ratio()),
    );
}

#[test]
fn deferred_solves_match_inline() {
    let _g = serial();
    let s = scene(TrajectoryKind::Circle, 20, 150, NoiseModel::pixel(), 109);
    let inline = PipelineConfig { triangulate: false, ..Default::default() };
    let deferred = PipelineConfig { krot_mode: KRotMode::Deferred, workers: 4, ..inline.clone() };
    let a = run_linf_slam(&frames(&s), &s.tracks, &[], &inline).unwrap();
    let b = run_linf_slam(&frames(&s), &s.tracks, &[], &deferred).unwrap();
    let diff = a.poses.iter().map(|(f, p)| (p.centre() - b.poses[f].centre()).amax()).fold(0.0, f64::max);
    report("deferral soundness", diff <= 2.0 * inline.krot.tol, format!("max centre difference {diff:.2e}"));
}

#[test]
fn gross_outlier_is_removed_in_one_round() {
    let _g = serial();
    let s = scene(TrajectoryKind::Circle, 6, 20, NoiseModel::none(), 110);
    let mut tracks = s.tracks.clone();
    let victim = tracks.iter().find(|t| t.len() >= 3).unwrap().clone();
    let mut obs = victim.observations().to_vec();
    let frame = obs[1].frame_id;
    obs[1].u += Vector2::new(0.05, -0.04);
    tracks.insert(FeatureTrack::new(victim.track_id, obs).unwrap());
    let cfg = KRotConfig::default();
    let p = build_krot(&s.rotations(), &tracks, &GaugeConfig::default()).unwrap();
    let sol = solve_krot(&p, &cfg).unwrap();
    let out = remove_support_set(&p, &sol, 1e-6, &cfg).unwrap();
    let ok = out.rounds == 1 && out.removed.contains(&(victim.track_id, frame)) && out.solution.gamma_star <= 1e-6;
    report(
        "outlier removal",
        ok,
        format!("gamma {:.2e} -> {:.2e} after {} round(s), {} measurement(s) removed", sol.gamma_star, out.solution.gamma_star, out.rounds, out.removed.len()),
    );
}

#[test]
fn bundle_adjustment_jacobians_match_finite_differences() {
    let _g = serial();
    let worst = (0..20).map(|seed| jacobian_check(&random_instance(seed, 3, 5, false))).fold(0.0, f64::max);
    report("jacobian gate", worst < 1e-5, format!("max deviation {worst:.2e} over 20 instances"));
}
