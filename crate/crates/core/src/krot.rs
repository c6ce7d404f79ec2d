//! Known-rotation problem: camera translations and scene points minimizing
//! the maximum reprojection error, given camera orientations.
//!
//! Each observation contributes `|A v| <= gamma b^T v` over `v = [X_i; t_j]`
//! plus a depth floor `b^T v >= delta`. The gauge is fixed by eliminating the
//! translation of one frame (set to zero) and one coordinate of a designated
//! point so that its depth in that frame is one.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::conic::{
    bisect_gamma, bracket_gamma, check_feasibility, initial_upper_bound, AffineVar, ConeConstraint, ConicError, FeasibilityConfig,
    GammaSolveResult, LevelCone, LevelSetBuilder, LinearConstraint, ParametricProgram, VarMap,
};
use crate::geometry::{build_a_b, residual_ratio, structure_block, KeyframePose, Rotation};
use crate::tracks::{FeatureTrack, FrameId, MapPoint, TrackId, TrackSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KRotError {
    #[error("track {0} has fewer than two usable observations")]
    UnderconstrainedTrack(TrackId),
    #[error("no rotation for frame {0}")]
    MissingRotation(FrameId),
    #[error("no observation available to fix the scale in frame {0}")]
    NoScaleMeasurement(FrameId),
    #[error("problem has no measurements")]
    Empty,
    #[error("no feasible configuration with residual below {0}")]
    Infeasible(f64),
    #[error("support-set removal would leave too few measurements")]
    AllMeasurementsRemoved,
    #[error(transparent)]
    Conic(#[from] ConicError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeConfig {
    /// Frame whose translation is fixed to zero; lowest observed frame if unset.
    pub fixed_frame: Option<FrameId>,
    /// Track whose depth in the fixed frame is set to one; lowest track
    /// observed in that frame if unset.
    pub scale_track: Option<TrackId>,
    pub depth_floor: f64,
}

impl Default for GaugeConfig {
    fn default() -> Self {
        Self { fixed_frame: None, scale_track: None, depth_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KRotConfig {
    pub tol: f64,
    pub feas: FeasibilityConfig,
    /// Levels above this are treated as "no consistent configuration".
    pub gamma_max: f64,
    /// Level tried first as the upper end of the bracket.
    pub upper_hint: Option<f64>,
}

impl Default for KRotConfig {
    fn default() -> Self {
        Self { tol: 1e-6, feas: FeasibilityConfig::default(), gamma_max: 1.0, upper_hint: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub track_id: TrackId,
    pub frame_id: FrameId,
    pub u: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KRotProblem {
    pub rotations: BTreeMap<FrameId, Rotation>,
    pub tracks: TrackSet,
    /// One entry per cone, in cone order.
    pub measurements: Vec<Measurement>,
    pub fixed_frame: FrameId,
    pub scale_track: TrackId,
    pub depth_floor: f64,
    /// Offset of each point in the full variable vector.
    pub point_vars: BTreeMap<TrackId, usize>,
    /// Offset of each translation in the full variable vector.
    pub trans_vars: BTreeMap<FrameId, usize>,
    pub map: VarMap,
    pub program: ParametricProgram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KRotSolution {
    pub points: BTreeMap<TrackId, MapPoint>,
    pub translations: BTreeMap<FrameId, Vector3<f64>>,
    pub gamma_star: f64,
    pub certificate: GammaSolveResult,
    /// Reprojection error of each measurement at the returned solution.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

impl KRotSolution {
    pub fn poses(&self, rotations: &BTreeMap<FrameId, Rotation>) -> BTreeMap<FrameId, KeyframePose> {
        self.translations.iter().map(|(f, t)| (*f, KeyframePose::new(rotations[f], *t))).collect()
    }

    pub fn centres(&self, rotations: &BTreeMap<FrameId, Rotation>) -> BTreeMap<FrameId, Vector3<f64>> {
        self.poses(rotations).into_iter().map(|(f, p)| (f, p.centre())).collect()
    }
}

/// Builds the cone program for the given rotations and tracks.
pub fn build_krot(rotations: &BTreeMap<FrameId, Rotation>, tracks: &TrackSet, gauge: &GaugeConfig) -> Result<KRotProblem, KRotError> {
    let mut frames = BTreeSet::new();
    for t in tracks.iter() {
        if t.len() < 2 {
            return Err(KRotError::UnderconstrainedTrack(t.track_id));
        }
        for f in t.frames() {
            if !rotations.contains_key(&f) {
                return Err(KRotError::MissingRotation(f));
            }
            frames.insert(f);
        }
    }
    let fixed = match gauge.fixed_frame {
        Some(f) if frames.contains(&f) => f,
        Some(f) => return Err(KRotError::NoScaleMeasurement(f)),
        None => *frames.iter().next().ok_or(KRotError::Empty)?,
    };
    let scale_track = match gauge.scale_track {
        Some(id) if tracks.get(id).is_some_and(|t| t.in_frame(fixed).is_some()) => id,
        Some(_) => return Err(KRotError::NoScaleMeasurement(fixed)),
        None => tracks.iter().find(|t| t.in_frame(fixed).is_some()).map(|t| t.track_id).ok_or(KRotError::NoScaleMeasurement(fixed))?,
    };

    let r3 = rotations[&fixed].row(2);
    let elim = (0..3).max_by(|&a, &b| r3[a].abs().total_cmp(&r3[b].abs())).unwrap();

    let mut vars = Vec::new();
    let mut point_vars = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut next = 0;
    for t in tracks.iter() {
        point_vars.insert(t.track_id, vars.len());
        let start = next;
        if t.track_id == scale_track {
            // r3 . X = 1 solved for the coordinate with the largest coefficient
            let others: Vec<usize> = (0..3).filter(|&c| c != elim).collect();
            let ids = [next, next + 1];
            next += 2;
            for c in 0..3 {
                if c == elim {
                    let terms = others.iter().zip(ids).map(|(&o, i)| (i, -r3[o] / r3[elim])).collect();
                    vars.push(AffineVar { terms, constant: 1.0 / r3[elim] });
                } else {
                    let k = others.iter().position(|&o| o == c).unwrap();
                    vars.push(AffineVar::free(ids[k]));
                }
            }
        } else {
            for _ in 0..3 {
                vars.push(AffineVar::free(next));
                next += 1;
            }
        }
        blocks.push(start..next);
    }
    let mut trans_vars = BTreeMap::new();
    for &f in &frames {
        trans_vars.insert(f, vars.len());
        for _ in 0..3 {
            if f == fixed {
                vars.push(AffineVar::fixed(0.0));
            } else {
                vars.push(AffineVar::free(next));
                next += 1;
            }
        }
    }
    let map = VarMap { vars, n_reduced: next };

    let mut cones = Vec::new();
    let mut linears = Vec::new();
    let mut measurements = Vec::new();
    for t in tracks.iter() {
        let p = point_vars[&t.track_id];
        for o in t.observations() {
            let q = trans_vars[&o.frame_id];
            let (a, b) = build_a_b(&rotations[&o.frame_id], &o.u);
            let full: Vec<usize> = (p..p + 3).chain(q..q + 3).collect();
            let a = DMatrix::from_fn(2, 6, |r, c| a[(r, c)]);
            let b = DVector::from_fn(6, |r, _| b[r]);
            let red = map.rewrite(&full, &a, &DVector::zeros(2), &b, 0.0);
            let k = red.vars.len();
            let cone = ConeConstraint::new(red.vars.clone(), red.a, red.a0, DVector::zeros(k), 0.0)?;
            cones.push(LevelCone { cone, level: Some((red.b.clone(), red.beta)) });
            if k > 0 && red.b.iter().any(|&v| v != 0.0) {
                linears.push(LinearConstraint::new(red.vars, red.b, gauge.depth_floor - red.beta)?);
            }
            measurements.push(Measurement { track_id: t.track_id, frame_id: o.frame_id, u: o.u });
        }
    }
    if measurements.is_empty() {
        return Err(KRotError::Empty);
    }
    let program = ParametricProgram { dim: map.n_reduced, cones, linears, blocks };
    let rotations = frames.iter().map(|f| (*f, rotations[f])).collect();
    Ok(KRotProblem {
        rotations,
        tracks: tracks.clone(),
        measurements,
        fixed_frame: fixed,
        scale_track,
        depth_floor: gauge.depth_floor,
        point_vars,
        trans_vars,
        map,
        program,
    })
}

impl KRotProblem {
    pub fn gauge(&self) -> GaugeConfig {
        GaugeConfig { fixed_frame: Some(self.fixed_frame), scale_track: Some(self.scale_track), depth_floor: self.depth_floor }
    }

    fn unpack(&self, y: &DVector<f64>) -> (BTreeMap<TrackId, MapPoint>, BTreeMap<FrameId, Vector3<f64>>) {
        let full = self.map.expand(y);
        let points = self.point_vars.iter().map(|(&id, &p)| (id, MapPoint { track_id: id, x: full.fixed_rows::<3>(p).into_owned() })).collect();
        let trans = self.trans_vars.iter().map(|(&f, &q)| (f, full.fixed_rows::<3>(q).into_owned())).collect();
        (points, trans)
    }

    /// Reduced vector for a configuration after moving it into this
    /// problem's gauge; `None` if the scale point is not in front of the
    /// fixed camera.
    pub fn reduce(&self, points: &BTreeMap<TrackId, Vector3<f64>>, translations: &BTreeMap<FrameId, Vector3<f64>>) -> Option<DVector<f64>> {
        let rf = &self.rotations[&self.fixed_frame];
        let tf = translations.get(&self.fixed_frame)?;
        let xs = points.get(&self.scale_track)?;
        let depth = rf.row(2).dot(xs) + tf.z;
        if !(depth > 0.0) {
            return None;
        }
        let s = 1.0 / depth;
        let d = rf.transpose() * *tf * s;
        let mut full = DVector::zeros(self.map.full_dim());
        for (id, &p) in &self.point_vars {
            let x = points.get(id)? * s + d;
            full.fixed_rows_mut::<3>(p).copy_from(&x);
        }
        for (f, &q) in &self.trans_vars {
            let t = translations.get(f)? * s - self.rotations[f] * d;
            full.fixed_rows_mut::<3>(q).copy_from(&t);
        }
        self.map.reduce(&full, 1e-9)
    }

    /// Reprojection errors of every measurement under a configuration.
    pub fn residuals(&self, points: &BTreeMap<TrackId, MapPoint>, translations: &BTreeMap<FrameId, Vector3<f64>>) -> Vec<f64> {
        self.measurements
            .iter()
            .map(|m| {
                let pose = KeyframePose::new(self.rotations[&m.frame_id], translations[&m.frame_id]);
                residual_ratio(&points[&m.track_id].x, &pose, &m.u).unwrap_or(f64::INFINITY)
            })
            .collect()
    }
}

/// `(lo, hi)` with `hi` feasible, trying `hint` first.
fn bracket<B: LevelSetBuilder + ?Sized>(builder: &B, hint: Option<f64>, gamma_max: f64, feas: &FeasibilityConfig) -> Result<(f64, f64), ConicError> {
    let mut start = 1e-3_f64.min(gamma_max);
    let mut lo = 0.0;
    if let Some(h) = hint.filter(|h| *h > 0.0 && *h <= gamma_max) {
        if check_feasibility(&builder.build(h), feas)?.is_feasible() {
            return Ok((0.0, h));
        }
        lo = h;
        start = (8.0 * h).min(gamma_max);
    }
    let (l, h) = bracket_gamma(builder, start, 8.0, gamma_max, feas)?;
    Ok((l.max(lo), h))
}

fn solve_levels<B: LevelSetBuilder + ?Sized>(builder: &B, hint: Option<f64>, cfg: &KRotConfig) -> Result<GammaSolveResult, KRotError> {
    let (lo, hi) = match bracket(builder, hint, cfg.gamma_max, &cfg.feas) {
        Ok(b) => b,
        Err(ConicError::NoFeasibleLevel(g)) => return Err(KRotError::Infeasible(g)),
        Err(e) => return Err(e.into()),
    };
    Ok(bisect_gamma(builder, lo, hi, cfg.tol, &cfg.feas)?)
}

/// Globally optimal translations and points by bisection.
pub fn solve_krot(problem: &KRotProblem, cfg: &KRotConfig) -> Result<KRotSolution, KRotError> {
    let cert = solve_levels(&problem.program, cfg.upper_hint, cfg)?;
    let (points, translations) = problem.unpack(&cert.x_star);
    let residuals = problem.residuals(&points, &translations);
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(KRotSolution { points, translations, gamma_star: cert.gamma_star, certificate: cert, residuals, max_residual })
}

/// Closest point to all viewing rays in the least-squares sense.
pub fn triangulate_midpoint(views: &[(KeyframePose, Vector2<f64>)]) -> Option<Vector3<f64>> {
    let mut m = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (pose, u) in views {
        let d = (pose.r.transpose() * Vector3::new(u.x, u.y, 1.0)).normalize();
        let p = Matrix3::identity() - d * d.transpose();
        let c = pose.centre();
        m += p;
        rhs += p * c;
    }
    let x = m.try_inverse()? * rhs;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Single-point program over `X` with fixed poses.
fn point_program(views: &[(KeyframePose, Vector2<f64>)], depth_floor: f64) -> Result<ParametricProgram, KRotError> {
    let mut cones = Vec::new();
    let mut linears = Vec::new();
    for (pose, u) in views {
        let s = structure_block(&pose.r, u);
        let t = pose.t;
        let a = DMatrix::from_fn(2, 3, |r, c| s[(r, c)]);
        let a0 = DVector::from_vec(vec![t.x - u.x * t.z, t.y - u.y * t.z]);
        let r3 = pose.r.row(2);
        let b = DVector::from_vec(vec![r3.x, r3.y, r3.z]);
        cones.push(LevelCone { cone: ConeConstraint::new(vec![0, 1, 2], a, a0, DVector::zeros(3), 0.0)?, level: Some((b.clone(), t.z)) });
        linears.push(LinearConstraint::new(vec![0, 1, 2], b, depth_floor - t.z)?);
    }
    Ok(ParametricProgram { dim: 3, cones, linears, blocks: Vec::new() })
}

/// Globally optimal L-infinity triangulation of one point with fixed poses.
pub fn triangulate_point_linf(views: &[(KeyframePose, Vector2<f64>)], cfg: &KRotConfig) -> Result<(Vector3<f64>, f64), KRotError> {
    if views.len() < 2 {
        return Err(KRotError::Empty);
    }
    let program = point_program(views, 1e-6)?;
    let mut hint = None;
    if let Some(mid) = triangulate_midpoint(views) {
        let probe = DVector::from_column_slice(mid.as_slice());
        if let Ok(ub) = initial_upper_bound(&program, &probe) {
            hint = Some(ub.max(cfg.tol));
        }
    }
    let cert = solve_levels(&program, hint, cfg)?;
    let x = Vector3::new(cert.x_star[0], cert.x_star[1], cert.x_star[2]);
    Ok((x, cert.gamma_star))
}

/// Triangulates a track from the poses of the frames that observe it.
pub fn triangulate_track(track: &FeatureTrack, poses: &BTreeMap<FrameId, KeyframePose>, cfg: &KRotConfig) -> Result<(MapPoint, f64), KRotError> {
    let views: Vec<_> = track.observations().iter().filter_map(|o| poses.get(&o.frame_id).map(|p| (*p, o.u))).collect();
    if views.len() < 2 {
        return Err(KRotError::UnderconstrainedTrack(track.track_id));
    }
    let (x, g) = triangulate_point_linf(&views, cfg)?;
    Ok((MapPoint { track_id: track.track_id, x }, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportRemoval {
    pub problem: KRotProblem,
    pub solution: KRotSolution,
    pub removed: Vec<(TrackId, FrameId)>,
    pub rounds: usize,
}

/// Repeatedly drops the measurements attaining the optimal residual until
/// the optimum is at most `gamma_target` (at most 10 rounds).
pub fn remove_support_set(problem: &KRotProblem, solution: &KRotSolution, gamma_target: f64, cfg: &KRotConfig) -> Result<SupportRemoval, KRotError> {
    let mut problem = problem.clone();
    let mut solution = solution.clone();
    let mut removed = Vec::new();
    let mut rounds = 0;
    while solution.gamma_star > gamma_target && rounds < 10 {
        rounds += 1;
        let cut = solution.certificate.infeasible_at - 1e-9;
        let mut support: Vec<usize> = (0..problem.measurements.len()).filter(|&i| solution.residuals[i] >= cut).collect();
        if support.is_empty() {
            let worst = (0..solution.residuals.len()).max_by(|&a, &b| solution.residuals[a].total_cmp(&solution.residuals[b])).unwrap();
            support.push(worst);
        }
        let drop: BTreeSet<(TrackId, FrameId)> = support.iter().map(|&i| (problem.measurements[i].track_id, problem.measurements[i].frame_id)).collect();
        let mut tracks = TrackSet::default();
        for t in problem.tracks.iter() {
            let kept: Vec<_> = t.observations().iter().filter(|o| !drop.contains(&(t.track_id, o.frame_id))).copied().collect();
            if kept.len() >= 2 {
                tracks.insert(FeatureTrack::new(t.track_id, kept).expect("subset of a valid track"));
            }
        }
        let frames: BTreeSet<FrameId> = tracks.observations().map(|o| o.frame_id).collect();
        if tracks.len() < 2 || frames.len() < 2 {
            return Err(KRotError::AllMeasurementsRemoved);
        }
        let old = problem.gauge();
        let gauge = GaugeConfig {
            fixed_frame: old.fixed_frame.filter(|f| frames.contains(f)),
            scale_track: old.scale_track.filter(|id| tracks.get(*id).is_some_and(|t| old.fixed_frame.is_some_and(|f| t.in_frame(f).is_some()))),
            depth_floor: old.depth_floor,
        };
        let gauge = if gauge.fixed_frame.is_none() { GaugeConfig { scale_track: None, ..gauge } } else { gauge };
        removed.extend(drop);
        problem = build_krot(&problem.rotations, &tracks, &gauge)?;
        solution = solve_krot(&problem, cfg)?;
    }
    Ok(SupportRemoval { problem, solution, removed, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{check_feasibility, LevelSetBuilder};
    use crate::geometry::project;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Cameras on a circle looking at the origin, points in a ball.
    fn circle_scene(n_cams: usize, n_pts: usize, noise: f64, seed: u64) -> (BTreeMap<FrameId, KeyframePose>, Vec<Vector3<f64>>, TrackSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: BTreeMap<FrameId, KeyframePose> = (0..n_cams)
            .map(|i| {
                let a = i as f64 / n_cams as f64 * std::f64::consts::TAU * 0.5;
                let c = Vector3::new(6.0 * a.cos(), 0.3 * (i as f64).sin(), 6.0 * a.sin());
                let z = (-c).normalize();
                let x = Vector3::y().cross(&z).normalize();
                let y = z.cross(&x);
                let r = Rotation::new(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])).unwrap();
                (i, KeyframePose::from_centre(r, &c))
            })
            .collect();
        let pts: Vec<Vector3<f64>> = (0..n_pts).map(|_| Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5))).collect();
        let mut tracks = TrackSet::default();
        for (i, x) in pts.iter().enumerate() {
            let obs = poses.iter().map(|(f, p)| {
                let mut u = project(x, p).unwrap();
                if noise > 0.0 {
                    let d = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * noise / std::f64::consts::SQRT_2;
                    u += d;
                }
                (*f, u)
            });
            tracks.insert(FeatureTrack::from_points(i, obs).unwrap());
        }
        (poses, pts, tracks)
    }

    fn rotations(poses: &BTreeMap<FrameId, KeyframePose>) -> BTreeMap<FrameId, Rotation> {
        poses.iter().map(|(f, p)| (*f, p.r)).collect()
    }

    #[test]
    fn counting() {
        let (poses, _, tracks) = circle_scene(2, 1, 0.0, 1);
        let p = build_krot(&rotations(&poses), &tracks, &GaugeConfig::default()).unwrap();
        assert_eq!(p.program.cones.len(), 2);
        assert_eq!(p.map.full_dim(), 3 + 6);
        // t of the first camera and one point coordinate are eliminated
        assert_eq!(p.program.dim, 2 + 3);
        let (poses, _, tracks) = circle_scene(4, 5, 0.0, 1);
        let p = build_krot(&rotations(&poses), &tracks, &GaugeConfig::default()).unwrap();
        let rows: usize = p.program.cones.iter().map(|c| c.cone.a_mat.nrows()).sum();
        assert_eq!(rows, 2 * 4 * 5);
        assert_eq!(p.map.full_dim(), 3 * 5 + 3 * 4);
        let mut lonely = tracks.clone();
        lonely.insert(FeatureTrack::from_points(99, [(0, Vector2::zeros())]).unwrap());
        assert_eq!(build_krot(&rotations(&poses), &lonely, &GaugeConfig::default()), Err(KRotError::UnderconstrainedTrack(99)));
        let mut missing = rotations(&poses);
        missing.remove(&3);
        assert_eq!(build_krot(&missing, &tracks, &GaugeConfig::default()), Err(KRotError::MissingRotation(3)));
    }

    #[test]
    fn noiseless_scene_is_exact() {
        let (poses, _, tracks) = circle_scene(6, 15, 0.0, 2);
        let rot = rotations(&poses);
        let p = build_krot(&rot, &tracks, &GaugeConfig::default()).unwrap();
        let s = solve_krot(&p, &KRotConfig::default()).unwrap();
        assert!(s.gamma_star <= 1e-6);
        assert!(s.max_residual <= s.certificate.feasible_at + 1e-9);
        let est = s.centres(&rot);
        let c0 = poses[&0].centre();
        let scale = (poses[&3].centre() - c0).norm() / (est[&3] - est[&0]).norm();
        for (f, c) in &est {
            let want = poses[f].centre() - c0;
            assert!(((c - est[&0]) * scale - want).norm() < 1e-4, "{f}");
        }
    }

    #[test]
    fn ground_truth_bounds_the_optimum_and_certificate_holds() {
        let eps = 3.0 / 500.0;
        let (poses, _, tracks) = circle_scene(5, 12, eps, 3);
        let p = build_krot(&rotations(&poses), &tracks, &GaugeConfig::default()).unwrap();
        let cfg = KRotConfig::default();
        let s = solve_krot(&p, &cfg).unwrap();
        assert!(s.gamma_star <= eps);
        let below = check_feasibility(&p.program.build(s.gamma_star - 2.0 * cfg.tol), &cfg.feas).unwrap();
        let above = check_feasibility(&p.program.build(s.gamma_star + 2.0 * cfg.tol), &cfg.feas).unwrap();
        assert!(!below.is_feasible() && above.is_feasible());
        let (_, pts, _) = circle_scene(5, 12, eps, 3);
        let pts: BTreeMap<_, _> = pts.into_iter().enumerate().collect();
        let ts: BTreeMap<_, _> = poses.iter().map(|(f, p)| (*f, p.t)).collect();
        let y = p.reduce(&pts, &ts).unwrap();
        let (mp, tr) = p.unpack(&y);
        let truth = p.residuals(&mp, &tr).into_iter().fold(0.0, f64::max);
        assert!(s.gamma_star <= truth + cfg.tol);
        assert!(p.program.build(truth * 1.0001).max_violation(&y) <= 1e-9);
    }

    #[test]
    fn gauge_choice_and_depth_floor_do_not_change_the_optimum() {
        let (poses, _, tracks) = circle_scene(4, 8, 2e-3, 4);
        let rot = rotations(&poses);
        let cfg = KRotConfig::default();
        let base = solve_krot(&build_krot(&rot, &tracks, &GaugeConfig::default()).unwrap(), &cfg).unwrap();
        let other = GaugeConfig { fixed_frame: Some(2), scale_track: Some(5), ..Default::default() };
        let alt = solve_krot(&build_krot(&rot, &tracks, &other).unwrap(), &cfg).unwrap();
        assert!((base.gamma_star - alt.gamma_star).abs() <= 2.0 * cfg.tol);
        for floor in [1e-5, 1e-7] {
            let g = GaugeConfig { depth_floor: floor, ..Default::default() };
            let s = solve_krot(&build_krot(&rot, &tracks, &g).unwrap(), &cfg).unwrap();
            assert!((base.gamma_star - s.gamma_star).abs() <= 2.0 * cfg.tol);
        }
    }

    #[test]
    fn two_view_triangulation() {
        let (poses, pts, tracks) = circle_scene(2, 3, 0.0, 5);
        let cfg = KRotConfig { tol: 1e-11, ..Default::default() };
        let (mp, g) = triangulate_track(tracks.get(1).unwrap(), &poses, &cfg).unwrap();
        assert!(g <= 1e-9);
        assert!((mp.x - pts[1]).norm() < 1e-6);

        let (poses, _, tracks) = circle_scene(2, 3, 5e-3, 6);
        let t = tracks.get(0).unwrap();
        let views: Vec<_> = t.observations().iter().map(|o| (poses[&o.frame_id], o.u)).collect();
        let mid = triangulate_midpoint(&views).unwrap();
        let mid_err = views.iter().map(|(p, u)| residual_ratio(&mid, p, u).unwrap()).fold(0.0, f64::max);
        let (_, g) = triangulate_point_linf(&views, &KRotConfig::default()).unwrap();
        assert!(g <= mid_err + 1e-6);
    }

    #[test]
    fn diverging_rays_are_infeasible() {
        let a = KeyframePose::from_centre(Rotation::identity(), &Vector3::zeros());
        let b = KeyframePose::from_centre(Rotation::identity(), &Vector3::new(1.0, 0.0, 0.0));
        // the rays only meet behind both cameras
        let views = [(a, Vector2::new(-1.5, 0.0)), (b, Vector2::new(1.5, 0.0))];
        assert!(matches!(triangulate_point_linf(&views, &KRotConfig::default()), Err(KRotError::Infeasible(_))));
    }

    #[test]
    fn single_point_agrees_with_triangulation() {
        let (poses, _, tracks) = circle_scene(3, 1, 4e-3, 7);
        let rot = rotations(&poses);
        let cfg = KRotConfig::default();
        let s = solve_krot(&build_krot(&rot, &tracks, &GaugeConfig::default()).unwrap(), &cfg).unwrap();
        let fixed = s.poses(&rot);
        let (_, g) = triangulate_track(tracks.get(0).unwrap(), &fixed, &cfg).unwrap();
        assert!((g - s.gamma_star).abs() <= 2.0 * cfg.tol, "{g} vs {}", s.gamma_star);
    }

    #[test]
    fn one_outlier_is_removed() {
        let (poses, _, tracks) = circle_scene(5, 12, 0.0, 8);
        let mut tracks = tracks;
        let mut t = tracks.get(4).unwrap().observations().to_vec();
        t[2].u += Vector2::new(0.05, -0.03);
        tracks.insert(FeatureTrack::new(4, t).unwrap());
        let rot = rotations(&poses);
        let cfg = KRotConfig::default();
        let p = build_krot(&rot, &tracks, &GaugeConfig::default()).unwrap();
        let s = solve_krot(&p, &cfg).unwrap();
        assert!(s.gamma_star > 1e-3);
        let out = remove_support_set(&p, &s, 1e-6, &cfg).unwrap();
        assert_eq!(out.rounds, 1);
        assert!(out.removed.contains(&(4, 2)));
        assert!(out.solution.gamma_star <= 1e-6);

        let clean = solve_krot(&build_krot(&rot, &circle_scene(5, 12, 0.0, 8).2, &GaugeConfig::default()).unwrap(), &cfg).unwrap();
        let none = remove_support_set(&build_krot(&rot, &circle_scene(5, 12, 0.0, 8).2, &GaugeConfig::default()).unwrap(), &clean, 1e-3, &cfg).unwrap();
        assert!(none.removed.is_empty());
    }

    #[test]
    fn zero_target_on_noise_trips_the_guard() {
        let (poses, _, tracks) = circle_scene(3, 3, 4e-3, 9);
        let rot = rotations(&poses);
        let cfg = KRotConfig::default();
        let p = build_krot(&rot, &tracks, &GaugeConfig::default()).unwrap();
        let s = solve_krot(&p, &cfg).unwrap();
        assert_eq!(remove_support_set(&p, &s, 0.0, &cfg), Err(KRotError::AllMeasurementsRemoved));
    }
}
