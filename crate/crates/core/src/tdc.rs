//! Known-rotation problem over camera centres with translation-direction
//! constraints, used at loop closure.
//!
//! Structure cones `|S (X - C_j)| <= gamma R3 (X - C_j)` scale with the level;
//! each direction constraint `|Z12 (C_k - C_j)| <= tan(alpha) t^T (C_k - C_j)`
//! is a hard cone keeping the displacement within `alpha` of the measured
//! world direction `t`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conic::{
    bisect_gamma, check_feasibility, AffineVar, ConeConstraint, ConicError, LevelCone, LevelSetBuilder, LinearConstraint, ParametricProgram,
    VarMap,
};
use crate::geometry::{residual_ratio, structure_block, CameraIntrinsics, KeyframePose, Rotation};
use crate::graph::CovisibilityGraph;
use crate::krot::{GaugeConfig, KRotConfig, KRotError, KRotSolution, Measurement};
use crate::tracks::{FrameId, MapPoint, TrackId, TrackSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdcError {
    #[error("alpha {0} rad is outside (0, pi/2)")]
    AlphaOutOfRange(f64),
    #[error("no rotation for frame {0}")]
    MissingRotation(FrameId),
    #[error("direction for edge ({0}, {1}) is zero")]
    ZeroDirection(FrameId, FrameId),
    #[error("direction edges do not connect all frames")]
    DisconnectedGraph,
    #[error("direction constraints cannot all hold; worst edges (j, k, degrees): {worst:?}")]
    Infeasible { worst: Vec<(FrameId, FrameId, f64)> },
    #[error(transparent)]
    KRot(#[from] KRotError),
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// Measured world direction from the centre of `j` to the centre of `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionConstraint {
    pub j: FrameId,
    pub k: FrameId,
    pub t_jk: Vector3<f64>,
    pub alpha: f64,
    /// Maps `t_jk` to the third axis.
    pub z_mat: Rotation,
}

impl DirectionConstraint {
    /// `t` is normalized.
    pub fn new(j: FrameId, k: FrameId, t: Vector3<f64>, alpha: f64) -> Result<Self, TdcError> {
        if !(alpha > 0.0 && alpha < std::f64::consts::FRAC_PI_2) {
            return Err(TdcError::AlphaOutOfRange(alpha));
        }
        let n = t.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(TdcError::ZeroDirection(j, k));
        }
        let t_jk = t / n;
        Ok(Self { j, k, t_jk, alpha, z_mat: build_z(&t_jk) })
    }

    /// First two rows of `Z`.
    pub fn z12(&self) -> Matrix2x3<f64> {
        self.z_mat.matrix().fixed_rows::<2>(0).into_owned()
    }

    /// Angle between `c_k - c_j` and the measured direction.
    pub fn angle(&self, c_j: &Vector3<f64>, c_k: &Vector3<f64>) -> f64 {
        let d = c_k - c_j;
        d.cross(&self.t_jk).norm().atan2(d.dot(&self.t_jk))
    }

    /// `|Z12 d| - tan(alpha) t^T d` for `d = c_k - c_j`; non-positive when satisfied.
    pub fn violation(&self, c_j: &Vector3<f64>, c_k: &Vector3<f64>) -> f64 {
        let d = c_k - c_j;
        (self.z12() * d).norm() - self.alpha.tan() * self.t_jk.dot(&d)
    }
}

/// Camera-frame direction `t_e` of frame `j` expressed in world coordinates.
pub fn world_direction(r_j: &Rotation, t_e: &Vector3<f64>, k_intr: &CameraIntrinsics) -> Vector3<f64> {
    let m = k_intr.k_inv() * r_j.matrix();
    (m.transpose() * t_e).normalize()
}

/// Minimal rotation taking `t` to `(0, 0, 1)`; a half turn about `x` when
/// `t` points along `-z`.
pub fn build_z(t: &Vector3<f64>) -> Rotation {
    let e3 = Vector3::z();
    let axis = t.cross(&e3);
    let s = axis.norm();
    let c = t.dot(&e3);
    if s < 1e-15 {
        return if c > 0.0 { Rotation::identity() } else { Rotation::from_axis_angle(&Vector3::x(), std::f64::consts::PI) };
    }
    Rotation::from_axis_angle(&axis, s.atan2(c))
}

/// Direction constraints for every graph edge carrying a translation direction.
pub fn direction_constraints(graph: &CovisibilityGraph, rotations: &BTreeMap<FrameId, Rotation>, alpha: f64) -> Result<Vec<DirectionConstraint>, TdcError> {
    let k = CameraIntrinsics::identity();
    graph
        .edges()
        .filter_map(|e| e.t_e.map(|t| (e, t)))
        .map(|(e, t)| {
            let r = rotations.get(&e.j).ok_or(TdcError::MissingRotation(e.j))?;
            if !rotations.contains_key(&e.k) {
                return Err(TdcError::MissingRotation(e.k));
            }
            DirectionConstraint::new(e.j, e.k, world_direction(r, &t, &k), alpha)
        })
        .collect()
}

/// Up to `n` tracks chosen uniformly over track ids.
pub fn sample_tracks(tracks: &TrackSet, n: usize, seed: u64) -> TrackSet {
    let ids: Vec<TrackId> = tracks.ids().collect();
    if ids.len() <= n {
        return tracks.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick: Vec<TrackId> = sample(&mut rng, ids.len(), n).into_iter().map(|i| ids[i]).collect();
    pick.sort_unstable();
    tracks.subset(&pick)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdcProblem {
    pub rotations: BTreeMap<FrameId, Rotation>,
    pub tracks: TrackSet,
    pub measurements: Vec<Measurement>,
    pub directions: Vec<DirectionConstraint>,
    pub fixed_frame: FrameId,
    pub point_vars: BTreeMap<TrackId, usize>,
    pub centre_vars: BTreeMap<FrameId, usize>,
    pub map: VarMap,
    pub program: ParametricProgram,
}

/// Pushes three variables with `n . v = 1` solved for the dominant coordinate.
fn push_normalized(vars: &mut Vec<AffineVar>, next: &mut usize, n: &Vector3<f64>) {
    let elim = (0..3).max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).unwrap();
    let others: Vec<usize> = (0..3).filter(|&c| c != elim).collect();
    let ids = [*next, *next + 1];
    *next += 2;
    for c in 0..3 {
        if c == elim {
            let terms = others.iter().zip(ids).map(|(&o, i)| (i, -n[o] / n[elim])).collect();
            vars.push(AffineVar { terms, constant: 1.0 / n[elim] });
        } else {
            vars.push(AffineVar::free(ids[others.iter().position(|&o| o == c).unwrap()]));
        }
    }
}

fn connected(frames: &BTreeSet<FrameId>, edges: &[DirectionConstraint]) -> bool {
    let Some(&first) = frames.iter().next() else { return true };
    let mut seen = BTreeSet::from([first]);
    let mut stack = vec![first];
    while let Some(f) = stack.pop() {
        for e in edges {
            let other = if e.j == f { e.k } else if e.k == f { e.j } else { continue };
            if seen.insert(other) {
                stack.push(other);
            }
        }
    }
    seen.len() == frames.len()
}

/// Shared assembly. With `hard_directions` unset the direction cones carry
/// the level instead of the structure cones.
fn assemble(
    rotations: &BTreeMap<FrameId, Rotation>,
    tracks: &TrackSet,
    directions: &[DirectionConstraint],
    gauge: &GaugeConfig,
    hard_directions: bool,
) -> Result<TdcProblem, TdcError> {
    let mut frames = BTreeSet::new();
    for t in tracks.iter() {
        if t.len() < 2 {
            return Err(KRotError::UnderconstrainedTrack(t.track_id).into());
        }
        frames.extend(t.frames());
    }
    let observed = frames.clone();
    for d in directions {
        frames.insert(d.j);
        frames.insert(d.k);
    }
    if let Some(f) = frames.iter().find(|f| !rotations.contains_key(f)) {
        return Err(TdcError::MissingRotation(*f));
    }
    let pool = if tracks.is_empty() { &frames } else { &observed };
    let fixed = match gauge.fixed_frame {
        Some(f) if pool.contains(&f) => f,
        Some(f) => return Err(KRotError::NoScaleMeasurement(f).into()),
        None => *pool.iter().next().ok_or(KRotError::Empty)?,
    };

    let mut vars = Vec::new();
    let mut next = 0;
    let mut point_vars = BTreeMap::new();
    let mut blocks = Vec::new();
    let mut scale_edge = None;
    if tracks.is_empty() {
        let e = directions.iter().find(|e| e.j == fixed || e.k == fixed).ok_or(TdcError::DisconnectedGraph)?;
        let (other, n) = if e.j == fixed { (e.k, e.t_jk) } else { (e.j, -e.t_jk) };
        scale_edge = Some((other, n));
    } else {
        let scale_track = match gauge.scale_track {
            Some(id) if tracks.get(id).is_some_and(|t| t.in_frame(fixed).is_some()) => id,
            Some(_) => return Err(KRotError::NoScaleMeasurement(fixed).into()),
            None => tracks.iter().find(|t| t.in_frame(fixed).is_some()).map(|t| t.track_id).ok_or(KRotError::NoScaleMeasurement(fixed))?,
        };
        let r3 = rotations[&fixed].row(2);
        for t in tracks.iter() {
            point_vars.insert(t.track_id, vars.len());
            let start = next;
            if t.track_id == scale_track {
                push_normalized(&mut vars, &mut next, &r3);
            } else {
                for _ in 0..3 {
                    vars.push(AffineVar::free(next));
                    next += 1;
                }
            }
            blocks.push(start..next);
        }
    }
    let mut centre_vars = BTreeMap::new();
    for &f in &frames {
        centre_vars.insert(f, vars.len());
        match scale_edge {
            _ if f == fixed => vars.extend((0..3).map(|_| AffineVar::fixed(0.0))),
            Some((other, n)) if other == f => push_normalized(&mut vars, &mut next, &n),
            _ => {
                for _ in 0..3 {
                    vars.push(AffineVar::free(next));
                    next += 1;
                }
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
            let q = centre_vars[&o.frame_id];
            let r = &rotations[&o.frame_id];
            let s = structure_block(r, &o.u);
            let r3 = r.row(2);
            let a = DMatrix::from_fn(2, 6, |i, c| if c < 3 { s[(i, c)] } else { -s[(i, c - 3)] });
            let b = DVector::from_fn(6, |i, _| if i < 3 { r3[i] } else { -r3[i - 3] });
            let full: Vec<usize> = (p..p + 3).chain(q..q + 3).collect();
            let red = map.rewrite(&full, &a, &DVector::zeros(2), &b, 0.0);
            let k = red.vars.len();
            let level = hard_directions.then(|| (red.b.clone(), red.beta));
            let (cb, cbeta) = if hard_directions { (DVector::zeros(k), 0.0) } else { (red.b.clone(), red.beta) };
            cones.push(LevelCone { cone: ConeConstraint::new(red.vars.clone(), red.a, red.a0, cb, cbeta)?, level });
            if red.b.iter().any(|&v| v != 0.0) {
                linears.push(LinearConstraint::new(red.vars, red.b, gauge.depth_floor - red.beta)?);
            }
            measurements.push(Measurement { track_id: t.track_id, frame_id: o.frame_id, u: o.u });
        }
    }
    for d in directions {
        let (qj, qk) = (centre_vars[&d.j], centre_vars[&d.k]);
        let z = d.z12();
        let a = DMatrix::from_fn(2, 6, |i, c| if c < 3 { -z[(i, c)] } else { z[(i, c - 3)] });
        let b = DVector::from_fn(6, |i, _| if i < 3 { -d.t_jk[i] } else { d.t_jk[i - 3] });
        let full: Vec<usize> = (qj..qj + 3).chain(qk..qk + 3).collect();
        let red = map.rewrite(&full, &a, &DVector::zeros(2), &b, 0.0);
        let k = red.vars.len();
        let lc = if hard_directions {
            let tan = d.alpha.tan();
            LevelCone { cone: ConeConstraint::new(red.vars, red.a, red.a0, red.b * tan, red.beta * tan)?, level: None }
        } else {
            LevelCone { cone: ConeConstraint::new(red.vars, red.a, red.a0, DVector::zeros(k), 0.0)?, level: Some((red.b, red.beta)) }
        };
        cones.push(lc);
    }
    let program = ParametricProgram { dim: map.n_reduced, cones, linears, blocks };
    Ok(TdcProblem {
        rotations: frames.iter().map(|f| (*f, rotations[f])).collect(),
        tracks: tracks.clone(),
        measurements,
        directions: directions.to_vec(),
        fixed_frame: fixed,
        point_vars,
        centre_vars,
        map,
        program,
    })
}

/// Builds the loop-closure program over points and camera centres.
pub fn build_tdc(
    rotations: &BTreeMap<FrameId, Rotation>,
    tracks: &TrackSet,
    directions: &[DirectionConstraint],
    gauge: &GaugeConfig,
) -> Result<TdcProblem, TdcError> {
    if tracks.is_empty() {
        return Err(KRotError::Empty.into());
    }
    assemble(rotations, tracks, directions, gauge, true)
}

impl TdcProblem {
    fn unpack(&self, y: &DVector<f64>) -> (BTreeMap<TrackId, MapPoint>, BTreeMap<FrameId, Vector3<f64>>) {
        let full = self.map.expand(y);
        let points = self.point_vars.iter().map(|(&id, &p)| (id, MapPoint { track_id: id, x: full.fixed_rows::<3>(p).into_owned() })).collect();
        let centres = self.centre_vars.iter().map(|(&f, &q)| (f, full.fixed_rows::<3>(q).into_owned())).collect();
        (points, centres)
    }

    /// Edges sorted by decreasing angular disagreement at `centres`.
    pub fn worst_edges(&self, centres: &BTreeMap<FrameId, Vector3<f64>>, n: usize) -> Vec<(FrameId, FrameId, f64)> {
        let mut v: Vec<_> = self.directions.iter().map(|d| (d.j, d.k, d.angle(&centres[&d.j], &centres[&d.k]).to_degrees())).collect();
        v.sort_by(|a, b| b.2.total_cmp(&a.2));
        v.truncate(n);
        v
    }
}

/// Globally optimal centres and points under the direction constraints.
/// Translations in the result are `t = -R C`.
pub fn solve_tdc(problem: &TdcProblem, cfg: &KRotConfig) -> Result<KRotSolution, TdcError> {
    let p = &problem.program;
    let mut lo = 0.0;
    let mut hi = cfg.upper_hint.filter(|h| *h > 0.0).unwrap_or(1e-3).min(cfg.gamma_max);
    loop {
        if check_feasibility(&p.build(hi), &cfg.feas)?.is_feasible() {
            break;
        }
        if hi >= cfg.gamma_max {
            let worst = diagnose(problem, cfg);
            return Err(TdcError::Infeasible { worst });
        }
        lo = hi;
        hi = (hi * 8.0).min(cfg.gamma_max);
    }
    let cert = bisect_gamma(p, lo, hi, cfg.tol, &cfg.feas)?;
    let (points, centres) = problem.unpack(&cert.x_star);
    let poses: BTreeMap<FrameId, KeyframePose> = centres.iter().map(|(f, c)| (*f, KeyframePose::from_centre(problem.rotations[f], c))).collect();
    let residuals: Vec<f64> = problem
        .measurements
        .iter()
        .map(|m| residual_ratio(&points[&m.track_id].x, &poses[&m.frame_id], &m.u).unwrap_or(f64::INFINITY))
        .collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(KRotSolution {
        points,
        translations: poses.iter().map(|(f, p)| (*f, p.t)).collect(),
        gamma_star: cert.gamma_star,
        certificate: cert,
        residuals,
        max_residual,
    })
}

/// Edges most at odds with each other, from the best directions-only fit.
fn diagnose(problem: &TdcProblem, cfg: &KRotConfig) -> Vec<(FrameId, FrameId, f64)> {
    let loose: Vec<DirectionConstraint> = problem.directions.iter().map(|d| DirectionConstraint { alpha: 89f64.to_radians(), ..*d }).collect();
    match solve_directions_only(&problem.rotations, &loose, &GaugeConfig::default(), cfg) {
        Ok(c) => problem.worst_edges(&c, 5),
        Err(_) => Vec::new(),
    }
}

/// Centres from direction constraints alone: minimizes the largest
/// `tan` of the angle between each displacement and its measurement,
/// requiring it to stay below `tan(alpha)`. The fixed frame is at the origin
/// and one incident edge has unit projected length.
pub fn solve_directions_only(
    rotations: &BTreeMap<FrameId, Rotation>,
    directions: &[DirectionConstraint],
    gauge: &GaugeConfig,
    cfg: &KRotConfig,
) -> Result<BTreeMap<FrameId, Vector3<f64>>, TdcError> {
    if directions.is_empty() {
        return Err(TdcError::DisconnectedGraph);
    }
    let frames: BTreeSet<FrameId> = directions.iter().flat_map(|d| [d.j, d.k]).collect();
    if !connected(&frames, directions) {
        return Err(TdcError::DisconnectedGraph);
    }
    let problem = assemble(rotations, &TrackSet::default(), directions, gauge, false)?;
    let hi = directions.iter().map(|d| d.alpha.tan()).fold(f64::INFINITY, f64::min);
    if !check_feasibility(&problem.program.build(hi), &cfg.feas)?.is_feasible() {
        return Err(TdcError::Infeasible { worst: Vec::new() });
    }
    let cert = bisect_gamma(&problem.program, 0.0, hi, cfg.tol, &cfg.feas)?;
    Ok(problem.unpack(&cert.x_star).1)
}
