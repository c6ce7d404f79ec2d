//! Bundle adjustment baseline: Levenberg-Marquardt on squared reprojection
//! error with point elimination, and the incremental BA-SLAM loop built on it.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{bearing, skew, KeyframePose, Rotation};
use crate::krot::triangulate_midpoint;
use crate::relmotion::{correspondences, estimate_relative, median_parallax_deg, rotation_align_trimmed_with_mask, MotionMethod, RansacConfig, RelMotionConfig};
use crate::tracks::{FeatureTrack, FrameId, TrackId, TrackSet};

type Matrix2x6 = SMatrix<f64, 2, 6>;
type Matrix6x3 = SMatrix<f64, 6, 3>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaError {
    #[error("no observation links a free variable")]
    NoResiduals,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    None,
    /// `c^2 ln(1 + s / c^2)` of the squared residual `s`.
    Cauchy(f64),
}

impl RobustLoss {
    fn rho(&self, s: f64) -> f64 {
        match *self {
            RobustLoss::None => s,
            RobustLoss::Cauchy(c) => c * c * (s / (c * c)).ln_1p(),
        }
    }

    fn weight(&self, s: f64) -> f64 {
        match *self {
            RobustLoss::None => 1.0,
            RobustLoss::Cauchy(c) => 1.0 / (1.0 + s / (c * c)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaConfig {
    pub max_iter: usize,
    pub lm_damping_init: f64,
    /// Damping beyond which the solver gives up.
    pub damping_cap: f64,
    pub robust_loss: RobustLoss,
    /// Tracks whose point lies farther than this from an observing camera
    /// are dropped by the BA-SLAM loop.
    pub outlier_distance_threshold: f64,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub rel_tol: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self { max_iter: 50, lm_damping_init: 1e-3, damping_cap: 1e12, robust_loss: RobustLoss::None, outlier_distance_threshold: f64::INFINITY, rel_tol: 1e-10 }
    }
}

impl BaConfig {
    fn validate(&self) -> Result<(), BaError> {
        let ok = self.lm_damping_init > 0.0
            && self.damping_cap > self.lm_damping_init
            && self.outlier_distance_threshold > 0.0
            && self.rel_tol >= 0.0
            && !matches!(self.robust_loss, RobustLoss::Cauchy(c) if !(c > 0.0));
        if ok { Ok(()) } else { Err(BaError::BadConfig(format!("{self:?}"))) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaStatus {
    Converged,
    MaxIterations,
    /// Damping hit the cap away from a stationary point.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaResult {
    pub poses: BTreeMap<FrameId, KeyframePose>,
    pub points: BTreeMap<TrackId, Vector3<f64>>,
    pub initial_cost: f64,
    pub cost: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
    pub status: BaStatus,
}

/// Residual `project(x) - u` and its Jacobians with respect to the camera
/// (`[d omega; d t]`, rotation perturbed as `exp(d omega) R`) and the point.
/// `None` when the depth is not positive.
pub fn observation_jacobian(pose: &KeyframePose, x: &Vector3<f64>, u: &Vector2<f64>) -> Option<(Vector2<f64>, Matrix2x6, Matrix2x3<f64>)> {
    let rx = pose.r * x;
    let p = rx + pose.t;
    if !(p.z > 1e-12) {
        return None;
    }
    let iz = 1.0 / p.z;
    let r = Vector2::new(p.x * iz - u.x, p.y * iz - u.y);
    let dproj = Matrix2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz);
    let mut jc = Matrix2x6::zeros();
    jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew(&rx)));
    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
    let jp = dproj * pose.r.matrix();
    Some((r, jc, jp))
}

fn retract(pose: &KeyframePose, d: &Vector6<f64>) -> KeyframePose {
    let w = Vector3::new(d[0], d[1], d[2]);
    KeyframePose::new(Rotation::exp(&w) * pose.r, pose.t + Vector3::new(d[3], d[4], d[5]))
}

struct Obs {
    frame: FrameId,
    track: TrackId,
    u: Vector2<f64>,
}

/// Free variables and the observations coupling them.
struct Layout {
    obs: Vec<Obs>,
    cams: Vec<FrameId>,
    cam_index: BTreeMap<FrameId, usize>,
    pts: Vec<TrackId>,
    pt_index: BTreeMap<TrackId, usize>,
    /// Translation coordinate `(cam, axis)` held fixed to remove scale.
    scale_fix: Option<(usize, usize)>,
}

fn layout(
    poses: &BTreeMap<FrameId, KeyframePose>,
    points: &BTreeMap<TrackId, Vector3<f64>>,
    tracks: &TrackSet,
    frozen: &BTreeSet<FrameId>,
    frozen_points: bool,
    fix_scale: bool,
) -> Layout {
    let mut obs = Vec::new();
    for t in tracks.iter().filter(|t| points.contains_key(&t.track_id)) {
        for o in t.observations().iter().filter(|o| poses.contains_key(&o.frame_id)) {
            obs.push(Obs { frame: o.frame_id, track: t.track_id, u: o.u });
        }
    }
    let cams: Vec<FrameId> = poses.keys().copied().filter(|f| !frozen.contains(f) && obs.iter().any(|o| o.frame == *f)).collect();
    let cam_index = cams.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let pts: Vec<TrackId> = if frozen_points { Vec::new() } else { points.keys().copied().filter(|id| obs.iter().any(|o| o.track == *id)).collect() };
    let pt_index = pts.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let frozen_used = poses.keys().filter(|f| frozen.contains(f) && obs.iter().any(|o| o.frame == **f)).count();
    let scale_fix = if fix_scale && frozen_used < 2 && !cams.is_empty() {
        let t = poses[&cams[0]].t;
        let axis = (0..3).max_by(|&a, &b| t[a].abs().total_cmp(&t[b].abs())).unwrap();
        Some((0, axis))
    } else {
        None
    };
    Layout { obs, cams, cam_index, pts, pt_index, scale_fix }
}

fn total_cost(l: &Layout, poses: &BTreeMap<FrameId, KeyframePose>, points: &BTreeMap<TrackId, Vector3<f64>>, loss: &RobustLoss) -> f64 {
    let mut c = 0.0;
    for o in &l.obs {
        let p = poses[&o.frame].transform(&points[&o.track]);
        if !(p.z > 1e-12) {
            return f64::INFINITY;
        }
        let r = Vector2::new(p.x / p.z - o.u.x, p.y / p.z - o.u.y);
        c += 0.5 * loss.rho(r.norm_squared());
    }
    c
}

/// Levenberg-Marquardt over the free cameras and points of `l`.
fn lm(
    l: &Layout,
    mut poses: BTreeMap<FrameId, KeyframePose>,
    mut points: BTreeMap<TrackId, Vector3<f64>>,
    cfg: &BaConfig,
) -> BaResult {
    let nc = l.cams.len();
    let np = l.pts.len();
    let loss = cfg.robust_loss;
    let initial_cost = total_cost(l, &poses, &points, &loss);
    let mut cost = initial_cost;
    let mut lambda = cfg.lm_damping_init;
    let mut accepted = 0;
    let mut iterations = 0;
    let mut status = BaStatus::MaxIterations;
    if cost <= 1e-30 || (nc == 0 && np == 0) {
        return BaResult { poses, points, initial_cost, cost, iterations, accepted_steps: 0, status: BaStatus::Converged };
    }
    'outer: while iterations < cfg.max_iter {
        iterations += 1;
        let mut u_blocks = vec![Matrix6::<f64>::zeros(); nc];
        let mut g_c = vec![Vector6::<f64>::zeros(); nc];
        let mut v_blocks = vec![Matrix3::<f64>::zeros(); np];
        let mut g_p = vec![Vector3::<f64>::zeros(); np];
        let mut w_blocks: Vec<Vec<(usize, Matrix6x3)>> = vec![Vec::new(); np];
        for o in &l.obs {
            let Some((r, jc, jp)) = observation_jacobian(&poses[&o.frame], &points[&o.track], &o.u) else { continue };
            let w = loss.weight(r.norm_squared());
            let ci = l.cam_index.get(&o.frame).copied();
            let pi = l.pt_index.get(&o.track).copied();
            if let Some(c) = ci {
                u_blocks[c] += jc.transpose() * jc * w;
                g_c[c] += jc.transpose() * r * w;
            }
            if let Some(p) = pi {
                v_blocks[p] += jp.transpose() * jp * w;
                g_p[p] += jp.transpose() * r * w;
                if let Some(c) = ci {
                    let wb = jc.transpose() * jp * w;
                    match w_blocks[p].iter_mut().find(|(k, _)| *k == c) {
                        Some((_, m)) => *m += wb,
                        None => w_blocks[p].push((c, wb)),
                    }
                }
            }
        }
        let gnorm = g_c.iter().map(|g| g.amax()).chain(g_p.iter().map(|g| g.amax())).fold(0.0, f64::max);
        loop {
            if lambda > cfg.damping_cap {
                status = if cost <= 1e-20 || gnorm <= 1e-10 * (1.0 + cost) { BaStatus::Converged } else { BaStatus::Stalled };
                break 'outer;
            }
            let damp3 = |m: &Matrix3<f64>| m + Matrix3::from_diagonal(&m.diagonal().map(|d| lambda * d.max(1e-12) + 1e-15));
            let vinv: Vec<Matrix3<f64>> = v_blocks.iter().map(|v| damp3(v).try_inverse().unwrap_or_else(Matrix3::zeros)).collect();
            let n = 6 * nc;
            let mut s = DMatrix::<f64>::zeros(n, n);
            let mut rhs = DVector::<f64>::zeros(n);
            for c in 0..nc {
                let mut ub = u_blocks[c];
                for d in 0..6 {
                    ub[(d, d)] += lambda * ub[(d, d)].max(1e-12) + 1e-15;
                }
                s.view_mut((6 * c, 6 * c), (6, 6)).copy_from(&ub);
                rhs.rows_mut(6 * c, 6).copy_from(&(-g_c[c]));
            }
            for p in 0..np {
                let vi = &vinv[p];
                for (a, wa) in &w_blocks[p] {
                    let wv = wa * vi;
                    let mut ra = rhs.rows_mut(6 * a, 6);
                    ra += wv * g_p[p];
                    for (b, wb) in &w_blocks[p] {
                        let mut blk = s.view_mut((6 * a, 6 * b), (6, 6));
                        blk -= wv * wb.transpose();
                    }
                }
            }
            if let Some((c, axis)) = l.scale_fix {
                let k = 6 * c + 3 + axis;
                s.row_mut(k).fill(0.0);
                s.column_mut(k).fill(0.0);
                s[(k, k)] = 1.0;
                rhs[k] = 0.0;
            }
            let Some(chol) = s.clone().cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let dc = chol.solve(&rhs);
            let mut cand_poses = poses.clone();
            for (c, f) in l.cams.iter().enumerate() {
                let d = Vector6::from_iterator(dc.rows(6 * c, 6).iter().copied());
                cand_poses.insert(*f, retract(&poses[f], &d));
            }
            let mut cand_points = points.clone();
            for (p, id) in l.pts.iter().enumerate() {
                let mut b = -g_p[p];
                for (c, wc) in &w_blocks[p] {
                    b -= wc.transpose() * dc.rows(6 * c, 6);
                }
                cand_points.insert(*id, points[id] + vinv[p] * b);
            }
            let new_cost = total_cost(l, &cand_poses, &cand_points, &loss);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                poses = cand_poses;
                points = cand_points;
                cost = new_cost;
                accepted += 1;
                lambda = (lambda / 3.0).max(1e-12);
                if rel < cfg.rel_tol || cost <= 1e-30 {
                    status = BaStatus::Converged;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
        }
    }
    BaResult { poses, points, initial_cost, cost, iterations, accepted_steps: accepted, status }
}

/// Jointly refines the poses not in `frozen` and every point observed by
/// the given frames. With fewer than two frozen frames one translation
/// coordinate of a free frame is held to fix scale; with none, the lowest
/// frame is frozen as well.
pub fn bundle_adjust(
    poses: &BTreeMap<FrameId, KeyframePose>,
    points: &BTreeMap<TrackId, Vector3<f64>>,
    tracks: &TrackSet,
    frozen: &BTreeSet<FrameId>,
    cfg: &BaConfig,
) -> Result<BaResult, BaError> {
    cfg.validate()?;
    let mut frozen = frozen.clone();
    if frozen.is_empty() {
        frozen.extend(poses.keys().next().copied());
    }
    let l = layout(poses, points, tracks, &frozen, false, true);
    if l.obs.is_empty() {
        return Err(BaError::NoResiduals);
    }
    Ok(lm(&l, poses.clone(), points.clone(), cfg))
}

/// Refines a single pose against fixed points.
pub fn refine_pose(
    frame: FrameId,
    pose: &KeyframePose,
    points: &BTreeMap<TrackId, Vector3<f64>>,
    tracks: &TrackSet,
    cfg: &BaConfig,
) -> Result<BaResult, BaError> {
    cfg.validate()?;
    let poses = BTreeMap::from([(frame, *pose)]);
    let l = layout(&poses, points, tracks, &BTreeSet::new(), true, false);
    if l.obs.is_empty() {
        return Err(BaError::NoResiduals);
    }
    Ok(lm(&l, poses, points.clone(), cfg))
}

/// Small multi-view problem for derivative checks.
#[derive(Debug, Clone, PartialEq)]
pub struct BaInstance {
    pub poses: BTreeMap<FrameId, KeyframePose>,
    pub points: BTreeMap<TrackId, Vector3<f64>>,
    pub tracks: TrackSet,
}

/// Random cameras around a point cloud, all depths at least one; noisy
/// observations unless `exact`.
pub fn random_instance(seed: u64, n_frames: usize, n_points: usize, exact: bool) -> BaInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v3 = |rng: &mut ChaCha8Rng, s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let poses: BTreeMap<_, _> = (0..n_frames)
        .map(|f| {
            let r = Rotation::exp(&v3(&mut rng, 0.3));
            let c = v3(&mut rng, 1.0) + Vector3::new(0.0, 0.0, -6.0);
            (f, KeyframePose::from_centre(r, &c))
        })
        .collect();
    let points: BTreeMap<_, _> = (0..n_points).map(|i| (i, v3(&mut rng, 1.0))).collect();
    let mut tracks = TrackSet::default();
    for (id, x) in &points {
        let obs = poses.iter().map(|(f, p)| {
            let q = p.transform(x);
            let noise = if exact { Vector2::zeros() } else { Vector2::new(rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01)) };
            (*f, Vector2::new(q.x / q.z, q.y / q.z) + noise)
        });
        tracks.insert(FeatureTrack::from_points(*id, obs.collect::<Vec<_>>()).expect("ordered frames"));
    }
    BaInstance { poses, points, tracks }
}

/// Largest absolute difference between analytic Jacobians and central
/// differences with step `1e-6`, over every observation of the instance.
pub fn jacobian_check(inst: &BaInstance) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for t in inst.tracks.iter() {
        let x = inst.points[&t.track_id];
        for o in t.observations() {
            let pose = inst.poses[&o.frame_id];
            let Some((_, jc, jp)) = observation_jacobian(&pose, &x, &o.u) else { continue };
            let res = |p: &KeyframePose, x: &Vector3<f64>| observation_jacobian(p, x, &o.u).map(|r| r.0).unwrap_or(Vector2::repeat(f64::NAN));
            for k in 0..6 {
                let d = Vector6::ith(k, h);
                let num = (res(&retract(&pose, &d), &x) - res(&retract(&pose, &-d), &x)) / (2.0 * h);
                worst = worst.max((num - jc.column(k)).amax());
            }
            for k in 0..3 {
                let d = Vector3::ith(k, h);
                let num = (res(&pose, &(x + d)) - res(&pose, &(x - d))) / (2.0 * h);
                worst = worst.max((num - jp.column(k)).amax());
            }
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaSlamConfig {
    pub window: usize,
    pub ba: BaConfig,
    /// Median parallax an initial pair must exceed.
    pub init_parallax_deg: f64,
    pub relmotion: RelMotionConfig,
    /// Fewest mapped points a keyframe must see to be localized.
    pub min_tracked: usize,
    /// New points whose reprojection error exceeds this are not spawned.
    pub spawn_max_residual: f64,
}

impl Default for BaSlamConfig {
    fn default() -> Self {
        let relmotion = RelMotionConfig { ransac: RansacConfig { threshold: 1e-2, ..Default::default() }, ..Default::default() };
        Self { window: 10, ba: BaConfig::default(), init_parallax_deg: 1.0, relmotion, min_tracked: 6, spawn_max_residual: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlamStatus {
    Completed,
    /// No keyframe pair had enough parallax to build an initial map.
    InitializationFailed,
    /// The keyframe saw too few mapped points; results cover earlier frames.
    CameraDisconnected(FrameId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaSlamResult {
    pub status: SlamStatus,
    pub init_pair: Option<(FrameId, FrameId)>,
    pub poses: BTreeMap<FrameId, KeyframePose>,
    pub points: BTreeMap<TrackId, Vector3<f64>>,
    /// Wall-clock seconds of the windowed BA run after each keyframe.
    pub step_times: Vec<(FrameId, f64)>,
    pub removed_tracks: usize,
}

/// Linear translation given rotation and known points.
fn resect_translation(r: &Rotation, pairs: &[(Vector3<f64>, Vector2<f64>)]) -> Option<Vector3<f64>> {
    let mut m = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (x, u) in pairs {
        let rx = r * x;
        // t1 - u_x t3 = u_x R3 X - R1 X, likewise for y
        for (row, ui, rxi) in [(Vector3::new(1.0, 0.0, -u.x), u.x, rx.x), (Vector3::new(0.0, 1.0, -u.y), u.y, rx.y)] {
            let rhs = ui * rx.z - rxi;
            m += row * row.transpose();
            b += row * rhs;
        }
    }
    m.try_inverse().map(|mi| mi * b)
}

fn spawn_points(
    tracks: &TrackSet,
    poses: &BTreeMap<FrameId, KeyframePose>,
    points: &mut BTreeMap<TrackId, Vector3<f64>>,
    max_residual: f64,
    min_parallax_deg: f64,
) {
    let fresh: Vec<&FeatureTrack> = tracks.iter().filter(|t| !points.contains_key(&t.track_id)).collect();
    for t in fresh {
        let views: Vec<_> = t.observations().iter().filter_map(|o| poses.get(&o.frame_id).map(|p| (*p, o.u))).collect();
        if views.len() < 2 {
            continue;
        }
        let Some(x) = triangulate_midpoint(&views) else { continue };
        let ok = views.iter().all(|(p, u)| {
            let q = p.transform(&x);
            q.z > 1e-6 && (Vector2::new(q.x / q.z, q.y / q.z) - u).norm() <= max_residual
        });
        let rays: Vec<Vector3<f64>> = views.iter().map(|(p, _)| (x - p.centre()).normalize()).collect();
        let parallax = rays.iter().flat_map(|a| rays.iter().map(move |b| a.angle(b))).fold(0.0, f64::max).to_degrees();
        if ok && parallax >= min_parallax_deg {
            points.insert(t.track_id, x);
        }
    }
}

fn drop_distant(
    tracks: &TrackSet,
    poses: &BTreeMap<FrameId, KeyframePose>,
    points: &mut BTreeMap<TrackId, Vector3<f64>>,
    threshold: f64,
) -> usize {
    if !threshold.is_finite() {
        return 0;
    }
    let far: Vec<TrackId> = points
        .iter()
        .filter(|(id, x)| {
            tracks.get(**id).is_some_and(|t| t.frames().filter_map(|f| poses.get(&f)).any(|p| (p.centre() - **x).norm() > threshold))
        })
        .map(|(id, _)| *id)
        .collect();
    for id in &far {
        points.remove(id);
    }
    far.len()
}

/// Incremental BA-SLAM over the keyframes in order: two-view initialization,
/// per-frame resection, point spawning, windowed BA, and full BA at each
/// loop frame.
pub fn run_ba_slam(keyframes: &[FrameId], tracks: &TrackSet, loop_frames: &BTreeSet<FrameId>, cfg: &BaSlamConfig) -> Result<BaSlamResult, BaError> {
    cfg.ba.validate()?;
    if cfg.window < 2 {
        return Err(BaError::BadConfig("window must be at least 2".into()));
    }
    let mut result = BaSlamResult {
        status: SlamStatus::InitializationFailed,
        init_pair: None,
        poses: BTreeMap::new(),
        points: BTreeMap::new(),
        step_times: Vec::new(),
        removed_tracks: 0,
    };
    let Some(&first) = keyframes.first() else {
        result.status = SlamStatus::Completed;
        return Ok(result);
    };
    // Step 1: first pair (first, k) with enough parallax
    let mut init = None;
    for &k in &keyframes[1..] {
        let corrs = correspondences(tracks, first, k);
        if corrs.len() < 8 {
            continue;
        }
        let Ok(m) = estimate_relative(&corrs, &cfg.relmotion) else { continue };
        if m.method != MotionMethod::Essential || median_parallax_deg(&m.r_jk, &corrs, &m.inlier_mask) <= cfg.init_parallax_deg {
            continue;
        }
        // a pair that a pure rotation explains cannot seed a map
        let rays_j: Vec<_> = corrs.iter().map(|c| bearing(&c.u_j)).collect();
        let rays_k: Vec<_> = corrs.iter().map(|c| bearing(&c.u_k)).collect();
        let Ok((r_only, mask)) = rotation_align_trimmed_with_mask(&rays_j, &rays_k, cfg.relmotion.trim_ratio, cfg.relmotion.trim_max_iter) else { continue };
        if median_parallax_deg(&r_only, &corrs, &mask) <= cfg.init_parallax_deg {
            continue;
        }
        init = Some((k, m));
        break;
    }
    let Some((k0, m)) = init else {
        log::info!("no keyframe pair with parallax above {} deg; map not initialized", cfg.init_parallax_deg);
        return Ok(result);
    };
    let c_k = m.t_e.expect("essential path has a direction");
    result.poses.insert(first, KeyframePose::default());
    result.poses.insert(k0, KeyframePose::from_centre(m.r_jk, &c_k));
    result.init_pair = Some((first, k0));
    spawn_points(tracks, &result.poses, &mut result.points, cfg.spawn_max_residual, 0.0);
    if let Ok(r) = bundle_adjust(&result.poses, &result.points, tracks, &BTreeSet::from([first]), &cfg.ba) {
        result.poses = r.poses;
        result.points = r.points;
    }

    let mut order: Vec<FrameId> = Vec::new();
    order.push(first);
    order.push(k0);
    for &f in &keyframes[1..] {
        if f == k0 {
            continue;
        }
        // resection: rotation from the previous localized keyframe, then translation
        let prev = *order.iter().filter(|&&p| p < f).max().unwrap_or(&first);
        let visible: Vec<(Vector3<f64>, Vector2<f64>)> =
            tracks.iter().filter_map(|t| Some((*result.points.get(&t.track_id)?, t.in_frame(f)?.u))).collect();
        if visible.len() < cfg.min_tracked {
            log::warn!("keyframe {f} sees {} mapped points; camera disconnected", visible.len());
            result.status = SlamStatus::CameraDisconnected(f);
            return Ok(result);
        }
        let prev_pose = result.poses[&prev];
        let corrs = correspondences(tracks, prev, f);
        let r = estimate_relative(&corrs, &cfg.relmotion).map(|m| m.r_jk * prev_pose.r).unwrap_or(prev_pose.r);
        let t = resect_translation(&r, &visible).unwrap_or(prev_pose.t);
        let mut pose = KeyframePose::new(r, t);
        if let Ok(res) = refine_pose(f, &pose, &result.points, tracks, &cfg.ba) {
            pose = res.poses[&f];
        }
        result.poses.insert(f, pose);
        order.push(f);
        // Step 5: new points
        spawn_points(tracks, &result.poses, &mut result.points, cfg.spawn_max_residual, 1.0);
        // Step 7: windowed BA over the latest keyframes
        let start = Instant::now();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        let free: BTreeSet<FrameId> = sorted.iter().rev().take(cfg.window).copied().collect();
        let frozen: BTreeSet<FrameId> = sorted.iter().copied().filter(|x| !free.contains(x)).collect();
        let window_points: BTreeMap<TrackId, Vector3<f64>> =
            result.points.iter().filter(|(id, _)| tracks.get(**id).is_some_and(|t| t.frames().any(|fr| free.contains(&fr)))).map(|(i, x)| (*i, *x)).collect();
        let frozen = if frozen.is_empty() { BTreeSet::from([first]) } else { frozen };
        if let Ok(res) = bundle_adjust(&result.poses, &window_points, tracks, &frozen, &cfg.ba) {
            result.poses = res.poses;
            result.points.extend(res.points);
        }
        result.step_times.push((f, start.elapsed().as_secs_f64()));
        // Step 9: full BA on a loop
        if loop_frames.contains(&f) {
            if let Ok(res) = bundle_adjust(&result.poses, &result.points, tracks, &BTreeSet::from([first]), &cfg.ba) {
                result.poses = res.poses;
                result.points = res.points;
            }
        }
        result.removed_tracks += drop_distant(tracks, &result.poses, &mut result.points, cfg.ba.outlier_distance_threshold);
    }
    result.status = SlamStatus::Completed;
    Ok(result)
}
