//! Synthetic scenes with known ground truth.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use thiserror::Error;

use crate::geometry::{project, KeyframePose, Rotation};
use crate::tracks::{FeatureTrack, FrameId, MapPoint, TrackId, TrackSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("bad scene parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrajectoryKind {
    /// One revolution looking at the centre.
    Circle,
    /// Two revolutions looking at the centre; passes the start twice.
    TwoLoop,
    /// Sideways translation in front of a slab of points.
    Straight,
    /// Fixed centre, yaw sweep.
    PureRotation,
    /// Straight walk, then a turn in place.
    WalkAndTurn,
}

impl TrajectoryKind {
    pub const ALL: [TrajectoryKind; 5] = [Self::Circle, Self::TwoLoop, Self::Straight, Self::PureRotation, Self::WalkAndTurn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::TwoLoop => "two-loop",
            Self::Straight => "straight",
            Self::PureRotation => "pure-rotation",
            Self::WalkAndTurn => "walk-and-turn",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrajectoryKind {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| SynthError::BadParams(format!("unknown trajectory kind {s:?}")))
    }
}

/// Image noise: Gaussian with per-axis `sigma`, rejected beyond `bound`
/// in norm, plus uniformly placed gross outliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma: f64,
    pub bound: f64,
    pub outlier_rate: f64,
    /// Angular perturbation applied to relative directions, degrees.
    pub direction_noise_deg: f64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self { sigma: 0.0, bound: 0.0, outlier_rate: 0.0, direction_noise_deg: 0.0 }
    }

    /// One pixel at focal length 500, truncated at three sigma.
    pub fn pixel() -> Self {
        let sigma = 1.0 / 500.0;
        Self { sigma, bound: 3.0 * sigma, outlier_rate: 0.0, direction_noise_deg: 0.0 }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::pixel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub n_frames: usize,
    pub n_points: usize,
    pub noise: NoiseModel,
    /// Total yaw of the pure-rotation sweep, degrees.
    pub sweep_deg: f64,
    /// Half-width of the visible image region in normalized coordinates.
    pub fov: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { n_frames: 40, n_points: 300, noise: NoiseModel::default(), sweep_deg: 90.0, fov: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub kind: TrajectoryKind,
    pub gt_poses: BTreeMap<FrameId, KeyframePose>,
    /// Indexed by track id.
    pub gt_points: Vec<MapPoint>,
    pub tracks: TrackSet,
    pub noise: NoiseModel,
    pub outliers: BTreeSet<(TrackId, FrameId)>,
}

impl SyntheticScene {
    pub fn rotations(&self) -> BTreeMap<FrameId, Rotation> {
        self.gt_poses.iter().map(|(f, p)| (*f, p.r)).collect()
    }

    pub fn centres(&self) -> BTreeMap<FrameId, Vector3<f64>> {
        self.gt_poses.iter().map(|(f, p)| (*f, p.centre())).collect()
    }

    /// Largest distance between any two camera centres or points.
    pub fn diameter(&self) -> f64 {
        let all: Vec<Vector3<f64>> = self.gt_poses.values().map(|p| p.centre()).chain(self.gt_points.iter().map(|p| p.x)).collect();
        let mut d: f64 = 0.0;
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                d = d.max((a - b).norm());
            }
        }
        d
    }

    /// Largest distance between camera centres.
    pub fn trajectory_extent(&self) -> f64 {
        let c: Vec<_> = self.gt_poses.values().map(|p| p.centre()).collect();
        let mut d: f64 = 0.0;
        for (i, a) in c.iter().enumerate() {
            for b in &c[i + 1..] {
                d = d.max((a - b).norm());
            }
        }
        d
    }
}

/// World-to-camera rotation looking from `c` towards `target` with `+y` up.
pub fn look_at(c: &Vector3<f64>, target: &Vector3<f64>) -> Rotation {
    let z = (target - c).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    Rotation::new(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])).expect("orthonormal frame")
}

/// Camera looking along world direction `heading` (horizontal) with `+y` up.
fn heading_rotation(yaw: f64) -> Rotation {
    look_at(&Vector3::zeros(), &Vector3::new(yaw.sin(), 0.0, yaw.cos()))
}

/// Rotates `t` by exactly `deg` degrees about a random perpendicular axis.
pub fn perturb_direction<R: Rng + ?Sized>(t: &Vector3<f64>, deg: f64, rng: &mut R) -> Vector3<f64> {
    if deg == 0.0 {
        return *t;
    }
    let v: [f64; 3] = UnitSphere.sample(rng);
    let mut axis = t.cross(&Vector3::from(v));
    if axis.norm() < 1e-9 {
        axis = t.cross(&Vector3::x());
        if axis.norm() < 1e-9 {
            axis = t.cross(&Vector3::y());
        }
    }
    Rotation::from_axis_angle(&axis, deg.to_radians()) * *t
}

fn poses(kind: TrajectoryKind, p: &SceneParams) -> BTreeMap<FrameId, KeyframePose> {
    let n = p.n_frames;
    let frac = |i: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    (0..n)
        .map(|i| {
            let pose = match kind {
                TrajectoryKind::Circle => {
                    let a = TAU * i as f64 / n as f64;
                    let c = Vector3::new(10.0 * a.cos(), 0.5 * (2.0 * a).sin(), 10.0 * a.sin());
                    KeyframePose::from_centre(look_at(&c, &Vector3::zeros()), &c)
                }
                TrajectoryKind::TwoLoop => {
                    let a = 2.0 * TAU * i as f64 / n as f64;
                    let r = 10.0 + 0.8 * (0.5 * a).sin();
                    let c = Vector3::new(r * a.cos(), 0.4 * a.sin(), r * a.sin());
                    KeyframePose::from_centre(look_at(&c, &Vector3::zeros()), &c)
                }
                TrajectoryKind::Straight => {
                    let c = Vector3::new(0.5 * i as f64, 0.05 * (i as f64 * 0.7).sin(), 0.0);
                    KeyframePose::from_centre(Rotation::identity(), &c)
                }
                TrajectoryKind::PureRotation => KeyframePose::from_centre(heading_rotation(p.sweep_deg.to_radians() * frac(i)), &Vector3::zeros()),
                TrajectoryKind::WalkAndTurn => {
                    let half = n / 2;
                    if i < half || n < 2 {
                        let c = Vector3::new(0.4 * i as f64, 0.0, 0.0);
                        KeyframePose::from_centre(heading_rotation(0.0), &c)
                    } else {
                        let s = (i - half + 1) as f64 / (n - half) as f64;
                        let c = Vector3::new(0.4 * half as f64 + 0.5 * s, 0.0, 0.5 * s);
                        KeyframePose::from_centre(heading_rotation(0.5 * PI * s), &c)
                    }
                }
            };
            (i, pose)
        })
        .collect()
}

fn points<R: Rng>(kind: TrajectoryKind, p: &SceneParams, rng: &mut R) -> Vec<Vector3<f64>> {
    let n = p.n_points;
    (0..n)
        .map(|_| match kind {
            TrajectoryKind::Circle | TrajectoryKind::TwoLoop => {
                let v: [f64; 3] = UnitSphere.sample(rng);
                Vector3::from(v) * 3.0 * rng.random::<f64>().cbrt()
            }
            TrajectoryKind::Straight => {
                let len = 0.5 * p.n_frames as f64;
                Vector3::new(rng.random_range(-5.0..len + 5.0), rng.random_range(-3.0..3.0), rng.random_range(6.0..14.0))
            }
            TrajectoryKind::PureRotation | TrajectoryKind::WalkAndTurn => {
                let a = rng.random_range(-0.3..0.5 * PI + 0.8);
                let r = rng.random_range(8.0..16.0);
                let off = if kind == TrajectoryKind::WalkAndTurn { 0.2 * p.n_frames as f64 } else { 0.0 };
                Vector3::new(off + r * a.sin(), rng.random_range(-2.0..2.0), r * a.cos())
            }
        })
        .collect()
}

/// Deterministic scene of the given kind.
pub fn generate(kind: TrajectoryKind, params: &SceneParams, seed: u64) -> Result<SyntheticScene, SynthError> {
    let nm = &params.noise;
    if params.n_frames == 0 || params.n_points == 0 {
        return Err(SynthError::BadParams("scene needs at least one frame and one point".into()));
    }
    if !(nm.sigma >= 0.0 && nm.bound >= 0.0 && (0.0..1.0).contains(&nm.outlier_rate) && nm.direction_noise_deg >= 0.0) {
        return Err(SynthError::BadParams(format!("invalid noise model {nm:?}")));
    }
    if nm.sigma > 0.0 && nm.bound <= 0.0 {
        return Err(SynthError::BadParams("noise bound must be positive when sigma is".into()));
    }
    if !(params.fov > 0.0) {
        return Err(SynthError::BadParams("fov must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt_poses = poses(kind, params);
    let xs = points(kind, params, &mut rng);
    let normal = Normal::new(0.0, nm.sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");

    let mut gt_points = Vec::new();
    let mut tracks = TrackSet::default();
    let mut outliers = BTreeSet::new();
    for x in xs {
        let visible: Vec<(FrameId, Vector2<f64>)> = gt_poses
            .iter()
            .filter(|(_, pose)| pose.depth(&x) > 0.5)
            .filter_map(|(f, pose)| project(&x, pose).ok().map(|u| (*f, u)))
            .filter(|(_, u)| u.x.abs() <= params.fov && u.y.abs() <= params.fov)
            .collect();
        if visible.len() < 2 {
            continue;
        }
        let id = gt_points.len();
        let mut obs = Vec::with_capacity(visible.len());
        for (f, u) in visible {
            let mut u = u;
            if nm.sigma > 0.0 {
                loop {
                    let d = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                    if d.norm() <= nm.bound {
                        u += d;
                        break;
                    }
                }
            }
            if nm.outlier_rate > 0.0 && rng.random::<f64>() < nm.outlier_rate {
                let a = rng.random_range(0.0..TAU);
                u += Vector2::new(a.cos(), a.sin()) * rng.random_range(0.05..0.2);
                outliers.insert((id, f));
            }
            obs.push((f, u));
        }
        tracks.insert(FeatureTrack::from_points(id, obs).expect("frames are ordered"));
        gt_points.push(MapPoint { track_id: id, x });
    }
    Ok(SyntheticScene { kind, gt_poses, gt_points, tracks, noise: *nm, outliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::residual_ratio;
    use crate::relmotion::{correspondences, essential_from_motion, sampson_distance};

    #[test]
    fn same_seed_same_scene() {
        for kind in TrajectoryKind::ALL {
            let p = SceneParams { n_frames: 12, n_points: 60, ..Default::default() };
            assert_eq!(generate(kind, &p, 3).unwrap(), generate(kind, &p, 3).unwrap(), "{kind}");
            assert_eq!(kind.name().parse::<TrajectoryKind>().unwrap(), kind);
        }
    }

    #[test]
    fn pure_rotation_keeps_the_centre() {
        let p = SceneParams { n_frames: 20, sweep_deg: 60.0, ..Default::default() };
        let s = generate(TrajectoryKind::PureRotation, &p, 1).unwrap();
        for pose in s.gt_poses.values() {
            assert!(pose.centre().norm() < 1e-12);
        }
        assert!((s.gt_poses[&0].r.angle_to(&s.gt_poses[&19].r).to_degrees() - 60.0).abs() < 1e-9);
        assert!(s.tracks.len() > 50);
    }

    #[test]
    fn noiseless_circle_is_epipolar_exact() {
        let p = SceneParams { n_frames: 10, n_points: 50, noise: NoiseModel::none(), ..Default::default() };
        let s = generate(TrajectoryKind::Circle, &p, 2).unwrap();
        for (j, k) in [(0, 1), (2, 7), (3, 9)] {
            let (pj, pk) = (s.gt_poses[&j], s.gt_poses[&k]);
            let r = pk.r * pj.r.transpose();
            let t = pk.t - r * pj.t;
            let e = essential_from_motion(&r, &t);
            for c in correspondences(&s.tracks, j, k) {
                assert!(sampson_distance(&e, &c) < 1e-12);
            }
        }
    }

    #[test]
    fn noise_respects_the_bound_and_depths_are_positive() {
        let s = generate(TrajectoryKind::TwoLoop, &SceneParams { n_frames: 30, ..Default::default() }, 4).unwrap();
        for t in s.tracks.iter() {
            for o in t.observations() {
                let r = residual_ratio(&s.gt_points[t.track_id].x, &s.gt_poses[&o.frame_id], &o.u).unwrap();
                assert!(r <= s.noise.bound + 1e-15);
            }
        }
    }

    #[test]
    fn outlier_fraction_is_binomial() {
        let noise = NoiseModel { outlier_rate: 0.3, ..NoiseModel::pixel() };
        let s = generate(TrajectoryKind::Circle, &SceneParams { n_frames: 20, n_points: 100, noise, ..Default::default() }, 5).unwrap();
        let n = s.tracks.observations().count() as f64;
        let frac = s.outliers.len() as f64 / n;
        let sd = (0.3 * 0.7 / n).sqrt();
        assert!((frac - 0.3).abs() < 2.576 * sd, "{frac}");
    }

    #[test]
    fn two_loop_revisits_its_start_twice() {
        let s = generate(TrajectoryKind::TwoLoop, &SceneParams { n_frames: 40, ..Default::default() }, 6).unwrap();
        let c0 = s.gt_poses[&0].centre();
        assert!((s.gt_poses[&20].centre() - c0).norm() < 1e-9);
        assert!((s.gt_poses[&39].centre() - c0).norm() < 3.5);
    }

    #[test]
    fn direction_perturbation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Vector3::new(0.2, -0.5, 0.8).normalize();
        let p = perturb_direction(&t, 0.5, &mut rng);
        assert!((p.angle(&t).to_degrees() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn bad_params_are_rejected() {
        assert!(generate(TrajectoryKind::Circle, &SceneParams { n_frames: 0, ..Default::default() }, 0).is_err());
        let noise = NoiseModel { outlier_rate: 1.5, ..NoiseModel::pixel() };
        assert!(generate(TrajectoryKind::Circle, &SceneParams { noise, ..Default::default() }, 0).is_err());
        assert!("spiral".parse::<TrajectoryKind>().is_err());
    }
}
