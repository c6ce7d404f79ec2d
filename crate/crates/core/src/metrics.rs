//! Similarity alignment and trajectory error metrics.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{KeyframePose, Rotation};
use crate::tracks::{FrameId, MapPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("camera centres are collinear or too few ({0}) to fix a similarity")]
    DegenerateConfiguration(usize),
    #[error("estimate and ground truth cover different frames")]
    FrameMismatch,
}

/// `x -> s R x + d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub s: f64,
    pub r: Rotation,
    pub d: Vector3<f64>,
}

impl Default for Similarity {
    fn default() -> Self {
        Self { s: 1.0, r: Rotation::identity(), d: Vector3::zeros() }
    }
}

impl Similarity {
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x * self.s + self.d
    }

    /// The same camera in the transformed world.
    pub fn apply_pose(&self, pose: &KeyframePose) -> KeyframePose {
        KeyframePose::from_centre(pose.r * self.r.transpose(), &self.apply(&pose.centre()))
    }

    pub fn apply_poses(&self, poses: &BTreeMap<FrameId, KeyframePose>) -> BTreeMap<FrameId, KeyframePose> {
        poses.iter().map(|(f, p)| (*f, self.apply_pose(p))).collect()
    }

    pub fn apply_points(&self, points: &[MapPoint]) -> Vec<MapPoint> {
        points.iter().map(|p| MapPoint { track_id: p.track_id, x: self.apply(&p.x) }).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub sim: Similarity,
    /// Root mean square distance between aligned and reference centres.
    pub rms: f64,
    /// Set when the scale came from trajectory length because the centres
    /// were collinear.
    pub length_fallback: bool,
}

fn paired(est: &BTreeMap<FrameId, KeyframePose>, gt: &BTreeMap<FrameId, KeyframePose>) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), MetricsError> {
    if est.len() != gt.len() || est.keys().zip(gt.keys()).any(|(a, b)| a != b) {
        return Err(MetricsError::FrameMismatch);
    }
    Ok((est.values().map(|p| p.centre()).collect(), gt.values().map(|p| p.centre()).collect()))
}

fn mean(v: &[Vector3<f64>]) -> Vector3<f64> {
    v.iter().sum::<Vector3<f64>>() / v.len() as f64
}

fn rms(a: &[Vector3<f64>], b: &[Vector3<f64>], sim: &Similarity) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (sim.apply(x) - y).norm_squared()).sum::<f64>() / a.len() as f64).sqrt()
}

/// Closed-form least-squares similarity taking estimated centres onto the
/// reference centres.
pub fn align_similarity(est: &BTreeMap<FrameId, KeyframePose>, gt: &BTreeMap<FrameId, KeyframePose>) -> Result<Alignment, MetricsError> {
    let (a, b) = paired(est, gt)?;
    if a.len() < 3 {
        return Err(MetricsError::DegenerateConfiguration(a.len()));
    }
    let (ma, mb) = (mean(&a), mean(&b));
    let mut cov = Matrix3::zeros();
    let mut var_a = 0.0;
    for (x, y) in a.iter().zip(&b) {
        cov += (y - mb) * (x - ma).transpose();
        var_a += (x - ma).norm_squared();
    }
    cov /= a.len() as f64;
    var_a /= a.len() as f64;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if sv[order[1]] <= 1e-12 * sv[order[0]].max(f64::MIN_POSITIVE) || var_a <= 0.0 {
        return Err(MetricsError::DegenerateConfiguration(a.len()));
    }
    let mut sgn = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sgn[(order[2], order[2])] = -1.0;
    }
    let r = u * sgn * vt;
    let s = (sv.component_mul(&sgn.diagonal())).sum() / var_a;
    let r = Rotation::project(&r);
    let d = mb - r * ma * s;
    let sim = Similarity { s, r, d };
    Ok(Alignment { rms: rms(&a, &b, &sim), sim, length_fallback: false })
}

/// Like [`align_similarity`], but collinear trajectories fall back to a
/// scale from path length, a rotation taking the estimated path direction
/// onto the reference one, and matching centroids.
pub fn align_or_fallback(est: &BTreeMap<FrameId, KeyframePose>, gt: &BTreeMap<FrameId, KeyframePose>) -> Result<Alignment, MetricsError> {
    match align_similarity(est, gt) {
        Err(MetricsError::DegenerateConfiguration(_)) => {}
        other => return other,
    }
    let (a, b) = paired(est, gt)?;
    let length = |v: &[Vector3<f64>]| v.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>();
    let (la, lb) = (length(&a), length(&b));
    let s = if la > 0.0 { lb / la } else { 1.0 };
    let (ma, mb) = (mean(&a), mean(&b));
    let dir = |v: &[Vector3<f64>]| v.last().zip(v.first()).map(|(l, f)| l - f).filter(|d| d.norm() > 0.0);
    let r = match (dir(&a), dir(&b)) {
        (Some(da), Some(db)) => {
            let (da, db) = (da.normalize(), db.normalize());
            let axis = da.cross(&db);
            if axis.norm() < 1e-15 {
                Rotation::identity()
            } else {
                Rotation::from_axis_angle(&axis, axis.norm().atan2(da.dot(&db)))
            }
        }
        _ => Rotation::identity(),
    };
    let sim = Similarity { s, r, d: mb - r * ma * s };
    Ok(Alignment { rms: rms(&a, &b, &sim), sim, length_fallback: true })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub frames: Vec<FrameId>,
    pub pos_err: Vec<f64>,
    pub rot_err_deg: Vec<f64>,
    pub pos_max: f64,
    pub pos_rmse: f64,
    pub rot_max_deg: f64,
    pub rot_rmse_deg: f64,
}

/// Per-frame errors of an already aligned estimate.
pub fn compute_metrics(est: &BTreeMap<FrameId, KeyframePose>, gt: &BTreeMap<FrameId, KeyframePose>) -> Result<Metrics, MetricsError> {
    paired(est, gt)?;
    let frames: Vec<FrameId> = gt.keys().copied().collect();
    let pos_err: Vec<f64> = frames.iter().map(|f| (est[f].centre() - gt[f].centre()).norm()).collect();
    let rot_err_deg: Vec<f64> = frames.iter().map(|f| gt[f].r.angle_to(&est[f].r).to_degrees()).collect();
    let rmse = |v: &[f64]| if v.is_empty() { 0.0 } else { (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt() };
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(Metrics {
        pos_max: max(&pos_err),
        pos_rmse: rmse(&pos_err),
        rot_max_deg: max(&rot_err_deg),
        rot_rmse_deg: rmse(&rot_err_deg),
        frames,
        pos_err,
        rot_err_deg,
    })
}

/// Aligns `est` onto `gt` (with the collinear fallback) and measures it.
pub fn evaluate(est: &BTreeMap<FrameId, KeyframePose>, gt: &BTreeMap<FrameId, KeyframePose>) -> Result<(Metrics, Alignment), MetricsError> {
    let al = align_or_fallback(est, gt)?;
    let m = compute_metrics(&al.sim.apply_poses(est), gt)?;
    Ok((m, al))
}

/// Rotation-only error after the best global rotation (world frame change).
pub fn rotation_errors_deg(est: &BTreeMap<FrameId, Rotation>, gt: &BTreeMap<FrameId, Rotation>) -> Result<BTreeMap<FrameId, f64>, MetricsError> {
    if est.len() != gt.len() || est.keys().zip(gt.keys()).any(|(a, b)| a != b) {
        return Err(MetricsError::FrameMismatch);
    }
    let g = crate::rotavg::gauge_rotation(est, gt);
    Ok(gt.iter().map(|(f, r)| (*f, r.angle_to(&(est[f] * g)).to_degrees())).collect())
}
