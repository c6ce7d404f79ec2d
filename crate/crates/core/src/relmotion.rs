//! Relative motion between two keyframes.
//!
//! The essential matrix is estimated with the normalized 8-point algorithm
//! inside RANSAC, decomposed into a rotation and a unit translation
//! direction, and polished by robust Levenberg-Marquardt on the Sampson
//! distances. When the baseline is too small for the epipolar geometry to be
//! informative the rotation is instead obtained by aligning the back-projected
//! rays with a rotation-only trimmed ICP.
//!
//! Convention: camera-`k` coordinates satisfy `x_k = R_jk x_j + t_rel`, the
//! essential matrix is `E = [t_rel]x R_jk` with `x_k^T E x_j = 0`, and the
//! reported direction is `t_e = -R_jk^T t_rel / |t_rel|`, i.e. the direction
//! from centre `j` to centre `k` in camera-`j` coordinates.

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{bearing, skew, Rotation};
use crate::tracks::{FrameId, TrackSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelMotionError {
    #[error("degenerate configuration for the 8-point solver")]
    DegenerateConfiguration,
    #[error("too few inliers: {found} < {needed}")]
    TooFewInliers { found: usize, needed: usize },
    #[error("no decomposition wins a strict cheirality majority")]
    AmbiguousCheirality,
    #[error("need at least 3 ray pairs, got {0}")]
    InsufficientRays(usize),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub u_j: Vector2<f64>,
    pub u_k: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionMethod {
    Essential,
    RayAlign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeMotion {
    pub r_jk: Rotation,
    pub t_e: Option<Vector3<f64>>,
    pub inlier_mask: Vec<bool>,
    pub method: MotionMethod,
}

impl RelativeMotion {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacConfig {
    /// Sampson distance threshold in normalized image units.
    pub threshold: f64,
    pub max_iter: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { threshold: 1e-3, max_iter: 1000, confidence: 0.999, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelMotionConfig {
    pub ransac: RansacConfig,
    /// Cauchy scale of the nonlinear refinement, normalized units; 0 skips it.
    pub refine_scale: f64,
    /// Median parallax below which the ray-alignment fallback is used.
    pub min_parallax_deg: f64,
    /// Minimum ratio of the rotation-only median angular residual to the
    /// essential median Sampson residual; below it the pair is treated as a
    /// pure rotation. 0 disables the test.
    pub min_model_ratio: f64,
    pub trim_ratio: f64,
    pub trim_max_iter: usize,
}

impl Default for RelMotionConfig {
    fn default() -> Self {
        Self { ransac: RansacConfig::default(), refine_scale: 3e-3, min_parallax_deg: 0.5, min_model_ratio: 4.0, trim_ratio: 0.8, trim_max_iter: 50 }
    }
}

/// Correspondences between frames `j` and `k` over all shared tracks.
pub fn correspondences(tracks: &TrackSet, j: FrameId, k: FrameId) -> Vec<Correspondence> {
    tracks.shared(j, k).into_iter().map(|(_, u_j, u_k)| Correspondence { u_j, u_k }).collect()
}

fn homog(u: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new(u.x, u.y, 1.0)
}

/// `E = [t]x R` for the motion `x_k = R x_j + t`.
pub fn essential_from_motion(r: &Rotation, t: &Vector3<f64>) -> Matrix3<f64> {
    skew(t) * r.matrix()
}

/// First-order geometric distance of a correspondence to the epipolar
/// constraint, in normalized image units.
pub fn sampson_distance(e: &Matrix3<f64>, c: &Correspondence) -> f64 {
    sampson_signed(e, c).abs()
}

fn sampson_signed(e: &Matrix3<f64>, c: &Correspondence) -> f64 {
    let xj = homog(&c.u_j);
    let xk = homog(&c.u_k);
    let ex = e * xj;
    let etx = e.transpose() * xk;
    let num = xk.dot(&ex);
    let den = ex.x * ex.x + ex.y * ex.y + etx.x * etx.x + etx.y * etx.y;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num / den.sqrt()
}

/// Robust Levenberg-Marquardt on the signed Sampson distances over
/// `R <- exp(w) R` and `t <- normalize(t + B b)` with `B` spanning the
/// tangent plane of `t`. Cauchy weights with scale `c`.
fn refine_motion(r0: &Rotation, t0: &Vector3<f64>, corrs: &[Correspondence], c: f64) -> (Rotation, Vector3<f64>) {
    let apply = |r: &Rotation, t: &Vector3<f64>, p: &SMatrix<f64, 5, 1>| {
        let b1 = t.cross(&if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
        let b2 = t.cross(&b1);
        (Rotation::exp(&p.fixed_rows::<3>(0).into_owned()) * *r, (t + b1 * p[3] + b2 * p[4]).normalize())
    };
    let residuals = |r: &Rotation, t: &Vector3<f64>| -> Vec<f64> {
        let e = essential_from_motion(r, t);
        corrs.iter().map(|k| sampson_signed(&e, k)).collect()
    };
    let cost = |res: &[f64]| res.iter().map(|x| (1.0 + (x / c).powi(2)).ln()).sum::<f64>();
    let (mut r, mut t) = (*r0, *t0);
    let mut res = residuals(&r, &t);
    let mut cur = cost(&res);
    let mut lambda = 1e-3;
    let h = 1e-7;
    for _ in 0..50 {
        let mut jac = vec![SMatrix::<f64, 1, 5>::zeros(); corrs.len()];
        for a in 0..5 {
            let d = SMatrix::<f64, 5, 1>::from_fn(|i, _| if i == a { h } else { 0.0 });
            let (rp, tp) = apply(&r, &t, &d);
            let (rm, tm) = apply(&r, &t, &-d);
            for (row, (p, m)) in jac.iter_mut().zip(residuals(&rp, &tp).into_iter().zip(residuals(&rm, &tm))) {
                row[a] = (p - m) / (2.0 * h);
            }
        }
        let mut jtj = SMatrix::<f64, 5, 5>::zeros();
        let mut jtr = SMatrix::<f64, 5, 1>::zeros();
        for (row, x) in jac.iter().zip(&res) {
            let w = 1.0 / (1.0 + (x / c).powi(2));
            jtj += row.transpose() * row * w;
            jtr += row.transpose() * (w * x);
        }
        let mut improved = false;
        while lambda < 1e10 {
            let mut a = jtj;
            for i in 0..5 {
                a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|ch| ch.solve(&-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let (rn, tn) = apply(&r, &t, &step);
            let rn_res = residuals(&rn, &tn);
            let next = cost(&rn_res);
            if next < cur {
                let done = cur - next <= 1e-12 * cur.max(1e-300) || step.norm() < 1e-12;
                (r, t, res, cur) = (rn, tn, rn_res, next);
                lambda = (lambda / 3.0).max(1e-12);
                improved = !done;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (r, t)
}

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let d = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if d > 0.0 { std::f64::consts::SQRT_2 / d } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Projection onto the essential manifold: singular values `(s, s, 0)`.
fn enforce_essential(e: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = e.svd(true, true);
    let s = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    svd.u.unwrap() * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * svd.v_t.unwrap()
}

/// Linear 8-point fit over all given correspondences.
fn eight_point(corrs: &[Correspondence]) -> Result<Matrix3<f64>, RelMotionError> {
    if corrs.len() < 8 {
        return Err(RelMotionError::TooFewInliers { found: corrs.len(), needed: 8 });
    }
    let pj: Vec<_> = corrs.iter().map(|c| c.u_j).collect();
    let pk: Vec<_> = corrs.iter().map(|c| c.u_k).collect();
    let tj = hartley(&pj);
    let tk = hartley(&pk);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for c in corrs {
        let xj = tj * homog(&c.u_j);
        let xk = tk * homog(&c.u_k);
        let mut row = SMatrix::<f64, 9, 1>::zeros();
        for a in 0..3 {
            for b in 0..3 {
                row[3 * a + b] = xk[a] * xj[b];
            }
        }
        ata += row * row.transpose();
    }
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let top = eig.eigenvalues[order[8]].max(f64::MIN_POSITIVE);
    // a second (near) null vector means the design matrix has rank < 8
    if eig.eigenvalues[order[1]] <= 1e-12 * top {
        return Err(RelMotionError::DegenerateConfiguration);
    }
    let v = eig.eigenvectors.column(order[0]);
    let en = Matrix3::from_fn(|a, b| v[3 * a + b]);
    let e = enforce_essential(&(tk.transpose() * en * tj));
    let n = e.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(RelMotionError::DegenerateConfiguration);
    }
    Ok(e / n)
}

fn inliers_of(e: &Matrix3<f64>, corrs: &[Correspondence], threshold: f64) -> Vec<bool> {
    corrs.iter().map(|c| sampson_distance(e, c) < threshold).collect()
}

/// RANSAC over 8-point samples followed by a refit on the consensus set.
pub fn estimate_essential(corrs: &[Correspondence], cfg: &RansacConfig) -> Result<(Matrix3<f64>, Vec<bool>), RelMotionError> {
    if corrs.len() < 8 {
        return Err(RelMotionError::TooFewInliers { found: corrs.len(), needed: 8 });
    }
    if !(cfg.threshold > 0.0) || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(RelMotionError::BadParameter("ransac threshold/confidence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = corrs.len();
    let mut best: Option<(Matrix3<f64>, Vec<bool>, usize)> = None;
    let mut limit = cfg.max_iter;
    let mut degenerate = 0;
    let mut it = 0;
    while it < limit {
        it += 1;
        let idx = sample(&mut rng, n, 8);
        let subset: Vec<_> = idx.iter().map(|i| corrs[i]).collect();
        let e = match eight_point(&subset) {
            Ok(e) => e,
            Err(_) => {
                degenerate += 1;
                continue;
            }
        };
        let mask = inliers_of(&e, corrs, cfg.threshold);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|b| count > b.2) {
            let w = count as f64 / n as f64;
            let miss = 1.0 - w.powi(8);
            if miss <= 0.0 {
                limit = it;
            } else if miss < 1.0 {
                let need = ((1.0 - cfg.confidence).ln() / miss.ln()).ceil();
                if need.is_finite() && need >= 0.0 {
                    limit = limit.min(need as usize);
                }
            }
            best = Some((e, mask, count));
        }
    }
    let Some((mut e, mut mask, mut count)) = best else {
        return Err(if degenerate > 0 { RelMotionError::DegenerateConfiguration } else { RelMotionError::TooFewInliers { found: 0, needed: 8 } });
    };
    if count < 8 {
        return Err(RelMotionError::TooFewInliers { found: count, needed: 8 });
    }
    let consensus: Vec<_> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    if let Ok(refit) = eight_point(&consensus) {
        let m2 = inliers_of(&refit, corrs, cfg.threshold);
        let c2 = m2.iter().filter(|&&b| b).count();
        if c2 >= count {
            e = refit;
            mask = m2;
            count = c2;
        }
    }
    debug_assert!(count >= 8);
    Ok((e, mask))
}

/// Depths `(lambda_j, lambda_k)` with `lambda_k x_k = lambda_j R x_j + t` in
/// the least-squares sense.
fn depths(r: &Matrix3<f64>, t: &Vector3<f64>, c: &Correspondence) -> Option<(f64, f64)> {
    let a = r * homog(&c.u_j);
    let b = homog(&c.u_k);
    // [a, -b] [lj; lk] = -t
    let m = nalgebra::Matrix3x2::from_columns(&[a, -b]);
    let mtm = m.transpose() * m;
    let rhs = m.transpose() * (-t);
    let sol = mtm.try_inverse()? * rhs;
    Some((sol[0], sol[1]))
}

/// Four-fold decomposition of `E`, choosing the candidate with the most
/// points in front of both cameras.
pub fn decompose_essential(e: &Matrix3<f64>, corrs: &[Correspondence]) -> Result<RelativeMotion, RelMotionError> {
    if corrs.is_empty() {
        return Err(RelMotionError::TooFewInliers { found: 0, needed: 1 });
    }
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t: Vector3<f64> = u.column(2).normalize();
    let rs = [u * w * v_t, u * w.transpose() * v_t];
    let mut votes = Vec::with_capacity(4);
    for r in &rs {
        for tc in [t, -t] {
            let v = corrs
                .iter()
                .filter(|c| matches!(depths(r, &tc, c), Some((a, b)) if a > 0.0 && b > 0.0))
                .count();
            votes.push((v, *r, tc));
        }
    }
    votes.sort_by(|a, b| b.0.cmp(&a.0));
    let (v, r, t_rel) = votes[0];
    if 2 * v <= corrs.len() || votes[1].0 == v {
        return Err(RelMotionError::AmbiguousCheirality);
    }
    let r = Rotation::project(&r);
    let t_e = -(r.transpose() * t_rel).normalize();
    Ok(RelativeMotion { r_jk: r, t_e: Some(t_e), inlier_mask: vec![true; corrs.len()], method: MotionMethod::Essential })
}

/// Rotation minimizing the trimmed sum of `|ray_k - R ray_j|^2`.
///
/// Each iteration keeps the `ceil(trim_ratio * n)` pairs with the smallest
/// residual under the current rotation and refits by the polar factor of the
/// cross-covariance. Returns the rotation and the final kept mask.
pub fn rotation_align_trimmed_with_mask(
    rays_j: &[Vector3<f64>],
    rays_k: &[Vector3<f64>],
    trim_ratio: f64,
    max_iter: usize,
) -> Result<(Rotation, Vec<bool>), RelMotionError> {
    let n = rays_j.len().min(rays_k.len());
    if n < 3 || rays_j.len() != rays_k.len() {
        return Err(RelMotionError::InsufficientRays(n));
    }
    if !(trim_ratio > 0.0 && trim_ratio <= 1.0) {
        return Err(RelMotionError::BadParameter(format!("trim ratio {trim_ratio}")));
    }
    let keep_n = ((trim_ratio * n as f64).ceil() as usize).clamp(3, n);
    let fit = |mask: &[bool]| {
        let mut h = Matrix3::zeros();
        for i in (0..n).filter(|&i| mask[i]) {
            h += rays_k[i] * rays_j[i].transpose();
        }
        Rotation::project(&h)
    };
    let residuals = |r: &Rotation| -> Vec<f64> { (0..n).map(|i| (rays_k[i] - r * rays_j[i]).norm_squared()).collect() };
    let mut mask = vec![true; n];
    let mut r = fit(&mask);
    let mut prev_obj = f64::INFINITY;
    for _ in 0..max_iter.max(1) {
        let res = residuals(&r);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| res[a].total_cmp(&res[b]).then(a.cmp(&b)));
        let mut next = vec![false; n];
        for &i in &order[..keep_n] {
            next[i] = true;
        }
        let obj: f64 = order[..keep_n].iter().map(|&i| res[i]).sum();
        debug_assert!(obj <= prev_obj + 1e-12 * (1.0 + prev_obj.abs()), "trimmed objective increased");
        prev_obj = obj;
        if next == mask {
            break;
        }
        mask = next;
        r = fit(&mask);
    }
    Ok((r, mask))
}

pub fn rotation_align_trimmed(rays_j: &[Vector3<f64>], rays_k: &[Vector3<f64>], trim_ratio: f64, max_iter: usize) -> Result<Rotation, RelMotionError> {
    rotation_align_trimmed_with_mask(rays_j, rays_k, trim_ratio, max_iter).map(|(r, _)| r)
}

/// Median angle between `R_jk` applied to the rays of `j` and the rays of
/// `k`, over the masked correspondences, in degrees.
pub fn median_parallax_deg(r: &Rotation, corrs: &[Correspondence], mask: &[bool]) -> f64 {
    let mut angles: Vec<f64> = corrs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| {
            let a = r * bearing(&c.u_j);
            let b = bearing(&c.u_k);
            a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
        })
        .collect();
    if angles.is_empty() {
        return 0.0;
    }
    angles.sort_by(f64::total_cmp);
    let m = angles.len();
    if m % 2 == 1 {
        angles[m / 2]
    } else {
        0.5 * (angles[m / 2 - 1] + angles[m / 2])
    }
}

/// Essential path with the low-displacement fallback.
pub fn estimate_relative(corrs: &[Correspondence], cfg: &RelMotionConfig) -> Result<RelativeMotion, RelMotionError> {
    if corrs.len() < 3 {
        return Err(RelMotionError::InsufficientRays(corrs.len()));
    }
    let rays_j: Vec<_> = corrs.iter().map(|c| bearing(&c.u_j)).collect();
    let rays_k: Vec<_> = corrs.iter().map(|c| bearing(&c.u_k)).collect();
    let (r, mask) = rotation_align_trimmed_with_mask(&rays_j, &rays_k, cfg.trim_ratio, cfg.trim_max_iter)?;
    if corrs.len() >= 8 {
        if let Ok(m) = essential_path(corrs, cfg) {
            if median_parallax_deg(&m.r_jk, corrs, &m.inlier_mask) >= cfg.min_parallax_deg && model_ratio(&r, &m, corrs) >= cfg.min_model_ratio {
                return Ok(m);
            }
        }
    }
    Ok(RelativeMotion { r_jk: r, t_e: None, inlier_mask: mask, method: MotionMethod::RayAlign })
}

/// Rotation-only median angular residual over the essential median Sampson
/// residual, both in radians over all correspondences.
fn model_ratio(r_only: &Rotation, m: &RelativeMotion, corrs: &[Correspondence]) -> f64 {
    let Some(t_e) = m.t_e else { return f64::INFINITY };
    let e = essential_from_motion(&m.r_jk, &-(m.r_jk * t_e));
    let a = median_parallax_deg(r_only, corrs, &vec![true; corrs.len()]).to_radians();
    let mut ess: Vec<f64> = corrs.iter().map(|c| sampson_distance(&e, c)).collect();
    ess.sort_by(f64::total_cmp);
    let b = ess[ess.len() / 2];
    if b <= 0.0 { f64::INFINITY } else { a / b }
}

fn essential_path(corrs: &[Correspondence], cfg: &RelMotionConfig) -> Result<RelativeMotion, RelMotionError> {
    let (e, mask) = estimate_essential(corrs, &cfg.ransac)?;
    let inl: Vec<_> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    let mut m = decompose_essential(&e, &inl)?;
    m.inlier_mask = mask;
    if cfg.refine_scale <= 0.0 {
        return Ok(m);
    }
    let c = cfg.refine_scale;
    let cost = |r: &Rotation, t: &Vector3<f64>| {
        let e = essential_from_motion(r, t);
        corrs.iter().map(|k| (1.0 + (sampson_distance(&e, k) / c).powi(2)).ln()).sum::<f64>()
    };
    // the linear fit can sit in the wrong basin on short baselines, so the
    // rotation-only fit with a few translation guesses is refined as well
    let mut starts = vec![(m.r_jk, -(m.r_jk * m.t_e.expect("essential path has a direction")))];
    let rays_j: Vec<_> = corrs.iter().map(|c| bearing(&c.u_j)).collect();
    let rays_k: Vec<_> = corrs.iter().map(|c| bearing(&c.u_k)).collect();
    if let Ok((r_only, _)) = rotation_align_trimmed_with_mask(&rays_j, &rays_k, cfg.trim_ratio, cfg.trim_max_iter) {
        for d in [Vector3::x(), Vector3::y(), Vector3::z(), Vector3::new(1.0, 0.0, 1.0), Vector3::new(0.0, 1.0, 1.0), Vector3::new(1.0, 1.0, 0.0)] {
            starts.push((r_only, d.normalize()));
        }
    }
    let (r, t) = starts
        .iter()
        .map(|(r, t)| refine_motion(r, t, corrs, c))
        .map(|(r, t)| (cost(&r, &t), r, t))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, r, t)| (r, t))
        .expect("at least one start");
    let e = essential_from_motion(&r, &t);
    let mask = inliers_of(&e, corrs, cfg.ransac.threshold);
    // the refined essential matrix is shared by the twisted pair, so all
    // four factorizations are checked again
    let inl: Vec<_> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
    let mut m = decompose_essential(&e, &inl)?;
    m.inlier_mask = mask;
    Ok(m)
}

/// Design matrix rank helper used by tests and diagnostics.
pub fn design_rank(corrs: &[Correspondence], rel_tol: f64) -> usize {
    let a = DMatrix::from_fn(corrs.len(), 9, |i, c| {
        let xj = homog(&corrs[i].u_j);
        let xk = homog(&corrs[i].u_k);
        xk[c / 3] * xj[c % 3]
    });
    let sv = a.singular_values();
    let top = sv.max();
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, UnitSphere};

    fn scene(rng: &mut ChaCha8Rng, r: &Rotation, t: &Vector3<f64>, n: usize) -> Vec<Correspondence> {
        let mut out = Vec::new();
        while out.len() < n {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..8.0));
            let y = r * x + t;
            if y.z > 0.1 {
                out.push(Correspondence { u_j: x.xy() / x.z, u_k: y.xy() / y.z });
            }
        }
        out
    }

    #[test]
    fn essential_of_yaw_and_lateral_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Rotation::from_axis_angle(&Vector3::y(), 0.5 * std::f64::consts::FRAC_PI_2);
        let t = Vector3::new(1.0, 0.0, 0.0);
        let corrs = scene(&mut rng, &r, &t, 60);
        let (e, mask) = estimate_essential(&corrs, &RansacConfig::default()).unwrap();
        assert!(mask.iter().all(|&m| m));
        for c in &corrs {
            assert!(homog(&c.u_k).dot(&(e * homog(&c.u_j))).abs() < 1e-10);
        }
        let svd = e.svd(false, false).singular_values;
        let mut s: Vec<f64> = svd.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!((s[0] - s[1]).abs() < 1e-9 && s[2] < 1e-9);
    }

    #[test]
    fn decompose_recovers_motion_and_ignores_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let r = Rotation::exp(&(Vector3::new(rng.random(), rng.random(), rng.random()) * 0.4));
            let t: Vector3<f64> = Vector3::from_column_slice(&UnitSphere.sample(&mut rng)) * 0.7;
            let corrs = scene(&mut rng, &r, &t, 12);
            let e = essential_from_motion(&r, &t);
            let m = decompose_essential(&e, &corrs).unwrap();
            let want = -(r.transpose() * t).normalize();
            assert!(m.r_jk.angle_to(&r) < 1e-8);
            assert!((m.t_e.unwrap() - want).norm() < 1e-8);
            let neg = decompose_essential(&(-e), &corrs).unwrap();
            assert!(neg.r_jk.angle_to(&m.r_jk) < 1e-9);
            assert!((neg.t_e.unwrap() - m.t_e.unwrap()).norm() < 1e-9);
        }
    }

    #[test]
    fn outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Rotation::exp(&Vector3::new(0.05, -0.2, 0.02));
        let t = Vector3::new(-0.8, 0.1, 0.2);
        let mut corrs = scene(&mut rng, &r, &t, 100);
        let mut labels = vec![true; 100];
        for (i, l) in labels.iter_mut().enumerate().take(30) {
            corrs[i].u_k += Vector2::new(rng.random_range(0.05..0.3), rng.random_range(-0.3..-0.05));
            *l = false;
        }
        let (_, mask) = estimate_essential(&corrs, &RansacConfig::default()).unwrap();
        assert_eq!(mask, labels);
    }

    #[test]
    fn too_few_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let corrs = scene(&mut rng, &Rotation::identity(), &Vector3::x(), 7);
        assert_eq!(estimate_essential(&corrs, &RansacConfig::default()), Err(RelMotionError::TooFewInliers { found: 7, needed: 8 }));
        assert_eq!(estimate_relative(&[], &RelMotionConfig::default()), Err(RelMotionError::InsufficientRays(0)));
    }

    #[test]
    fn pure_rotation_is_degenerate_for_the_essential_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Rotation::exp(&Vector3::new(0.0, 0.3, 0.0));
        let corrs = scene(&mut rng, &r, &Vector3::zeros(), 40);
        assert!(design_rank(&corrs, 1e-9) < 8);
        let m = estimate_relative(&corrs, &RelMotionConfig::default()).unwrap();
        assert_eq!(m.method, MotionMethod::RayAlign);
        assert!(m.r_jk.angle_to(&r).to_degrees() < 0.1);
        assert!(m.t_e.is_none());
    }

    #[test]
    fn wide_baseline_uses_essential_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = Rotation::exp(&Vector3::new(0.0, 0.2, 0.0));
        let t = Vector3::new(-1.0, 0.0, 0.1);
        let corrs = scene(&mut rng, &r, &t, 50);
        let m = estimate_relative(&corrs, &RelMotionConfig::default()).unwrap();
        assert_eq!(m.method, MotionMethod::Essential);
        assert!(m.r_jk.angle_to(&r) < 1e-8);
    }

    #[test]
    fn trimmed_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = Rotation::exp(&Vector3::new(0.3, -0.1, 0.8));
        let rays_j: Vec<Vector3<f64>> = (0..50).map(|_| Vector3::from_column_slice(&UnitSphere.sample(&mut rng))).collect();
        let mut rays_k: Vec<Vector3<f64>> = rays_j.iter().map(|v| r * v).collect();
        assert!(rotation_align_trimmed(&rays_j, &rays_k, 1.0, 50).unwrap().angle_to(&r) < 1e-10);
        assert!(rotation_align_trimmed(&rays_j, &rays_j, 1.0, 50).unwrap().angle() < 1e-12);
        for v in rays_k.iter_mut().take(10) {
            *v = Vector3::from_column_slice(&UnitSphere.sample(&mut rng));
        }
        let est = rotation_align_trimmed(&rays_j, &rays_k, 0.75, 50).unwrap();
        assert!(est.angle_to(&r) < 1e-6);
        assert!(matches!(rotation_align_trimmed(&rays_j[..2], &rays_k[..2], 1.0, 5), Err(RelMotionError::InsufficientRays(2))));
    }
}
