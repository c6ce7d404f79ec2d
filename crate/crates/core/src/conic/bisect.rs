//! Bisection over the level parameter of a quasi-convex feasibility family.

use nalgebra::DVector;

use super::ipm::{check_feasibility, Feasibility, FeasibilityConfig};
use super::{ConeConstraint, ConeProgram, ConicError, LinearConstraint};

/// Produces the feasibility problem for a given level.
///
/// Implementations must be monotone: if the program at `g1` is feasible then
/// so is the program at every `g2 > g1`.
pub trait LevelSetBuilder {
    fn build(&self, gamma: f64) -> ConeProgram;

    /// Smallest level at which `x` satisfies every constraint, when the
    /// family can evaluate it.
    fn achieved_level(&self, x: &DVector<f64>) -> Option<f64> {
        let _ = x;
        None
    }
}

impl<F> LevelSetBuilder for F
where
    F: Fn(f64) -> ConeProgram,
{
    fn build(&self, gamma: f64) -> ConeProgram {
        self(gamma)
    }
}

/// A cone whose right-hand side grows affinely with the level:
/// `|A x + a0| <= (b + gamma b_gamma)^T x + beta + gamma beta_gamma`.
///
/// Cones without a level term are hard constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelCone {
    pub cone: ConeConstraint,
    pub level: Option<(DVector<f64>, f64)>,
}

/// Feasibility family whose cones are affine in the level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParametricProgram {
    pub dim: usize,
    pub cones: Vec<LevelCone>,
    pub linears: Vec<LinearConstraint>,
    pub blocks: Vec<std::ops::Range<usize>>,
}

impl ParametricProgram {
    /// Level at which cone `i` becomes tight at `x`; `None` when no level
    /// satisfies it.
    pub fn cone_level(&self, i: usize, x: &DVector<f64>) -> Option<f64> {
        let lc = &self.cones[i];
        let excess = lc.cone.violation(x);
        match &lc.level {
            None => (excess <= 0.0).then_some(0.0),
            Some((bg, betag)) => {
                let xs = DVector::from_iterator(lc.cone.vars.len(), lc.cone.vars.iter().map(|&j| x[j]));
                let slope = bg.dot(&xs) + betag;
                if slope > 0.0 {
                    Some((excess / slope).max(0.0))
                } else if excess <= 0.0 {
                    Some(0.0)
                } else {
                    None
                }
            }
        }
    }
}

impl LevelSetBuilder for ParametricProgram {
    fn build(&self, gamma: f64) -> ConeProgram {
        let cones = self
            .cones
            .iter()
            .map(|lc| match &lc.level {
                None => lc.cone.clone(),
                Some((bg, betag)) => ConeConstraint {
                    b: &lc.cone.b + bg * gamma,
                    beta: lc.cone.beta + betag * gamma,
                    ..lc.cone.clone()
                },
            })
            .collect();
        ConeProgram { dim: self.dim, cones, linears: self.linears.clone(), blocks: self.blocks.clone() }
    }

    fn achieved_level(&self, x: &DVector<f64>) -> Option<f64> {
        if self.linears.iter().any(|l| l.violation(x) > 0.0) {
            return None;
        }
        (0..self.cones.len()).try_fold(0.0f64, |acc, i| self.cone_level(i, x).map(|g| acc.max(g)))
    }
}

/// Certified output of [`bisect_gamma`].
#[derive(Debug, Clone, PartialEq)]
pub struct GammaSolveResult {
    pub gamma_star: f64,
    /// Feasible point of the program at `feasible_at`.
    pub x_star: DVector<f64>,
    pub feasible_at: f64,
    pub infeasible_at: f64,
    pub bisection_iters: usize,
}

/// Number of halvings needed to shrink `[lo, hi]` to width `tol`.
pub(crate) fn steps(lo: f64, hi: f64, tol: f64) -> usize {
    let ratio = (hi - lo) / tol;
    if ratio <= 1.0 {
        0
    } else {
        ratio.log2().ceil() as usize
    }
}

/// Shrinks `[gamma_lo, gamma_hi]` until its width is at most `tol`.
///
/// `gamma_hi` must be feasible. `gamma_lo` is taken as infeasible without a
/// test; pass `0` when nothing better is known. After each feasible test the
/// upper end drops to the level actually attained by the feasible point.
pub fn bisect_gamma<B: LevelSetBuilder + ?Sized>(
    builder: &B,
    gamma_lo: f64,
    gamma_hi: f64,
    tol: f64,
    cfg: &FeasibilityConfig,
) -> Result<GammaSolveResult, ConicError> {
    if !(gamma_hi >= gamma_lo) || !(tol > 0.0) {
        return Err(ConicError::Malformed(format!("bad bracket [{gamma_lo}, {gamma_hi}] with tol {tol}")));
    }
    let mut x_star = match check_feasibility(&builder.build(gamma_hi), cfg)? {
        Feasibility::Feasible { x, .. } => x,
        Feasibility::Infeasible { .. } => return Err(ConicError::BadBracket(gamma_hi)),
    };
    let mut lo = gamma_lo;
    // the margin keeps x strictly inside the program at the reported level
    let tighten = |x: &DVector<f64>, level: f64, lo: f64| builder.achieved_level(x).map_or(level, |a| (a + 1e-3 * tol).max(lo).min(level));
    let mut hi = tighten(&x_star, gamma_hi, lo);
    let max_steps = steps(lo, hi, tol);
    let mut iters = 0;
    let mut warm = cfg.clone();
    while hi - lo > tol && iters < max_steps {
        iters += 1;
        let mid = 0.5 * (lo + hi);
        warm.start = Some(x_star.clone());
        match check_feasibility(&builder.build(mid), &warm)? {
            Feasibility::Feasible { x, .. } => {
                hi = tighten(&x, mid, lo);
                x_star = x;
            }
            Feasibility::Infeasible { .. } => lo = mid,
        }
    }
    Ok(GammaSolveResult { gamma_star: 0.5 * (lo + hi), x_star, feasible_at: hi, infeasible_at: lo, bisection_iters: iters })
}

/// Finds `(lo, hi)` with `hi` feasible by geometric growth from `start`;
/// `lo` is the last infeasible level tried, or `0`.
pub fn bracket_gamma<B: LevelSetBuilder + ?Sized>(
    builder: &B,
    start: f64,
    factor: f64,
    max_level: f64,
    cfg: &FeasibilityConfig,
) -> Result<(f64, f64), ConicError> {
    let mut lo = 0.0;
    let mut g = start;
    while g <= max_level {
        if check_feasibility(&builder.build(g), cfg)?.is_feasible() {
            return Ok((lo, g));
        }
        lo = g;
        g *= factor;
    }
    Err(ConicError::NoFeasibleLevel(max_level))
}

/// Upper level from a probe point: the largest level at which some cone is
/// tight at `probe`, times 1.1.
pub fn initial_upper_bound(program: &ParametricProgram, probe: &DVector<f64>) -> Result<f64, ConicError> {
    for (i, l) in program.linears.iter().enumerate() {
        if l.violation(probe) >= 0.0 {
            return Err(ConicError::ProbeViolatesLinear(i));
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..program.cones.len() {
        match program.cone_level(i, probe) {
            Some(g) => worst = worst.max(g),
            None => return Err(ConicError::ProbeViolatesHardCone(i)),
        }
    }
    Ok(1.1 * worst)
}
