//! Second-order cone feasibility and bisection over the level parameter.
//!
//! A quasi-convex min-max problem is reduced to a family of convex
//! feasibility problems indexed by a level `gamma`: each constraint is a
//! second-order cone `|A x + a0| <= b^T x + beta` or a half-space
//! `g^T x >= h`. [`check_feasibility`] decides a single member of the family
//! with a primal-dual interior-point method, and [`bisect_gamma`] halves an
//! interval `[lo, hi]` around the smallest feasible level.

mod affine;
pub(crate) mod bisect;
mod dump;
mod ipm;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use affine::{AffineVar, Reduced, VarMap};
pub use bisect::{bisect_gamma, bracket_gamma, initial_upper_bound, GammaSolveResult, LevelCone, LevelSetBuilder, ParametricProgram};
pub use dump::{read_program, write_program};
pub use ipm::{check_feasibility, Feasibility, FeasibilityConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("constraint references variable {index} but the program has {dim} variables")]
    DimensionMismatch { index: usize, dim: usize },
    #[error("malformed constraint: {0}")]
    Malformed(String),
    #[error("constraint touches more than one eliminable block")]
    InvalidStructure,
    #[error("interior-point solver failed: {0}")]
    NumericalFailure(String),
    #[error("upper level {0} is infeasible")]
    BadBracket(f64),
    #[error("probe point violates linear constraint {0}")]
    ProbeViolatesLinear(usize),
    #[error("probe point violates level-independent cone {0}")]
    ProbeViolatesHardCone(usize),
    #[error("no feasible level found up to {0}")]
    NoFeasibleLevel(f64),
    #[error("problem dump parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// `|a_mat x[vars] + a0| <= b^T x[vars] + beta`.
///
/// The matrix is stored densely over the constraint's support `vars` only.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeConstraint {
    pub vars: Vec<usize>,
    pub a_mat: DMatrix<f64>,
    pub a0: DVector<f64>,
    pub b: DVector<f64>,
    pub beta: f64,
}

impl ConeConstraint {
    pub fn new(vars: Vec<usize>, a_mat: DMatrix<f64>, a0: DVector<f64>, b: DVector<f64>, beta: f64) -> Result<Self, ConicError> {
        let c = Self { vars, a_mat, a0, b, beta };
        c.validate()?;
        Ok(c)
    }

    /// Constraint over all `a_mat.ncols()` variables.
    pub fn dense(a_mat: DMatrix<f64>, a0: DVector<f64>, b: DVector<f64>, beta: f64) -> Result<Self, ConicError> {
        Self::new((0..a_mat.ncols()).collect(), a_mat, a0, b, beta)
    }

    fn validate(&self) -> Result<(), ConicError> {
        let k = self.vars.len();
        let m = self.a_mat.nrows();
        if m == 0 {
            return Err(ConicError::Malformed("cone with zero rows".into()));
        }
        if self.a_mat.ncols() != k || self.b.len() != k || self.a0.len() != m {
            return Err(ConicError::Malformed(format!(
                "cone shapes: a {}x{}, a0 {}, b {}, support {}",
                m,
                self.a_mat.ncols(),
                self.a0.len(),
                self.b.len(),
                k
            )));
        }
        let finite = self.a_mat.iter().chain(self.a0.iter()).chain(self.b.iter()).all(|v| v.is_finite())
            && self.beta.is_finite();
        if !finite {
            return Err(ConicError::Malformed("non-finite cone entry".into()));
        }
        Ok(())
    }

    fn gather(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.vars.len(), self.vars.iter().map(|&i| x[i]))
    }

    /// `|A x + a0|`.
    pub fn lhs(&self, x: &DVector<f64>) -> f64 {
        let xs = self.gather(x);
        (&self.a_mat * xs + &self.a0).norm()
    }

    /// `b^T x + beta`.
    pub fn rhs(&self, x: &DVector<f64>) -> f64 {
        let xs = self.gather(x);
        self.b.dot(&xs) + self.beta
    }

    /// Positive when violated.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        self.lhs(x) - self.rhs(x)
    }
}

/// `g^T x[vars] >= h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub vars: Vec<usize>,
    pub g: DVector<f64>,
    pub h: f64,
}

impl LinearConstraint {
    pub fn new(vars: Vec<usize>, g: DVector<f64>, h: f64) -> Result<Self, ConicError> {
        if vars.len() != g.len() {
            return Err(ConicError::Malformed("linear constraint support mismatch".into()));
        }
        if !g.iter().all(|v| v.is_finite()) || !h.is_finite() {
            return Err(ConicError::Malformed("non-finite linear constraint".into()));
        }
        Ok(Self { vars, g, h })
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.vars.iter().zip(self.g.iter()).map(|(&i, g)| g * x[i]).sum::<f64>()
    }

    /// Positive when violated.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        self.h - self.value(x)
    }
}

/// One member of the feasibility family.
///
/// `blocks` optionally lists disjoint variable ranges that may be eliminated
/// first when forming the normal equations (e.g. the three coordinates of
/// each scene point). Every constraint may touch at most one such block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConeProgram {
    pub dim: usize,
    pub cones: Vec<ConeConstraint>,
    pub linears: Vec<LinearConstraint>,
    pub blocks: Vec<Range<usize>>,
}

impl ConeProgram {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let check = |vars: &[usize]| -> Result<(), ConicError> {
            for &index in vars {
                if index >= self.dim {
                    return Err(ConicError::DimensionMismatch { index, dim: self.dim });
                }
            }
            let mut sorted = vars.to_vec();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != vars.len() {
                return Err(ConicError::Malformed("repeated variable in support".into()));
            }
            Ok(())
        };
        for c in &self.cones {
            c.validate()?;
            check(&c.vars)?;
        }
        for l in &self.linears {
            check(&l.vars)?;
        }
        for b in &self.blocks {
            if b.end > self.dim || b.is_empty() {
                return Err(ConicError::Malformed("bad block range".into()));
            }
        }
        Ok(())
    }

    /// Largest violation over all constraints; non-positive means `x` is feasible.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        self.cones
            .iter()
            .map(|c| c.violation(x))
            .chain(self.linears.iter().map(|l| l.violation(x)))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}
