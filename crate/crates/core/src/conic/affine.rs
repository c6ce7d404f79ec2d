//! Affine elimination of gauge-fixed variables.
//!
//! Problems are written over a "full" variable vector (points, translations or
//! centres). Some full variables are fixed constants or affine functions of
//! the others; [`VarMap`] rewrites constraints over the remaining reduced
//! variables and expands reduced solutions back.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

/// `sum_i coef_i y[idx_i] + constant`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineVar {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineVar {
    pub fn free(index: usize) -> Self {
        Self { terms: vec![(index, 1.0)], constant: 0.0 }
    }

    pub fn fixed(value: f64) -> Self {
        Self { terms: Vec::new(), constant: value }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VarMap {
    pub vars: Vec<AffineVar>,
    pub n_reduced: usize,
}

/// A constraint row set rewritten over reduced variables.
#[derive(Debug, Clone, PartialEq)]
pub struct Reduced {
    pub vars: Vec<usize>,
    pub a: DMatrix<f64>,
    pub a0: DVector<f64>,
    pub b: DVector<f64>,
    pub beta: f64,
}

impl VarMap {
    pub fn full_dim(&self) -> usize {
        self.vars.len()
    }

    pub fn expand(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.vars.len(), self.vars.iter().map(|v| v.terms.iter().map(|&(i, c)| c * y[i]).sum::<f64>() + v.constant))
    }

    /// Reduced vector reproducing `full` on every free variable; `None` when
    /// `full` is inconsistent with the fixed or affine entries.
    pub fn reduce(&self, full: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
        let mut y = DVector::zeros(self.n_reduced);
        for (v, &x) in self.vars.iter().zip(full.iter()) {
            if let [(i, c)] = v.terms[..] {
                if c == 1.0 && v.constant == 0.0 {
                    y[i] = x;
                }
            }
        }
        let back = self.expand(&y);
        ((back - full).amax() <= tol * (1.0 + full.amax())).then_some(y)
    }

    /// Rewrites `|A v + a0|` and `b^T v + beta`, where `v` are the full
    /// variables listed in `full`, over reduced variables.
    pub fn rewrite(&self, full: &[usize], a: &DMatrix<f64>, a0: &DVector<f64>, b: &DVector<f64>, beta: f64) -> Reduced {
        let m = a.nrows();
        let mut cols: BTreeMap<usize, (DVector<f64>, f64)> = BTreeMap::new();
        let mut a0 = a0.clone();
        let mut beta = beta;
        for (c, &f) in full.iter().enumerate() {
            let v = &self.vars[f];
            let ac = a.column(c);
            for &(i, coef) in &v.terms {
                let e = cols.entry(i).or_insert_with(|| (DVector::zeros(m), 0.0));
                e.0 += ac * coef;
                e.1 += b[c] * coef;
            }
            if v.constant != 0.0 {
                a0 += ac * v.constant;
                beta += b[c] * v.constant;
            }
        }
        let vars: Vec<usize> = cols.keys().copied().collect();
        let mut ar = DMatrix::zeros(m, vars.len());
        let mut br = DVector::zeros(vars.len());
        for (k, (col, bc)) in cols.into_values().enumerate() {
            ar.set_column(k, &col);
            br[k] = bc;
        }
        Reduced { vars, a: ar, a0, b: br, beta }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rewrite_and_expand_agree() {
        // full = [y0, 2, 1 - 0.5 y0 + 3 y1, y1]
        let map = VarMap {
            vars: vec![AffineVar::free(0), AffineVar::fixed(2.0), AffineVar { terms: vec![(0, -0.5), (1, 3.0)], constant: 1.0 }, AffineVar::free(1)],
            n_reduced: 2,
        };
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 4.0]);
        let a0 = DVector::from_vec(vec![0.1, -0.2]);
        let b = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let r = map.rewrite(&[0, 1, 2], &a, &a0, &b, 0.3);
        let y = DVector::from_vec(vec![0.7, -1.1]);
        let full = map.expand(&y);
        let v = DVector::from_vec(vec![full[0], full[1], full[2]]);
        let ys = DVector::from_iterator(r.vars.len(), r.vars.iter().map(|&i| y[i]));
        assert!(((&a * &v + &a0) - (&r.a * &ys + &r.a0)).norm() < 1e-14);
        assert!((b.dot(&v) + 0.3 - (r.b.dot(&ys) + r.beta)).abs() < 1e-14);
        assert_eq!(map.reduce(&full, 1e-12).unwrap(), y);
    }
}
