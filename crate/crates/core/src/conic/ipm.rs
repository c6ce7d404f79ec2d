//! Primal-dual interior-point method for the slack program
//!
//! ```text
//! minimize s  subject to  |A_i x + a0_i| <= b_i^T x + beta_i + s
//!                          g_l^T x + s >= h_l
//! ```
//!
//! The program is cast in the standard conic form `min c^T y` subject to
//! `G y + u = h`, `u` in a product of non-negative rays and Lorentz cones,
//! and solved with Nesterov-Todd scaling and a Mehrotra predictor-corrector.
//! Box bounds on every variable keep the problem compact, which makes the
//! dual objective a rigorous lower bound on the optimal slack.

use nalgebra::{DMatrix, DVector};

use super::{ConeProgram, ConicError};

/// Inner solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityConfig {
    /// Optimal slack at or above `tol` is reported as infeasible.
    pub tol: f64,
    /// Relative duality gap at which the interior-point iteration stops.
    pub gap_tol: f64,
    pub max_iter: usize,
    /// Every variable is confined to `[-box_bound, box_bound]`.
    pub box_bound: f64,
    /// Lower bound on the slack variable.
    pub slack_floor: f64,
    /// Starting point for the interior-point iteration.
    pub start: Option<DVector<f64>>,
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        Self { tol: 1e-9, gap_tol: 1e-9, max_iter: 200, box_bound: 1e4, slack_floor: 1.0, start: None }
    }
}

/// Outcome of a single feasibility test.
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    /// `x` satisfies every constraint; re-checked by direct evaluation.
    Feasible { x: DVector<f64>, iterations: usize },
    /// No point satisfies every constraint. `certified` is set when the dual
    /// bound proves the optimal slack is at least `lower_bound > 0`; when it
    /// is unset the optimal slack was resolved to within the tolerance of
    /// zero without finding a strictly feasible point.
    Infeasible { lower_bound: f64, certified: bool, iterations: usize },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }

    pub fn point(&self) -> Option<&DVector<f64>> {
        match self {
            Feasibility::Feasible { x, .. } => Some(x),
            Feasibility::Infeasible { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Nonneg,
    Soc,
}

/// Conic blocks `h_k - G_k y[supp_k]` in `K_k`, stored flat. `G_k` is row
/// major, `dim_k x |supp_k|`.
#[derive(Default)]
struct Blocks {
    kind: Vec<Kind>,
    off: Vec<usize>,
    soff: Vec<usize>,
    goff: Vec<usize>,
    supp: Vec<usize>,
    g: Vec<f64>,
    h: Vec<f64>,
    local: Vec<Option<usize>>,
}

impl Blocks {
    fn new() -> Self {
        Self { off: vec![0], soff: vec![0], goff: vec![0], ..Default::default() }
    }

    fn push(&mut self, kind: Kind, supp: &[usize], g: &[f64], h: &[f64]) {
        debug_assert_eq!(g.len(), supp.len() * h.len());
        self.kind.push(kind);
        self.supp.extend_from_slice(supp);
        self.g.extend_from_slice(g);
        self.h.extend_from_slice(h);
        self.off.push(self.h.len());
        self.soff.push(self.supp.len());
        self.goff.push(self.g.len());
        self.local.push(None);
    }

    fn len(&self) -> usize {
        self.kind.len()
    }

    fn m(&self) -> usize {
        self.h.len()
    }

    fn cone(&self, k: usize) -> std::ops::Range<usize> {
        self.off[k]..self.off[k + 1]
    }

    fn supp(&self, k: usize) -> &[usize] {
        &self.supp[self.soff[k]..self.soff[k + 1]]
    }

    fn g(&self, k: usize) -> &[f64] {
        &self.g[self.goff[k]..self.goff[k + 1]]
    }

    /// `out = h - G y` over all blocks.
    fn residual(&self, y: &[f64], out: &mut [f64]) {
        for k in 0..self.len() {
            let supp = self.supp(k);
            let g = self.g(k);
            let ns = supp.len();
            for (r, o) in self.cone(k).enumerate() {
                let row = &g[r * ns..(r + 1) * ns];
                out[o] = self.h[o] - row.iter().zip(supp).map(|(a, &i)| a * y[i]).sum::<f64>();
            }
        }
    }

    /// `out[supp] += G_k^T v`.
    fn gt_add(&self, k: usize, v: &[f64], out: &mut [f64]) {
        let supp = self.supp(k);
        let g = self.g(k);
        let ns = supp.len();
        for (r, vr) in v.iter().enumerate() {
            if *vr != 0.0 {
                for (c, &i) in supp.iter().enumerate() {
                    out[i] += g[r * ns + c] * vr;
                }
            }
        }
    }

    /// `out = G_k y[supp]`.
    fn g_mul(&self, k: usize, y: &[f64], out: &mut [f64]) {
        let supp = self.supp(k);
        let g = self.g(k);
        let ns = supp.len();
        for (r, o) in out.iter_mut().enumerate() {
            *o = g[r * ns..(r + 1) * ns].iter().zip(supp).map(|(a, &i)| a * y[i]).sum();
        }
    }
}

fn soc_det(u: &[f64]) -> f64 {
    let tail = u[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
    (u[0] - tail) * (u[0] + tail)
}

/// Jordan product `out = a o b`.
fn jprod(kind: Kind, a: &[f64], b: &[f64], out: &mut [f64]) {
    match kind {
        Kind::Nonneg => out[0] = a[0] * b[0],
        Kind::Soc => {
            out[0] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            for i in 1..a.len() {
                out[i] = a[0] * b[i] + b[0] * a[i];
            }
        }
    }
}

/// Solves `lambda o q = d` for `q`.
fn jdiv(kind: Kind, lambda: &[f64], d: &[f64], q: &mut [f64]) {
    match kind {
        Kind::Nonneg => q[0] = d[0] / lambda[0],
        Kind::Soc => {
            let det = soc_det(lambda);
            let tail_dot: f64 = lambda[1..].iter().zip(&d[1..]).map(|(a, b)| a * b).sum();
            let q0 = (lambda[0] * d[0] - tail_dot) / det;
            q[0] = q0;
            for i in 1..lambda.len() {
                q[i] = (d[i] - q0 * lambda[i]) / lambda[0];
            }
        }
    }
}

/// Largest step `a` with `u + a du` in the cone (infinite when unbounded).
fn max_step(kind: Kind, u: &[f64], du: &[f64]) -> f64 {
    match kind {
        Kind::Nonneg => {
            if du[0] < 0.0 {
                -u[0] / du[0]
            } else {
                f64::INFINITY
            }
        }
        Kind::Soc => {
            // map u to the identity with a Lorentz transformation, then the
            // boundary is reached when 1 + a rho_0 = a |rho_1|
            let det = soc_det(u);
            if !(det > 0.0) || u[0] <= 0.0 {
                return 0.0;
            }
            let nrm = det.sqrt();
            let u0 = u[0] / nrm;
            let tail_dot: f64 = u[1..].iter().zip(&du[1..]).map(|(a, b)| a * b).sum::<f64>() / nrm;
            let rho0 = (u0 * du[0] - tail_dot) / nrm;
            let coef = (rho0 + du[0] / nrm) / (u0 + 1.0);
            let tail2: f64 = u[1..].iter().zip(&du[1..]).map(|(a, b)| (b / nrm - coef * a / nrm).powi(2)).sum();
            let denom = tail2.sqrt() - rho0;
            if denom > 0.0 {
                1.0 / denom
            } else {
                f64::INFINITY
            }
        }
    }
}

fn jinv(kind: Kind, u: &[f64], out: &mut [f64]) {
    match kind {
        Kind::Nonneg => out[0] = 1.0 / u[0],
        Kind::Soc => {
            let det = soc_det(u);
            out[0] = u[0] / det;
            for i in 1..u.len() {
                out[i] = -u[i] / det;
            }
        }
    }
}

/// Nesterov-Todd scalings `W_k = eta_k Wbar_k` with `W z = W^-1 u`.
/// `Wbar` is the Lorentz boost defined by the unit vector `wbar`; a
/// non-negative block has `W = eta`.
struct Scaling {
    wbar: Vec<f64>,
    eta: Vec<f64>,
}

impl Scaling {
    fn compute(blocks: &Blocks, u: &[f64], z: &[f64]) -> Option<Self> {
        let mut wbar = vec![0.0; blocks.m()];
        let mut eta = Vec::with_capacity(blocks.len());
        for k in 0..blocks.len() {
            let r = blocks.cone(k);
            let (uk, zk) = (&u[r.clone()], &z[r.clone()]);
            match blocks.kind[k] {
                Kind::Nonneg => {
                    let e = (uk[0] / zk[0]).sqrt();
                    if !e.is_finite() || e <= 0.0 {
                        return None;
                    }
                    wbar[r.start] = 1.0;
                    eta.push(e);
                }
                Kind::Soc => {
                    let un = soc_det(uk).sqrt();
                    let zn = soc_det(zk).sqrt();
                    if !(un > 0.0 && zn > 0.0) || !un.is_finite() || !zn.is_finite() {
                        return None;
                    }
                    let dot: f64 = uk.iter().zip(zk).map(|(a, b)| a * b).sum::<f64>() / (un * zn);
                    let gamma = ((1.0 + dot) * 0.5).sqrt();
                    let w = &mut wbar[r];
                    w[0] = (uk[0] / un + zk[0] / zn) / (2.0 * gamma);
                    for i in 1..w.len() {
                        w[i] = (uk[i] / un - zk[i] / zn) / (2.0 * gamma);
                    }
                    eta.push((un / zn).sqrt());
                }
            }
        }
        Some(Self { wbar, eta })
    }

    /// `out = W_k v`, or `W_k^-1 v` when `inverse`.
    fn apply(&self, blocks: &Blocks, k: usize, v: &[f64], out: &mut [f64], inverse: bool) {
        let e = if inverse { 1.0 / self.eta[k] } else { self.eta[k] };
        match blocks.kind[k] {
            Kind::Nonneg => out[0] = v[0] * e,
            Kind::Soc => {
                let w = &self.wbar[blocks.cone(k)];
                let w0 = w[0];
                let dot: f64 = w[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
                let sgn = if inverse { -1.0 } else { 1.0 };
                out[0] = e * (w0 * v[0] + sgn * dot);
                let c = dot / (1.0 + w0) + sgn * v[0];
                for i in 1..w.len() {
                    out[i] = e * (v[i] + c * w[i]);
                }
            }
        }
    }
}

enum Slot {
    Local(usize),
    Global(usize, Option<usize>),
}

/// Symbolic structure of the normal equations: point-like blocks are
/// eliminated first, the remaining variables form a dense reduced system.
struct Structure {
    /// Reduced-system index of each non-eliminated variable of `y`.
    global_of: Vec<Option<usize>>,
    n_global: usize,
    local_ranges: Vec<(usize, usize)>,
    /// Global indices touched by each local block.
    touched: Vec<Vec<usize>>,
    /// One slot per support entry, aligned with `Blocks::supp`.
    slots: Vec<Slot>,
}

impl Structure {
    fn new(ny: usize, ranges: &[std::ops::Range<usize>], blocks: &mut Blocks) -> Result<Self, ConicError> {
        let mut local_of = vec![None; ny];
        let mut local_ranges = Vec::new();
        for (p, r) in ranges.iter().enumerate() {
            for (off, i) in r.clone().enumerate() {
                if local_of[i].is_some() {
                    return Err(ConicError::Malformed("overlapping blocks".into()));
                }
                local_of[i] = Some((p, off));
            }
            local_ranges.push((r.start, r.len()));
        }
        let mut global_of = vec![None; ny];
        let mut n_global = 0;
        for i in 0..ny {
            if local_of[i].is_none() {
                global_of[i] = Some(n_global);
                n_global += 1;
            }
        }
        let mut touched: Vec<Vec<usize>> = vec![Vec::new(); ranges.len()];
        for k in 0..blocks.len() {
            let mut local = None;
            for &i in blocks.supp(k) {
                if let Some((p, _)) = local_of[i] {
                    match local {
                        None => local = Some(p),
                        Some(q) if q != p => return Err(ConicError::InvalidStructure),
                        _ => {}
                    }
                }
            }
            blocks.local[k] = local;
            if let Some(p) = local {
                touched[p].extend(blocks.supp(k).iter().filter_map(|&i| global_of[i]));
            }
        }
        for t in &mut touched {
            t.sort_unstable();
            t.dedup();
        }
        let mut slots = Vec::with_capacity(blocks.supp.len());
        for k in 0..blocks.len() {
            for &i in blocks.supp(k) {
                slots.push(match local_of[i] {
                    Some((_, off)) => Slot::Local(off),
                    None => {
                        let g = global_of[i].unwrap();
                        let pos = blocks.local[k].map(|p| touched[p].binary_search(&g).unwrap());
                        Slot::Global(g, pos)
                    }
                });
            }
        }
        Ok(Self { global_of, n_global, local_ranges, touched, slots })
    }
}

/// Factored normal matrix `G^T W^-2 G` for the current scaling.
struct NormalSystem<'a> {
    st: &'a Structure,
    /// `W^-1 G` per block, laid out like `Blocks::g`.
    m: Vec<f64>,
    local_chol: Vec<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    /// `L_p^-1 C_p`.
    local_coupling: Vec<DMatrix<f64>>,
    reduced: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    blocks: &'a Blocks,
    ny: usize,
}

impl<'a> NormalSystem<'a> {
    fn assemble(st: &'a Structure, blocks: &'a Blocks, sc: &Scaling, ny: usize, max_dim: usize) -> Result<Self, ConicError> {
        let np = st.local_ranges.len();
        let mut local: Vec<DMatrix<f64>> = st.local_ranges.iter().map(|&(_, n)| DMatrix::zeros(n, n)).collect();
        let mut coupling: Vec<DMatrix<f64>> = (0..np).map(|p| DMatrix::zeros(st.local_ranges[p].1, st.touched[p].len())).collect();
        let mut reduced = DMatrix::zeros(st.n_global, st.n_global);
        let mut m = vec![0.0; blocks.g.len()];
        let mut col = vec![0.0; max_dim];
        let mut wcol = vec![0.0; max_dim];
        for k in 0..blocks.len() {
            let d = blocks.cone(k).len();
            let ns = blocks.supp(k).len();
            let g = blocks.g(k);
            let mk = &mut m[blocks.goff[k]..blocks.goff[k + 1]];
            for c in 0..ns {
                for r in 0..d {
                    col[r] = g[r * ns + c];
                }
                sc.apply(blocks, k, &col[..d], &mut wcol[..d], true);
                for r in 0..d {
                    mk[r * ns + c] = wcol[r];
                }
            }
            let slots = &st.slots[blocks.soff[k]..blocks.soff[k + 1]];
            for (a, sa) in slots.iter().enumerate() {
                for (b, sb) in slots.iter().enumerate() {
                    let v: f64 = (0..d).map(|r| mk[r * ns + a] * mk[r * ns + b]).sum();
                    match (sa, sb) {
                        (Slot::Local(oa), Slot::Local(ob)) => local[blocks.local[k].unwrap()][(*oa, *ob)] += v,
                        (Slot::Local(oa), Slot::Global(_, Some(pb))) => coupling[blocks.local[k].unwrap()][(*oa, *pb)] += v,
                        (Slot::Global(ga, _), Slot::Global(gb, _)) => reduced[(*ga, *gb)] += v,
                        _ => {}
                    }
                }
            }
        }
        let mut local_chol = Vec::with_capacity(np);
        let mut local_coupling = Vec::with_capacity(np);
        for p in 0..np {
            let lp = regularize(std::mem::replace(&mut local[p], DMatrix::zeros(0, 0)));
            let chol = lp.cholesky().ok_or_else(|| ConicError::NumericalFailure("local block not positive definite".into()))?;
            let y = chol.solve(&coupling[p]);
            let t = &st.touched[p];
            let nl = y.nrows();
            let (cs, ys) = (coupling[p].as_slice(), y.as_slice());
            let ng = st.n_global;
            let rs = reduced.as_mut_slice();
            for (a, &ga) in t.iter().enumerate() {
                let ca = &cs[a * nl..(a + 1) * nl];
                for (b, &gb) in t.iter().enumerate().skip(a) {
                    let v: f64 = ca.iter().zip(&ys[b * nl..(b + 1) * nl]).map(|(p, q)| p * q).sum();
                    rs[gb * ng + ga] -= v;
                    if a != b {
                        rs[ga * ng + gb] -= v;
                    }
                }
            }
            local_chol.push(chol);
            local_coupling.push(y);
        }
        let reduced = if st.n_global > 0 {
            Some(regularize(reduced).cholesky().ok_or_else(|| ConicError::NumericalFailure("reduced system not positive definite".into()))?)
        } else {
            None
        };
        Ok(Self { st, m, local_chol, local_coupling, reduced, blocks, ny })
    }

    fn solve_once(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let st = self.st;
        let mut rg = DVector::zeros(st.n_global);
        for i in 0..self.ny {
            if let Some(g) = st.global_of[i] {
                rg[g] = rhs[i];
            }
        }
        let mut ylocal = Vec::with_capacity(st.local_ranges.len());
        for (p, &(start, n)) in st.local_ranges.iter().enumerate() {
            let yp = self.local_chol[p].solve(&rhs.rows(start, n).into_owned());
            let c = &self.local_coupling[p];
            // C_p^T L^-1 r_p using symmetry: (L^-1 C_p)^T r_p
            let corr = c.transpose() * rhs.rows(start, n);
            for (a, &g) in st.touched[p].iter().enumerate() {
                rg[g] -= corr[a];
            }
            ylocal.push(yp);
        }
        let xg = match &self.reduced {
            Some(ch) => ch.solve(&rg),
            None => rg,
        };
        let mut out = DVector::zeros(self.ny);
        for i in 0..self.ny {
            if let Some(g) = st.global_of[i] {
                out[i] = xg[g];
            }
        }
        for (p, &(start, n)) in st.local_ranges.iter().enumerate() {
            let t = &st.touched[p];
            let xt = DVector::from_iterator(t.len(), t.iter().map(|&g| xg[g]));
            let xp = &ylocal[p] - &self.local_coupling[p] * xt;
            out.rows_mut(start, n).copy_from(&xp);
        }
        out
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ny);
        let b = self.blocks;
        for k in 0..b.len() {
            let supp = b.supp(k);
            let ns = supp.len();
            let mk = &self.m[b.goff[k]..b.goff[k + 1]];
            for r in 0..b.cone(k).len() {
                let row = &mk[r * ns..(r + 1) * ns];
                let mv: f64 = row.iter().zip(supp).map(|(a, &i)| a * v[i]).sum();
                for (a, &i) in row.iter().zip(supp) {
                    out[i] += a * mv;
                }
            }
        }
        out
    }

    /// Solve with two rounds of iterative refinement against the
    /// unregularized operator.
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut x = self.solve_once(rhs);
        for _ in 0..2 {
            let r = rhs - self.apply(&x);
            x += self.solve_once(&r);
        }
        x
    }
}

fn regularize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    for i in 0..n {
        m[(i, i)] += 1e-13 * scale;
    }
    m
}

struct Direction {
    dy: DVector<f64>,
    du: Vec<f64>,
    dz: Vec<f64>,
}

/// Tests whether the constraints of `program` admit a common point by
/// minimizing a uniform slack added to every constraint.
pub fn check_feasibility(program: &ConeProgram, cfg: &FeasibilityConfig) -> Result<Feasibility, ConicError> {
    program.validate()?;
    let n = program.dim;
    let ny = n + 1;
    let slack = n;
    let bound = cfg.box_bound;

    let mut x0 = cfg.start.clone().unwrap_or_else(|| DVector::zeros(n));
    if x0.len() != n {
        return Err(ConicError::Malformed("start point has wrong dimension".into()));
    }
    for v in x0.iter_mut() {
        *v = v.clamp(-0.5 * bound, 0.5 * bound);
    }
    let s0 = program.max_violation(&x0).max(0.0) + 1.0;
    let s_hi = 2.0 * s0 + 1.0;

    let mut blocks = Blocks::new();
    let mut supp = Vec::new();
    let mut g = Vec::new();
    let mut h = Vec::new();
    for c in &program.cones {
        let k = c.vars.len();
        let m = c.a_mat.nrows();
        supp.clear();
        supp.extend_from_slice(&c.vars);
        supp.push(slack);
        g.clear();
        g.extend(c.b.iter().map(|v| -v));
        g.push(-1.0);
        for i in 0..m {
            g.extend((0..k).map(|j| -c.a_mat[(i, j)]));
            g.push(0.0);
        }
        h.clear();
        h.push(c.beta);
        h.extend(c.a0.iter());
        blocks.push(Kind::Soc, &supp, &g, &h);
    }
    for l in &program.linears {
        supp.clear();
        supp.extend_from_slice(&l.vars);
        supp.push(slack);
        g.clear();
        g.extend(l.g.iter().map(|v| -v));
        g.push(-1.0);
        blocks.push(Kind::Nonneg, &supp, &g, &[-l.h]);
    }
    for i in 0..n {
        blocks.push(Kind::Nonneg, &[i], &[1.0], &[bound]);
        blocks.push(Kind::Nonneg, &[i], &[-1.0], &[bound]);
    }
    blocks.push(Kind::Nonneg, &[slack], &[-1.0], &[cfg.slack_floor]);
    blocks.push(Kind::Nonneg, &[slack], &[1.0], &[s_hi]);
    let mut var_bound = vec![bound; ny];
    var_bound[slack] = cfg.slack_floor.max(s_hi);

    let st = Structure::new(ny, &program.blocks, &mut blocks)?;
    let nb = blocks.len();
    let m = blocks.m();
    let nu = nb as f64;
    let max_dim = (0..nb).map(|k| blocks.cone(k).len()).max().unwrap_or(1);

    let mut y = DVector::zeros(ny);
    y.rows_mut(0, n).copy_from(&x0);
    y[slack] = s0;
    let mut u = vec![0.0; m];
    blocks.residual(y.as_slice(), &mut u);
    let mut z = vec![0.0; m];
    for k in 0..nb {
        let r = blocks.cone(k);
        let uk = &u[r.clone()];
        let interior = match blocks.kind[k] {
            Kind::Nonneg => uk[0] > 0.0,
            Kind::Soc => uk[0] > 0.0 && soc_det(uk) > 0.0,
        };
        if !interior {
            return Err(ConicError::NumericalFailure("starting point is not interior".into()));
        }
        jinv(blocks.kind[k], uk, &mut z[r]);
    }

    let h_norm = blocks.h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut res = vec![0.0; m];
    let mut stalls = 0;
    for iter in 0..cfg.max_iter {
        let x = y.rows(0, n).into_owned();
        if program.max_violation(&x) < 0.0 {
            return Ok(Feasibility::Feasible { x, iterations: iter });
        }

        // residuals; neg_rz = (h - G y) - u
        let mut rx = DVector::zeros(ny);
        rx[slack] = 1.0;
        for k in 0..nb {
            blocks.gt_add(k, &z[blocks.cone(k)], rx.as_mut_slice());
        }
        let hz: f64 = blocks.h.iter().zip(&z).map(|(a, b)| a * b).sum();
        let gap: f64 = u.iter().zip(&z).map(|(a, b)| a * b).sum();
        blocks.residual(y.as_slice(), &mut res);
        let neg_rz: Vec<f64> = res.iter().zip(&u).map(|(r, uk)| r - uk).collect();
        let rz_norm = neg_rz.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pcost = y[slack];
        let dcost = -hz;
        let lower = dcost - rx.iter().zip(&var_bound).map(|(r, b)| r.abs() * b).sum::<f64>();
        if lower > cfg.tol {
            return Ok(Feasibility::Infeasible { lower_bound: lower, certified: true, iterations: iter });
        }
        let rx_norm = rx.norm();
        let small_res = rx_norm <= 1e-7 * (1.0 + nu.sqrt()) && rz_norm <= 1e-7 * (1.0 + h_norm);
        if small_res && gap <= cfg.gap_tol * (1.0 + pcost.abs()) {
            // converged without a strictly feasible x: either infeasible or on the boundary
            return Ok(Feasibility::Infeasible { lower_bound: lower, certified: lower > cfg.tol, iterations: iter });
        }

        let Some(sc) = Scaling::compute(&blocks, &u, &z) else {
            // iterates reached the cone boundary; only acceptable once converged
            if gap <= 1e-6 * (1.0 + pcost.abs()) && rx_norm <= 1e-5 * (1.0 + nu.sqrt()) {
                return Ok(Feasibility::Infeasible { lower_bound: lower, certified: lower > cfg.tol, iterations: iter });
            }
            return Err(ConicError::NumericalFailure(format!("scaling broke down at iteration {iter}")));
        };
        let mut lambda = vec![0.0; m];
        for k in 0..nb {
            let r = blocks.cone(k);
            sc.apply(&blocks, k, &z[r.clone()], &mut lambda[r], false);
        }
        let sys = NormalSystem::assemble(&st, &blocks, &sc, ny, max_dim)?;
        let neg_rx = -&rx;

        let solve = |ds: &[f64]| -> Direction {
            // q = lambda \ ds ; rhs = b_x + G^T W^-1 (W^-1 b_z - q)
            let mut q = vec![0.0; m];
            let mut rhs = neg_rx.clone();
            let mut t1 = vec![0.0; max_dim];
            let mut t2 = vec![0.0; max_dim];
            for k in 0..nb {
                let r = blocks.cone(k);
                let d = r.len();
                jdiv(blocks.kind[k], &lambda[r.clone()], &ds[r.clone()], &mut q[r.clone()]);
                sc.apply(&blocks, k, &neg_rz[r.clone()], &mut t1[..d], true);
                for i in 0..d {
                    t1[i] -= q[r.start + i];
                }
                sc.apply(&blocks, k, &t1[..d], &mut t2[..d], true);
                blocks.gt_add(k, &t2[..d], rhs.as_mut_slice());
            }
            let dy = sys.solve(&rhs);
            let mut du = vec![0.0; m];
            let mut dz = vec![0.0; m];
            for k in 0..nb {
                let r = blocks.cone(k);
                let d = r.len();
                // dz = W^-1 (W^-1 (G dy - b_z) + q)
                blocks.g_mul(k, dy.as_slice(), &mut t1[..d]);
                for i in 0..d {
                    t1[i] -= neg_rz[r.start + i];
                }
                sc.apply(&blocks, k, &t1[..d], &mut t2[..d], true);
                for i in 0..d {
                    t2[i] += q[r.start + i];
                }
                sc.apply(&blocks, k, &t2[..d], &mut dz[r.clone()], true);
                // du = W (q - W dz)
                sc.apply(&blocks, k, &dz[r.clone()], &mut t1[..d], false);
                for i in 0..d {
                    t1[i] = q[r.start + i] - t1[i];
                }
                sc.apply(&blocks, k, &t1[..d], &mut du[r], false);
            }
            Direction { dy, du, dz }
        };

        let step_to_boundary = |d: &Direction| -> f64 {
            let mut a = f64::INFINITY;
            for k in 0..nb {
                let r = blocks.cone(k);
                a = a.min(max_step(blocks.kind[k], &u[r.clone()], &d.du[r.clone()]));
                a = a.min(max_step(blocks.kind[k], &z[r.clone()], &d.dz[r]));
            }
            a
        };

        let mut ds_aff = vec![0.0; m];
        for k in 0..nb {
            let r = blocks.cone(k);
            let l = &lambda[r.clone()];
            jprod(blocks.kind[k], l, l, &mut ds_aff[r.clone()]);
            ds_aff[r].iter_mut().for_each(|v| *v = -*v);
        }
        let aff = solve(&ds_aff);
        let alpha_aff = step_to_boundary(&aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3);
        let mu = gap / nu;
        let mut ds = ds_aff.clone();
        let (mut a, mut c, mut p) = (vec![0.0; max_dim], vec![0.0; max_dim], vec![0.0; max_dim]);
        for k in 0..nb {
            let r = blocks.cone(k);
            let d = r.len();
            sc.apply(&blocks, k, &aff.du[r.clone()], &mut a[..d], true);
            sc.apply(&blocks, k, &aff.dz[r.clone()], &mut c[..d], false);
            jprod(blocks.kind[k], &a[..d], &c[..d], &mut p[..d]);
            for i in 0..d {
                ds[r.start + i] -= p[i];
            }
            ds[r.start] += sigma * mu;
        }
        let dir = solve(&ds);
        let alpha = (0.99 * step_to_boundary(&dir)).min(1.0);
        if !alpha.is_finite() || !dir.dy.iter().all(|v| v.is_finite()) {
            return Err(ConicError::NumericalFailure(format!("non-finite step at iteration {iter}")));
        }
        if alpha < 1e-10 {
            stalls += 1;
            if stalls > 3 {
                return Err(ConicError::NumericalFailure(format!("step length collapsed at iteration {iter}")));
            }
        }
        y += &dir.dy * alpha;
        for i in 0..m {
            u[i] += dir.du[i] * alpha;
            z[i] += dir.dz[i] * alpha;
        }
    }
    Err(ConicError::NumericalFailure(format!("no decision after {} iterations", cfg.max_iter)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_soc(d: usize) -> Blocks {
        let mut b = Blocks::new();
        let supp: Vec<usize> = (0..d).collect();
        b.push(Kind::Soc, &supp, &vec![0.0; d * d], &vec![0.0; d]);
        b
    }

    #[test]
    fn nt_scaling_maps_z_and_u_to_same_point() {
        let b = one_soc(3);
        let u = [2.0, 0.3, -0.5];
        let z = [1.5, -0.2, 0.9];
        let s = Scaling::compute(&b, &u, &z).unwrap();
        let (mut l1, mut l2) = ([0.0; 3], [0.0; 3]);
        s.apply(&b, 0, &z, &mut l1, false);
        s.apply(&b, 0, &u, &mut l2, true);
        assert!(l1.iter().zip(&l2).all(|(a, b)| (a - b).abs() < 1e-12));
        let v = [0.4, -1.0, 2.0];
        let (mut a, mut back) = ([0.0; 3], [0.0; 3]);
        s.apply(&b, 0, &v, &mut a, false);
        s.apply(&b, 0, &a, &mut back, true);
        assert!(back.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn jordan_division_inverts_product() {
        let l = [2.0, 0.3, -0.5];
        let q = [0.7, 1.1, -0.4];
        let (mut d, mut back, mut inv, mut id) = ([0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]);
        jprod(Kind::Soc, &l, &q, &mut d);
        jdiv(Kind::Soc, &l, &d, &mut back);
        assert!(back.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
        jinv(Kind::Soc, &l, &mut inv);
        jprod(Kind::Soc, &l, &inv, &mut id);
        assert!(id.iter().zip([1.0, 0.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn step_to_cone_boundary() {
        let u = [1.0, 0.0, 0.0];
        assert!((max_step(Kind::Soc, &u, &[0.0, 1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!(max_step(Kind::Soc, &u, &[1.0, 0.5, 0.0]).is_infinite());
        assert!((max_step(Kind::Soc, &u, &[-1.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
        let u = [2.0, 0.5, -0.3];
        let du = [-0.7, 0.9, 0.4];
        let a = max_step(Kind::Soc, &u, &du);
        let at: Vec<f64> = u.iter().zip(&du).map(|(x, d)| x + a * d).collect();
        assert!(soc_det(&at).abs() < 1e-9 && at[0] > 0.0);
    }
}
