//! Plain-text dump of a [`ConeProgram`] for cross-checking with external
//! conic solvers.
//!
//! ```text
//! dim <n>
//! block <start> <len>
//! cone <m> <k>
//! vars <i_1> ... <i_k>
//! row <a_11> ... <a_1k>          (m lines)
//! a0 <v_1> ... <v_m>
//! b <v_1> ... <v_k>
//! beta <v>
//! linear <k>
//! vars <i_1> ... <i_k>
//! g <v_1> ... <v_k>
//! h <v>
//! ```
//!
//! Values are written with 17 significant digits.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::{ConeConstraint, ConeProgram, ConicError, LinearConstraint};

fn join_f(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(" ")
}

fn join_u(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_program(p: &ConeProgram) -> String {
    let mut s = String::new();
    writeln!(s, "dim {}", p.dim).unwrap();
    for b in &p.blocks {
        writeln!(s, "block {} {}", b.start, b.len()).unwrap();
    }
    for c in &p.cones {
        writeln!(s, "cone {} {}", c.a_mat.nrows(), c.vars.len()).unwrap();
        writeln!(s, "vars {}", join_u(&c.vars)).unwrap();
        for r in 0..c.a_mat.nrows() {
            writeln!(s, "row {}", join_f(c.a_mat.row(r).iter().copied())).unwrap();
        }
        writeln!(s, "a0 {}", join_f(c.a0.iter().copied())).unwrap();
        writeln!(s, "b {}", join_f(c.b.iter().copied())).unwrap();
        writeln!(s, "beta {:.16e}", c.beta).unwrap();
    }
    for l in &p.linears {
        writeln!(s, "linear {}", l.vars.len()).unwrap();
        writeln!(s, "vars {}", join_u(&l.vars)).unwrap();
        writeln!(s, "g {}", join_f(l.g.iter().copied())).unwrap();
        writeln!(s, "h {:.16e}", l.h).unwrap();
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, msg: impl Into<String>) -> ConicError {
        ConicError::Parse { line: self.line, msg: msg.into() }
    }

    fn next_tagged(&mut self, tag: &str) -> Result<Vec<&'a str>, ConicError> {
        loop {
            let (i, l) = self.inner.next().ok_or_else(|| ConicError::Parse { line: self.line + 1, msg: format!("expected `{tag}`") })?;
            self.line = i + 1;
            let l = l.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let mut it = l.split_whitespace();
            let head = it.next().unwrap();
            if head != tag {
                return Err(self.err(format!("expected `{tag}`, found `{head}`")));
            }
            return Ok(it.collect());
        }
    }

    fn floats(&self, toks: &[&str], n: usize) -> Result<Vec<f64>, ConicError> {
        if toks.len() != n {
            return Err(self.err(format!("expected {n} values, found {}", toks.len())));
        }
        toks.iter().map(|t| t.parse::<f64>().map_err(|e| self.err(e.to_string()))).collect()
    }

    fn usizes(&self, toks: &[&str], n: usize) -> Result<Vec<usize>, ConicError> {
        if toks.len() != n {
            return Err(self.err(format!("expected {n} indices, found {}", toks.len())));
        }
        toks.iter().map(|t| t.parse::<usize>().map_err(|e| self.err(e.to_string()))).collect()
    }
}

pub fn read_program(text: &str) -> Result<ConeProgram, ConicError> {
    let mut lines = Lines { inner: text.lines().enumerate(), line: 0 };
    let toks = lines.next_tagged("dim")?;
    let dim = lines.usizes(&toks, 1)?[0];
    let mut p = ConeProgram::new(dim);
    loop {
        let next = lines.inner.next();
        let Some((i, l)) = next else { break };
        lines.line = i + 1;
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks[0] {
            "block" => {
                let v = lines.usizes(&toks[1..], 2)?;
                p.blocks.push(v[0]..v[0] + v[1]);
            }
            "cone" => {
                let v = lines.usizes(&toks[1..], 2)?;
                let (m, k) = (v[0], v[1]);
                let vars = {
                    let t = lines.next_tagged("vars")?;
                    lines.usizes(&t, k)?
                };
                let mut a = DMatrix::zeros(m, k);
                for r in 0..m {
                    let t = lines.next_tagged("row")?;
                    let row = lines.floats(&t, k)?;
                    for (c, x) in row.into_iter().enumerate() {
                        a[(r, c)] = x;
                    }
                }
                let t = lines.next_tagged("a0")?;
                let a0 = DVector::from_vec(lines.floats(&t, m)?);
                let t = lines.next_tagged("b")?;
                let b = DVector::from_vec(lines.floats(&t, k)?);
                let t = lines.next_tagged("beta")?;
                let beta = lines.floats(&t, 1)?[0];
                p.cones.push(ConeConstraint::new(vars, a, a0, b, beta)?);
            }
            "linear" => {
                let k = lines.usizes(&toks[1..], 1)?[0];
                let t = lines.next_tagged("vars")?;
                let vars = lines.usizes(&t, k)?;
                let t = lines.next_tagged("g")?;
                let g = DVector::from_vec(lines.floats(&t, k)?);
                let t = lines.next_tagged("h")?;
                let h = lines.floats(&t, 1)?[0];
                p.linears.push(LinearConstraint::new(vars, g, h)?);
            }
            other => return Err(lines.err(format!("unknown record `{other}`"))),
        }
    }
    p.validate()?;
    Ok(p)
}
