//! Chordal rotation averaging by iteratively reweighted least squares.
//!
//! Each outer iteration lifts the edge residuals `R_k^T R_jk R_j` to the
//! tangent space, solves one weighted graph-Laplacian system per axis for
//! right-multiplicative updates `R_j <- R_j exp(w_j)`, and retracts. A halving
//! line search keeps the (robust) cost from increasing.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::Rotation;
use crate::graph::{CovisibilityGraph, Edge};
use crate::tracks::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotAvgError {
    #[error("no rotation for frame {0}")]
    MissingNode(FrameId),
    #[error("graph is not connected")]
    DisconnectedGraph,
    #[error("frame {0} has no edge to a frame with a known rotation")]
    NoEdgeToNewFrame(FrameId),
    #[error("empty graph")]
    Empty,
}

/// Per-edge loss on the residual angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// Weight `s^2 / (s^2 + theta^2)`; `s` starts at `sigma0_deg` and is halved
    /// every `halve_every` iterations down to `floor_deg`.
    Robust { sigma0_deg: f64, halve_every: usize, floor_deg: f64 },
    /// Plain chordal distance `|R_jk R_j - R_k|_F^2 = 4 (1 - cos theta)`.
    Chordal,
}

impl Default for Loss {
    fn default() -> Self {
        Loss::Robust { sigma0_deg: 5.0, halve_every: 10, floor_deg: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotAvgConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub loss: Loss,
    pub weight_cap: usize,
    /// Frames held at the given rotation. When empty, the lowest frame id is
    /// held at its initial value.
    pub anchors: BTreeMap<FrameId, Rotation>,
}

impl Default for RotAvgConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, loss: Loss::default(), weight_cap: 100, anchors: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationEstimate {
    pub rotations: BTreeMap<FrameId, Rotation>,
    /// Chordal cost of `rotations` over the solved graph.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Surrogate cost after every accepted iteration.
    pub history: Vec<f64>,
}

fn rot_of(rotations: &BTreeMap<FrameId, Rotation>, id: FrameId) -> Result<&Rotation, RotAvgError> {
    rotations.get(&id).ok_or(RotAvgError::MissingNode(id))
}

/// Sum over edges of `|R_jk - R_k R_j^T|_F^2`.
pub fn chordal_cost(graph: &CovisibilityGraph, rotations: &BTreeMap<FrameId, Rotation>) -> Result<f64, RotAvgError> {
    let mut c = 0.0;
    for e in graph.edges() {
        let rj = rot_of(rotations, e.j)?;
        let rk = rot_of(rotations, e.k)?;
        c += (e.r_jk.matrix() - rk.matrix() * rj.matrix().transpose()).norm_squared();
    }
    Ok(c)
}

/// Residual angle of an edge under the given rotations.
fn residual(e: &Edge, rj: &Rotation, rk: &Rotation) -> Vector3<f64> {
    (rk.transpose() * e.r_jk * *rj).log()
}

/// Chains relative rotations along a maximum-weight spanning tree rooted at
/// the lowest frame id, which is set to the identity.
pub fn spanning_tree_init(graph: &CovisibilityGraph) -> Result<BTreeMap<FrameId, Rotation>, RotAvgError> {
    let Some(root) = graph.nodes().next() else {
        return Err(RotAvgError::Empty);
    };
    if !graph.is_connected() {
        return Err(RotAvgError::DisconnectedGraph);
    }
    let ids: Vec<FrameId> = graph.nodes().collect();
    let index: BTreeMap<FrameId, usize> = ids.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut edges: Vec<&Edge> = graph.edges().collect();
    edges.sort_by(|a, b| b.weight.cmp(&a.weight).then((a.j, a.k).cmp(&(b.j, b.k))));
    let mut adj: BTreeMap<FrameId, Vec<Edge>> = BTreeMap::new();
    for e in edges {
        let (a, b) = (find(&mut parent, index[&e.j]), find(&mut parent, index[&e.k]));
        if a != b {
            parent[a] = b;
            adj.entry(e.j).or_default().push(*e);
            adj.entry(e.k).or_default().push(e.reversed());
        }
    }
    let mut out = BTreeMap::from([(root, Rotation::identity())]);
    let mut queue = VecDeque::from([root]);
    while let Some(n) = queue.pop_front() {
        let rn = out[&n];
        for e in adj.get(&n).into_iter().flatten() {
            if !out.contains_key(&e.k) {
                out.insert(e.k, (e.r_jk * rn).renormalized());
                queue.push_back(e.k);
            }
        }
    }
    Ok(out)
}

struct Problem<'a> {
    edges: Vec<(&'a Edge, f64)>,
    free: BTreeMap<FrameId, usize>,
}

impl Problem<'_> {
    fn cost(&self, rot: &BTreeMap<FrameId, Rotation>, loss: Loss, sigma: f64) -> f64 {
        self.edges
            .iter()
            .map(|(e, w)| {
                let theta = residual(e, &rot[&e.j], &rot[&e.k]).norm();
                w * match loss {
                    Loss::Robust { .. } => sigma * sigma * (theta * theta / (sigma * sigma)).ln_1p(),
                    Loss::Chordal => 4.0 * (1.0 - theta.cos()),
                }
            })
            .sum()
    }
}

fn irls_weight(loss: Loss, theta: f64, sigma: f64) -> f64 {
    match loss {
        Loss::Robust { .. } => sigma * sigma / (sigma * sigma + theta * theta),
        Loss::Chordal => {
            if theta < 1e-8 {
                2.0
            } else {
                2.0 * theta.sin() / theta
            }
        }
    }
}

fn sigma_at(loss: Loss, iter: usize) -> f64 {
    match loss {
        Loss::Robust { sigma0_deg, halve_every, floor_deg } => {
            let halvings = iter.checked_div(halve_every).unwrap_or(0).min(64) as i32;
            (sigma0_deg * 0.5f64.powi(halvings)).max(floor_deg).to_radians()
        }
        Loss::Chordal => 0.0,
    }
}

/// Robust IRLS over the whole graph starting from `init`.
pub fn irls_rotation_average(
    graph: &CovisibilityGraph,
    init: &BTreeMap<FrameId, Rotation>,
    cfg: &RotAvgConfig,
) -> Result<RotationEstimate, RotAvgError> {
    let Some(lowest) = graph.nodes().next() else {
        return Err(RotAvgError::Empty);
    };
    if !graph.is_connected() {
        return Err(RotAvgError::DisconnectedGraph);
    }
    let mut rot: BTreeMap<FrameId, Rotation> = BTreeMap::new();
    for n in graph.nodes() {
        let r = match cfg.anchors.get(&n) {
            Some(a) => *a,
            None => *rot_of(init, n)?,
        };
        rot.insert(n, r);
    }
    let pinned: BTreeSet<FrameId> = if cfg.anchors.is_empty() {
        BTreeSet::from([lowest])
    } else {
        graph.nodes().filter(|n| cfg.anchors.contains_key(n)).collect()
    };
    let free: BTreeMap<FrameId, usize> = graph.nodes().filter(|n| !pinned.contains(n)).enumerate().map(|(i, n)| (n, i)).collect();
    let problem = Problem { edges: graph.edges().map(|e| (e, e.weight.clamp(1, cfg.weight_cap.max(1)) as f64)).collect(), free };
    let nf = problem.free.len();

    let mut history = Vec::new();
    let mut converged = nf == 0;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iter {
        let sigma = sigma_at(cfg.loss, iterations);
        let current = problem.cost(&rot, cfg.loss, sigma);
        let mut lap = DMatrix::<f64>::zeros(nf, nf);
        let mut rhs = DMatrix::<f64>::zeros(nf, 3);
        for (e, w) in &problem.edges {
            let r = residual(e, &rot[&e.j], &rot[&e.k]);
            let w = w * irls_weight(cfg.loss, r.norm(), sigma);
            let fj = problem.free.get(&e.j).copied();
            let fk = problem.free.get(&e.k).copied();
            // w_k - w_j = r
            if let Some(k) = fk {
                lap[(k, k)] += w;
                for a in 0..3 {
                    rhs[(k, a)] += w * r[a];
                }
            }
            if let Some(j) = fj {
                lap[(j, j)] += w;
                for a in 0..3 {
                    rhs[(j, a)] -= w * r[a];
                }
            }
            if let (Some(j), Some(k)) = (fj, fk) {
                lap[(j, k)] -= w;
                lap[(k, j)] -= w;
            }
        }
        let Some(chol) = lap.clone().cholesky() else {
            return Err(RotAvgError::DisconnectedGraph);
        };
        let omega = chol.solve(&rhs);
        let step_norm = (0..nf).map(|i| omega.row(i).norm()).fold(0.0, f64::max);
        iterations += 1;

        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = rot.clone();
            for (&n, &i) in &problem.free {
                let w = Vector3::new(omega[(i, 0)], omega[(i, 1)], omega[(i, 2)]) * lambda;
                trial.insert(n, (rot[&n] * Rotation::exp(&w)).renormalized());
            }
            let c = problem.cost(&trial, cfg.loss, sigma);
            if c <= current {
                accepted = Some((trial, c));
                break;
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, c)) => {
                debug_assert!(c <= current);
                rot = trial;
                history.push(c);
            }
            None => {
                // no descent along the update: stationary up to round-off
                converged = step_norm < cfg.tol.sqrt();
                break;
            }
        }
        if step_norm < cfg.tol {
            converged = true;
        }
    }
    let cost = chordal_cost(graph, &rot)?;
    Ok(RotationEstimate { rotations: rot, cost, iterations, converged, history })
}

/// Adds `new_frame` to a solved set and re-solves the window graph.
///
/// The new frame starts from its strongest edge to an already solved frame.
/// The lowest frame of the window is held fixed; frames outside the window
/// keep their previous rotation.
pub fn incremental_update(
    prev: &RotationEstimate,
    window: &CovisibilityGraph,
    new_frame: FrameId,
    cfg: &RotAvgConfig,
) -> Result<RotationEstimate, RotAvgError> {
    for n in window.nodes().filter(|&n| n != new_frame) {
        rot_of(&prev.rotations, n)?;
    }
    let mut init: BTreeMap<FrameId, Rotation> = window.nodes().filter(|&n| n != new_frame).map(|n| (n, prev.rotations[&n])).collect();
    if !prev.rotations.contains_key(&new_frame) || !window.contains(new_frame) {
        let best = window
            .incident(new_frame)
            .into_iter()
            .filter(|e| init.contains_key(&e.k))
            .max_by(|a, b| a.weight.cmp(&b.weight).then(b.k.cmp(&a.k)))
            .ok_or(RotAvgError::NoEdgeToNewFrame(new_frame))?;
        // incident edges start at new_frame: R_k = r R_new
        init.insert(new_frame, (best.r_jk.transpose() * init[&best.k]).renormalized());
    } else {
        init.insert(new_frame, prev.rotations[&new_frame]);
    }
    let est = irls_rotation_average(window, &init, cfg)?;
    let mut rotations = prev.rotations.clone();
    rotations.extend(est.rotations.iter().map(|(k, v)| (*k, *v)));
    Ok(RotationEstimate { rotations, ..est })
}

/// Rotation `G` minimizing `sum |R_est G - R_ref|_F^2` over common frames.
///
/// World-to-camera rotations are defined up to a change of world frame, which
/// acts on the right; relative rotations `R_k R_j^T` do not see it.
pub fn gauge_rotation(est: &BTreeMap<FrameId, Rotation>, reference: &BTreeMap<FrameId, Rotation>) -> Rotation {
    let mut m = Matrix3::zeros();
    for (id, r) in est {
        if let Some(g) = reference.get(id) {
            m += r.matrix().transpose() * g.matrix();
        }
    }
    Rotation::project(&m)
}

/// Per-frame angular error (radians) after the best global gauge rotation.
pub fn aligned_errors(est: &BTreeMap<FrameId, Rotation>, reference: &BTreeMap<FrameId, Rotation>) -> BTreeMap<FrameId, f64> {
    let g = gauge_rotation(est, reference);
    est.iter().filter_map(|(id, r)| reference.get(id).map(|gt| (*id, (*r * g).angle_to(gt)))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rot(rng: &mut ChaCha8Rng, scale: f64) -> Rotation {
        Rotation::exp(&(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale))
    }

    fn graph_from(gt: &BTreeMap<FrameId, Rotation>, pairs: &[(FrameId, FrameId)], noise: f64, rng: &mut ChaCha8Rng) -> CovisibilityGraph {
        let mut g = CovisibilityGraph::new();
        for &(j, k) in pairs {
            let r = gt[&k] * gt[&j].transpose();
            let r = if noise > 0.0 { random_rot(rng, noise) * r } else { r };
            g.add_edge(Edge { j, k, r_jk: r, t_e: None, weight: 30 }).unwrap();
        }
        g
    }

    fn ring(n: usize) -> Vec<(FrameId, FrameId)> {
        let mut p: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
        p.extend((0..n - 2).map(|i| (i, i + 2)));
        p.push((0, n - 1));
        p
    }

    #[test]
    fn cost_of_half_turn_is_eight() {
        let mut g = CovisibilityGraph::new();
        g.add_edge(Edge { j: 0, k: 1, r_jk: Rotation::identity(), t_e: None, weight: 1 }).unwrap();
        let rot = BTreeMap::from([(0, Rotation::identity()), (1, Rotation::from_axis_angle(&Vector3::x(), std::f64::consts::PI))]);
        assert!((chordal_cost(&g, &rot).unwrap() - 8.0).abs() < 1e-12);
        let ident = BTreeMap::from([(0, Rotation::identity()), (1, Rotation::identity())]);
        assert_eq!(chordal_cost(&g, &ident).unwrap(), 0.0);
        assert_eq!(chordal_cost(&g, &BTreeMap::new()), Err(RotAvgError::MissingNode(0)));
    }

    #[test]
    fn chordal_cost_matches_entrywise_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt: BTreeMap<_, _> = (0..5).map(|i| (i, random_rot(&mut rng, 2.0))).collect();
        let g = graph_from(&gt, &ring(5), 0.2, &mut rng);
        let est: BTreeMap<_, _> = (0..5).map(|i| (i, random_rot(&mut rng, 2.0))).collect();
        let mut want = 0.0;
        for e in g.edges() {
            let p = est[&e.k].matrix() * est[&e.j].matrix().transpose();
            for a in 0..3 {
                for b in 0..3 {
                    want += (e.r_jk.matrix()[(a, b)] - p[(a, b)]).powi(2);
                }
            }
        }
        assert!((chordal_cost(&g, &est).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn tree_init_is_exact_on_a_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gt: BTreeMap<_, _> = (0..6).map(|i| (i, random_rot(&mut rng, 1.5))).collect();
        let pairs: Vec<_> = (0..5).map(|i| (i, i + 1)).collect();
        let g = graph_from(&gt, &pairs, 0.3, &mut rng);
        let init = spanning_tree_init(&g).unwrap();
        assert!(chordal_cost(&g, &init).unwrap() < 1e-20);
        let exact = graph_from(&gt, &pairs, 0.0, &mut rng);
        let init = spanning_tree_init(&exact).unwrap();
        assert!(aligned_errors(&init, &gt).values().all(|&e| e < 1e-12));
    }

    #[test]
    fn noiseless_ring_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gt: BTreeMap<_, _> = (0..12).map(|i| (i, random_rot(&mut rng, 2.0))).collect();
        let g = graph_from(&gt, &ring(12), 0.0, &mut rng);
        let init: BTreeMap<_, _> = gt.iter().map(|(k, r)| (*k, random_rot(&mut rng, 0.05) * *r)).collect();
        let est = irls_rotation_average(&g, &init, &RotAvgConfig::default()).unwrap();
        assert!(est.converged);
        assert!(aligned_errors(&est.rotations, &gt).values().all(|&e| e < 1e-7));
        assert!(est.history.windows(2).all(|w| w[1] <= w[0] || w[1] < 1e-20));
    }

    #[test]
    fn irls_reduces_noisy_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gt: BTreeMap<_, _> = (0..15).map(|i| (i, random_rot(&mut rng, 2.0))).collect();
        let g = graph_from(&gt, &ring(15), 0.02, &mut rng);
        let init = spanning_tree_init(&g).unwrap();
        let c0 = chordal_cost(&g, &init).unwrap();
        for loss in [Loss::default(), Loss::Chordal] {
            let est = irls_rotation_average(&g, &init, &RotAvgConfig { loss, ..Default::default() }).unwrap();
            assert!(est.cost.is_finite() && est.cost < c0, "{loss:?}: {} vs {c0}", est.cost);
        }
    }

    #[test]
    fn single_node_against_anchors_is_the_polar_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let base = random_rot(&mut rng, 2.0);
        let ms: Vec<Rotation> = (0..6).map(|_| random_rot(&mut rng, 0.3) * base).collect();
        let mut g = CovisibilityGraph::new();
        let mut anchors = BTreeMap::new();
        for (i, m) in ms.iter().enumerate() {
            g.add_edge(Edge { j: i + 1, k: 0, r_jk: *m, t_e: None, weight: 1 }).unwrap();
            anchors.insert(i + 1, Rotation::identity());
        }
        let init = BTreeMap::from([(0, Rotation::identity())]);
        let cfg = RotAvgConfig { loss: Loss::Chordal, anchors, tol: 1e-12, ..Default::default() };
        let est = irls_rotation_average(&g, &init, &cfg).unwrap();
        let sum = ms.iter().fold(Matrix3::zeros(), |a, m| a + m.matrix());
        let want = Rotation::project(&sum);
        assert!(est.rotations[&0].angle_to(&want) < 1e-8);
    }

    #[test]
    fn one_edge_is_satisfied_exactly() {
        let r = Rotation::exp(&Vector3::new(0.4, 0.1, -0.9));
        let mut g = CovisibilityGraph::new();
        g.add_edge(Edge { j: 3, k: 8, r_jk: r, t_e: None, weight: 5 }).unwrap();
        let init = BTreeMap::from([(3, Rotation::identity()), (8, Rotation::identity())]);
        let est = irls_rotation_average(&g, &init, &RotAvgConfig::default()).unwrap();
        assert!(est.cost < 1e-20);
        assert_eq!(est.rotations[&3], Rotation::identity());
    }

    #[test]
    fn gauge_change_leaves_aligned_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let gt: BTreeMap<_, _> = (0..8).map(|i| (i, random_rot(&mut rng, 2.0))).collect();
        let g1 = graph_from(&gt, &ring(8), 0.01, &mut ChaCha8Rng::seed_from_u64(1));
        let gauge = random_rot(&mut rng, 2.0);
        let gt2: BTreeMap<_, _> = gt.iter().map(|(k, r)| (*k, *r * gauge)).collect();
        let g2 = graph_from(&gt2, &ring(8), 0.01, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = RotAvgConfig::default();
        let e1 = irls_rotation_average(&g1, &spanning_tree_init(&g1).unwrap(), &cfg).unwrap();
        let e2 = irls_rotation_average(&g2, &spanning_tree_init(&g2).unwrap(), &cfg).unwrap();
        let a = aligned_errors(&e1.rotations, &gt);
        let b = aligned_errors(&e2.rotations, &gt2);
        for (k, v) in &a {
            assert!((v - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn incremental_append() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let gt: BTreeMap<_, _> = (0..6).map(|i| (i, random_rot(&mut rng, 1.0))).collect();
        let pairs: Vec<_> = ring(6);
        let full = graph_from(&gt, &pairs, 0.0, &mut rng);
        let first = full.window(0..=4).unwrap();
        let cfg = RotAvgConfig::default();
        let prev = irls_rotation_average(&first, &spanning_tree_init(&first).unwrap(), &cfg).unwrap();
        let win = full.window(2..=5).unwrap();
        let next = incremental_update(&prev, &win, 5, &cfg).unwrap();
        assert!(chordal_cost(&win, &next.rotations).unwrap() < 1e-12);
        assert_eq!(next.rotations[&0], prev.rotations[&0]);

        let noisy = graph_from(&gt, &pairs, 0.03, &mut rng);
        let first = noisy.window(0..=4).unwrap();
        let prev = irls_rotation_average(&first, &spanning_tree_init(&first).unwrap(), &cfg).unwrap();
        let win = noisy.window(2..=5).unwrap();
        let next = incremental_update(&prev, &win, 5, &cfg).unwrap();
        let cold = spanning_tree_init(&win).unwrap();
        assert!(chordal_cost(&win, &next.rotations).unwrap() <= chordal_cost(&win, &cold).unwrap() + 1e-12);

        let mut lonely = win.clone();
        lonely.add_node(9);
        let err = incremental_update(&next, &lonely, 9, &cfg);
        assert!(matches!(err, Err(RotAvgError::NoEdgeToNewFrame(9)) | Err(RotAvgError::DisconnectedGraph)));
    }
}
