//! Covisibility graph over keyframes carrying relative motion measurements.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::ops::RangeInclusive;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::Rotation;
use crate::tracks::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph restricted to the requested frames is not connected")]
    DisconnectedGraph,
    #[error("empty frame range")]
    EmptyRange,
    #[error("self loop on frame {0}")]
    SelfLoop(FrameId),
    #[error("translation direction is not unit length (norm {0})")]
    NotUnit(f64),
}

/// Relative motion between keyframes `j < k`.
///
/// `r_jk` maps camera-`j` coordinates into camera-`k` coordinates, so that
/// `R_k ~ r_jk R_j`. `t_e`, when present, is the unit direction from the
/// centre of `j` to the centre of `k` expressed in camera-`j` coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub j: FrameId,
    pub k: FrameId,
    pub r_jk: Rotation,
    pub t_e: Option<Vector3<f64>>,
    pub weight: usize,
}

impl Edge {
    /// The same measurement seen from the other endpoint.
    pub fn reversed(&self) -> Edge {
        Edge {
            j: self.k,
            k: self.j,
            r_jk: self.r_jk.transpose(),
            t_e: self.t_e.map(|t| -(self.r_jk * t)),
            weight: self.weight,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CovisibilityGraph {
    nodes: BTreeSet<FrameId>,
    edges: BTreeMap<(FrameId, FrameId), Edge>,
}

impl CovisibilityGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: FrameId) {
        self.nodes.insert(id);
    }

    /// Inserts or replaces the edge between `j` and `k`; the stored edge is
    /// always oriented with `j < k`.
    pub fn add_edge(&mut self, edge: Edge) -> Result<(), GraphError> {
        if edge.j == edge.k {
            return Err(GraphError::SelfLoop(edge.j));
        }
        if let Some(t) = edge.t_e {
            let n = t.norm();
            if (n - 1.0).abs() > 1e-9 {
                return Err(GraphError::NotUnit(n));
            }
        }
        let edge = if edge.j < edge.k { edge } else { edge.reversed() };
        self.nodes.insert(edge.j);
        self.nodes.insert(edge.k);
        self.edges.insert((edge.j, edge.k), edge);
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.nodes.iter().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, id: FrameId) -> bool {
        self.nodes.contains(&id)
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.values()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, j: FrameId, k: FrameId) -> Option<Edge> {
        if j < k {
            self.edges.get(&(j, k)).copied()
        } else {
            self.edges.get(&(k, j)).map(Edge::reversed)
        }
    }

    /// Edges incident to `id`, each oriented to start at `id`.
    pub fn incident(&self, id: FrameId) -> Vec<Edge> {
        self.edges
            .values()
            .filter(|e| e.j == id || e.k == id)
            .map(|e| if e.j == id { *e } else { e.reversed() })
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        let Some(&start) = self.nodes.iter().next() else {
            return true;
        };
        let mut adj: BTreeMap<FrameId, Vec<FrameId>> = BTreeMap::new();
        for e in self.edges.values() {
            adj.entry(e.j).or_default().push(e.k);
            adj.entry(e.k).or_default().push(e.j);
        }
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(n) = queue.pop_front() {
            for &m in adj.get(&n).into_iter().flatten() {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// Induced subgraph on `range`.
    pub fn window(&self, range: RangeInclusive<FrameId>) -> Result<CovisibilityGraph, GraphError> {
        if range.is_empty() {
            return Err(GraphError::EmptyRange);
        }
        self.induced(|f| range.contains(&f))
    }

    /// Induced subgraph on the nodes accepted by `keep`; must be connected.
    pub fn induced(&self, mut keep: impl FnMut(FrameId) -> bool) -> Result<CovisibilityGraph, GraphError> {
        let nodes: BTreeSet<FrameId> = self.nodes.iter().copied().filter(|&f| keep(f)).collect();
        let edges = self
            .edges
            .iter()
            .filter(|(&(j, k), _)| nodes.contains(&j) && nodes.contains(&k))
            .map(|(key, e)| (*key, *e))
            .collect();
        let g = CovisibilityGraph { nodes, edges };
        if g.nodes.is_empty() {
            return Err(GraphError::EmptyRange);
        }
        if !g.is_connected() {
            return Err(GraphError::DisconnectedGraph);
        }
        Ok(g)
    }

    /// Adds every node and edge of `other`; edges of `other` win on conflict.
    pub fn union(&self, other: &CovisibilityGraph) -> CovisibilityGraph {
        let mut g = self.clone();
        g.nodes.extend(other.nodes.iter().copied());
        for (key, e) in &other.edges {
            g.edges.insert(*key, *e);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> CovisibilityGraph {
        let mut g = CovisibilityGraph::new();
        for j in 0..n - 1 {
            g.add_edge(Edge { j, k: j + 1, r_jk: Rotation::identity(), t_e: None, weight: 10 }).unwrap();
        }
        g
    }

    #[test]
    fn window_of_chain() {
        let g = chain(4);
        let full = g.window(0..=3).unwrap();
        assert_eq!(full, g);
        let w = g.window(1..=3).unwrap();
        let keys: Vec<_> = w.edges().map(|e| (e.j, e.k)).collect();
        assert_eq!(keys, vec![(1, 2), (2, 3)]);
    }

    #[test]
    fn disconnected_window_is_rejected() {
        let mut g = chain(3);
        g.add_node(7);
        assert_eq!(g.window(0..=7), Err(GraphError::DisconnectedGraph));
        #[allow(clippy::reversed_empty_ranges)]
        let empty = g.window(3..=1);
        assert_eq!(empty, Err(GraphError::EmptyRange));
    }

    #[test]
    fn union_appends_loop_edges() {
        let g = chain(4);
        let mut loops = CovisibilityGraph::new();
        loops.add_edge(Edge { j: 3, k: 0, r_jk: Rotation::identity(), t_e: None, weight: 5 }).unwrap();
        let u = g.union(&loops);
        assert_eq!(u.edge_count(), 4);
        assert!(u.edge(0, 3).is_some());
    }

    #[test]
    fn reversed_edge_is_consistent() {
        use crate::geometry::KeyframePose;
        let rj = Rotation::exp(&Vector3::new(0.1, 0.2, -0.3));
        let rk = Rotation::exp(&Vector3::new(-0.5, 0.1, 0.7));
        let cj = Vector3::new(1.0, 0.0, 2.0);
        let ck = Vector3::new(-1.0, 3.0, 0.5);
        let pj = KeyframePose::from_centre(rj, &cj);
        let _ = pj;
        let d = (ck - cj).normalize();
        let e = Edge { j: 0, k: 1, r_jk: rk * rj.transpose(), t_e: Some(rj * d), weight: 1 };
        let r = e.reversed();
        assert!((r.t_e.unwrap() - rk * (-d)).norm() < 1e-12);
        assert!(r.r_jk.angle_to(&(rj * rk.transpose())) < 1e-12);
    }
}
