//! Pair graph: one vertex per transmitter/receiver pair, an edge for the
//! mutual interference between every two pairs, and an SI edge joining the
//! two directions of each full-duplex device pair.
//!
//! Channels enter as gains `|h|²`. An edge is stored once with its feature
//! 4-tuple oriented towards the lower endpoint `a`:
//! `(|h_{b→a}|², |h_{a→b}|², d_{b→a}, d_{a→b})`, i.e. incoming interference
//! first. Reading it from `b`'s side swaps entries 1↔2 and 3↔4.

use std::cmp::Ordering;

use crate::netgen::NetworkInstance;
use crate::phy::si_variance;

pub const VERTEX_FEATURES: usize = 3;
pub const EDGE_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub feat: [f64; EDGE_FEATURES],
    pub is_si: bool,
}

impl Edge {
    /// Features as seen from endpoint `v`.
    pub fn oriented(&self, v: usize) -> [f64; EDGE_FEATURES] {
        if v == self.a {
            self.feat
        } else {
            debug_assert_eq!(v, self.b);
            let f = self.feat;
            [f[1], f[0], f[3], f[2]]
        }
    }

    pub fn other(&self, v: usize) -> usize {
        if v == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub vertex: usize,
    pub edge: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairGraph {
    pub vertex_feat: Vec<[f64; VERTEX_FEATURES]>,
    pub edges: Vec<Edge>,
    pub midpoint: Vec<[f64; 2]>,
    /// Neighbor lists in canonical order (see [`canonical_order`]).
    pub adjacency: Vec<Vec<Neighbor>>,
}

impl PairGraph {
    pub fn num_vertices(&self) -> usize {
        self.vertex_feat.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn num_si_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.is_si).count()
    }

    pub fn num_interference_edges(&self) -> usize {
        self.num_edges() - self.num_si_edges()
    }

    fn with_edges(
        vertex_feat: Vec<[f64; VERTEX_FEATURES]>,
        midpoint: Vec<[f64; 2]>,
        edges: Vec<Edge>,
    ) -> Self {
        let n = vertex_feat.len();
        let mut adjacency = vec![Vec::new(); n];
        for (idx, e) in edges.iter().enumerate() {
            adjacency[e.a].push(Neighbor {
                vertex: e.b,
                edge: idx,
            });
            adjacency[e.b].push(Neighbor {
                vertex: e.a,
                edge: idx,
            });
        }
        for (v, list) in adjacency.iter_mut().enumerate() {
            list.sort_by(|x, y| canonical_order(v, x, y, &edges, &vertex_feat));
        }
        Self {
            vertex_feat,
            edges,
            midpoint,
            adjacency,
        }
    }
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Orders the neighbors of `v` by their data (oriented edge features, then
/// neighbor vertex features) instead of by label. Message sums taken in this
/// order do not change when the vertices are relabelled, which makes the
/// model's output permutation-equivariant bit for bit. The vertex index only
/// breaks exact ties.
pub fn canonical_order(
    v: usize,
    x: &Neighbor,
    y: &Neighbor,
    edges: &[Edge],
    vertex_feat: &[[f64; VERTEX_FEATURES]],
) -> Ordering {
    lex(&edges[x.edge].oriented(v), &edges[y.edge].oriented(v))
        .then_with(|| lex(&vertex_feat[x.vertex], &vertex_feat[y.vertex]))
        .then_with(|| x.vertex.cmp(&y.vertex))
}

pub fn build_pair_graph(inst: &NetworkInstance) -> PairGraph {
    let k = inst.num_links();
    let cfg = &inst.config;
    let d_s = cfg.antenna_dist_m;
    let si_feat = si_variance(cfg.p_max_w, cfg.si_spec()).expect("p_max is positive");

    let vertex_feat = (0..k)
        .map(|v| {
            let d = if inst.is_fd[v] {
                d_s
            } else {
                inst.distance(v, v)
            };
            [inst.gain(v, v), inst.weights[v], d]
        })
        .collect();
    let midpoint = (0..k).map(|v| inst.midpoint(v)).collect();

    let mut edges = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let is_si = inst.fd_partner[a] == Some(b);
            let feat = if is_si {
                [si_feat, si_feat, d_s, d_s]
            } else {
                [
                    inst.gain(b, a),
                    inst.gain(a, b),
                    inst.distance(b, a),
                    inst.distance(a, b),
                ]
            };
            edges.push(Edge { a, b, feat, is_si });
        }
    }
    PairGraph::with_edges(vertex_feat, midpoint, edges)
}

pub fn midpoint_distance(g: &PairGraph, v: usize, u: usize) -> f64 {
    let (p, q) = (g.midpoint[v], g.midpoint[u]);
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Drops interference edges whose pair midpoints are more than `t` meters
/// apart. SI edges are always kept.
pub fn truncate_edges(g: &PairGraph, t: f64) -> PairGraph {
    let edges = g
        .edges
        .iter()
        .filter(|e| e.is_si || midpoint_distance(g, e.a, e.b) <= t)
        .cloned()
        .collect();
    PairGraph::with_edges(g.vertex_feat.clone(), g.midpoint.clone(), edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgen::{sample_instance, ExperimentConfig};
    use proptest::prelude::*;

    fn cfg(k: usize, fd_fraction: f64) -> ExperimentConfig {
        ExperimentConfig {
            num_links: k,
            fd_fraction,
            ..Default::default()
        }
    }

    #[test]
    fn six_users_two_fd_pairs() {
        let inst = sample_instance(&cfg(6, 4.0 / 6.0), 3).unwrap();
        let g = build_pair_graph(&inst);
        assert_eq!(g.num_vertices(), 6);
        assert_eq!(g.num_edges(), 15);
        assert_eq!(g.num_si_edges(), 2);
        for e in g.edges.iter().filter(|e| e.is_si) {
            assert_eq!(inst.fd_partner[e.a], Some(e.b));
            let gamma = 0.01 * 1f64.powf(0.5);
            assert_eq!(e.feat, [gamma, gamma, 0.40, 0.40]);
        }
        for v in 0..4 {
            assert_eq!(g.vertex_feat[v][2], 0.40);
        }
        for v in 4..6 {
            assert_eq!(g.vertex_feat[v][2], inst.distance(v, v));
        }
    }

    #[test]
    fn single_vertex_has_no_edges() {
        let g = build_pair_graph(&sample_instance(&cfg(1, 0.0), 0).unwrap());
        assert_eq!(g.num_vertices(), 1);
        assert_eq!(g.num_edges(), 0);
        assert!(g.adjacency[0].is_empty());
    }

    #[test]
    fn features_match_instance_matrices() {
        let inst = sample_instance(&cfg(4, 0.0), 8).unwrap();
        let g = build_pair_graph(&inst);
        assert_eq!(g.num_edges(), 6);
        assert_eq!(g.num_si_edges(), 0);
        for v in 0..4 {
            let h = inst.channel_at(v, v);
            assert_eq!(
                g.vertex_feat[v],
                [h.re * h.re + h.im * h.im, 1.0, inst.distance(v, v)]
            );
            assert_eq!(g.midpoint[v], inst.midpoint(v));
            for n in &g.adjacency[v] {
                let u = n.vertex;
                let f = g.edges[n.edge].oriented(v);
                // Incoming interference from u's transmitter into v's receiver.
                assert_eq!(f[0], inst.channel_at(u, v).norm_sqr());
                assert_eq!(f[1], inst.channel_at(v, u).norm_sqr());
                assert_eq!(f[2], inst.distance(u, v));
                assert_eq!(f[3], inst.distance(v, u));
            }
        }
    }

    #[test]
    fn truncation_limits() {
        let inst = sample_instance(&cfg(20, 0.5), 4).unwrap();
        let g = build_pair_graph(&inst);
        assert_eq!(g.num_edges(), 190);
        let all = truncate_edges(&g, 100.0 * 2f64.sqrt());
        assert_eq!(all, g);
        let none = truncate_edges(&g, 1e-9);
        assert!(none.edges.iter().all(|e| e.is_si));
        assert_eq!(none.num_edges(), g.num_si_edges());
        assert_eq!(none.num_vertices(), 20);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let inst = sample_instance(&cfg(12, 0.5), 77).unwrap();
        assert_eq!(build_pair_graph(&inst), build_pair_graph(&inst));
    }

    #[test]
    fn mean_surviving_edges_at_twenty_meters() {
        // Monte Carlo over uniform midpoints for K = 50, t = 20: the expected
        // count is 1225 · F(400) with F(400) = 0.105130 (closed form checked
        // in the threshold module); here the netgen geometry must land near.
        let c = cfg(50, 0.0);
        let total: usize = (0..1000)
            .map(|s| {
                truncate_edges(&build_pair_graph(&sample_instance(&c, s).unwrap()), 20.0)
                    .num_edges()
            })
            .sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 128.8).abs() / 128.8 < 0.02, "{mean}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn truncation_is_monotone(seed in 0u64..500, t1 in 0.0f64..150.0, dt in 0.0f64..50.0) {
            let g = build_pair_graph(&sample_instance(&cfg(15, 0.4), seed).unwrap());
            let small = truncate_edges(&g, t1);
            let large = truncate_edges(&g, t1 + dt);
            let keys = |g: &PairGraph| g.edges.iter().map(|e| (e.a, e.b)).collect::<std::collections::HashSet<_>>();
            prop_assert!(keys(&small).is_subset(&keys(&large)));
        }
    }
}
