//! Per-session graphs.
//!
//! The adjacency-driven graph links consecutive items and weights each edge
//! by its occurrence count divided by the out-degree (or in-degree) of its
//! endpoint. The review-refined graph keeps only same-topic links and adds a
//! directed edge for every temporally ordered same-topic pair of positions.
//! Repeated items are ordered by first occurrence, so a pair of positions whose
//! nodes appear in reverse first-occurrence order adds nothing.

use std::collections::BTreeSet;
use std::fmt::Write;

use crate::numcore::Array;
use crate::scalar::Scalar;

/// Which position pairs become review-refined edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RigRule {
    /// Pairs whose items share a (known) dominant topic.
    #[default]
    SameTopic,
    /// Every ordered pair, ignoring topics.
    AllPairs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionGraph<S> {
    /// Distinct items in first-occurrence order; a node's slot is its index here.
    pub nodes: Vec<u32>,
    /// Session position → node slot.
    pub node_of: Vec<usize>,
    pub a_out: Array<S>,
    pub a_in: Array<S>,
    /// Directed review-refined edges as `(source slot, target slot)`.
    pub rig_edges: BTreeSet<(usize, usize)>,
    pub b_out: Array<S>,
    pub b_in: Array<S>,
    re_neighbors: Vec<Vec<usize>>,
}

/// Deduplicated node list and the position → slot map.
pub fn session_nodes(session: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let mut nodes: Vec<u32> = Vec::new();
    let node_of = session
        .iter()
        .map(|item| match nodes.iter().position(|n| n == item) {
            Some(slot) => slot,
            None => {
                nodes.push(*item);
                nodes.len() - 1
            }
        })
        .collect();
    (nodes, node_of)
}

/// Row-normalizes edge counts by source out-degree (`out`) and target in-degree (`in`).
fn normalize<S: Scalar>(counts: &[Vec<u32>]) -> (Array<S>, Array<S>) {
    let n = counts.len();
    let mut out = Array::zeros(n, n);
    let mut inc = Array::zeros(n, n);
    for (u, row) in counts.iter().enumerate() {
        let total: u32 = row.iter().sum();
        if total > 0 {
            for (w, &c) in row.iter().enumerate() {
                out.set(u, w, S::lit(c as f64 / total as f64));
            }
        }
    }
    for w in 0..n {
        let total: u32 = counts.iter().map(|row| row[w]).sum();
        if total > 0 {
            for (u, row) in counts.iter().enumerate() {
                inc.set(w, u, S::lit(row[w] as f64 / total as f64));
            }
        }
    }
    (out, inc)
}

/// Adjacency-driven graph: nodes, outgoing and incoming normalized weights.
pub fn build_aig<S: Scalar>(session: &[u32]) -> (Vec<u32>, Array<S>, Array<S>) {
    let (nodes, node_of) = session_nodes(session);
    let (a_out, a_in) = aig_matrices(&node_of, nodes.len());
    (nodes, a_out, a_in)
}

fn aig_matrices<S: Scalar>(node_of: &[usize], n: usize) -> (Array<S>, Array<S>) {
    let mut counts = vec![vec![0u32; n]; n];
    for pair in node_of.windows(2) {
        if pair[0] != pair[1] {
            counts[pair[0]][pair[1]] += 1;
        }
    }
    normalize(&counts)
}

/// Review-refined edges and their normalized matrices. `topics` is indexed by item.
pub fn build_rig<S: Scalar>(
    session: &[u32],
    topics: &[Option<u32>],
    rule: RigRule,
) -> (BTreeSet<(usize, usize)>, Array<S>, Array<S>) {
    let (nodes, node_of) = session_nodes(session);
    rig_parts(session, &node_of, nodes.len(), topics, rule)
}

fn rig_parts<S: Scalar>(
    session: &[u32],
    node_of: &[usize],
    n: usize,
    topics: &[Option<u32>],
    rule: RigRule,
) -> (BTreeSet<(usize, usize)>, Array<S>, Array<S>) {
    let linked = |a: u32, b: u32| match rule {
        RigRule::AllPairs => true,
        RigRule::SameTopic => match (topics[a as usize], topics[b as usize]) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    };
    let mut counts = vec![vec![0u32; n]; n];
    let mut edges = BTreeSet::new();
    for t1 in 0..session.len() {
        for t2 in t1 + 1..session.len() {
            let (u, w) = (node_of[t1], node_of[t2]);
            if u < w && linked(session[t1], session[t2]) {
                counts[u][w] += 1;
                edges.insert((u, w));
            }
        }
    }
    let (b_out, b_in) = normalize(&counts);
    (edges, b_out, b_in)
}

impl<S: Scalar> SessionGraph<S> {
    pub fn build(session: &[u32], topics: &[Option<u32>], rule: RigRule) -> Self {
        assert!(!session.is_empty(), "session graph of an empty session");
        let (nodes, node_of) = session_nodes(session);
        let n = nodes.len();
        let (a_out, a_in) = aig_matrices(&node_of, n);
        let (rig_edges, b_out, b_in) = rig_parts(session, &node_of, n, topics, rule);
        let mut re_neighbors = vec![BTreeSet::new(); n];
        for &(u, w) in &rig_edges {
            re_neighbors[u].insert(w);
            re_neighbors[w].insert(u);
        }
        Self {
            nodes,
            node_of,
            a_out,
            a_in,
            rig_edges,
            b_out,
            b_in,
            re_neighbors: re_neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Union of outgoing and incoming review-refined neighbors, ascending by slot.
    pub fn re_neighbors(&self, node: usize) -> &[usize] {
        &self.re_neighbors[node]
    }

    /// Slots `(u, w)` with a positive adjacency weight.
    pub fn aig_edges(&self) -> BTreeSet<(usize, usize)> {
        let n = self.len();
        let mut edges = BTreeSet::new();
        for u in 0..n {
            for w in 0..n {
                if self.a_out.get(u, w) > S::zero() {
                    edges.insert((u, w));
                }
            }
        }
        edges
    }

    pub fn aig_item_edges(&self) -> BTreeSet<(u32, u32)> {
        self.aig_edges()
            .into_iter()
            .map(|(u, w)| (self.nodes[u], self.nodes[w]))
            .collect()
    }

    pub fn rig_item_edges(&self) -> BTreeSet<(u32, u32)> {
        self.rig_edges
            .iter()
            .map(|&(u, w)| (self.nodes[u], self.nodes[w]))
            .collect()
    }

    /// `A_out ‖ A_in`, shape `n × 2n`.
    pub fn a_concat(&self) -> Array<S> {
        hconcat(&self.a_out, &self.a_in)
    }

    /// `B_out ‖ B_in`, shape `n × 2n`.
    pub fn b_concat(&self) -> Array<S> {
        hconcat(&self.b_out, &self.b_in)
    }

    /// Edge lists of both graphs, one edge per line, labelled with `label(item)`.
    pub fn describe(&self, label: impl Fn(u32) -> String) -> String {
        let name = |slot: usize| label(self.nodes[slot]);
        let mut s = String::new();
        writeln!(s, "AIG").unwrap();
        for (u, w) in self.aig_edges() {
            writeln!(
                s,
                "  {} -> {}  out={:.6} in={:.6}",
                name(u),
                name(w),
                self.a_out.get(u, w).as_f64(),
                self.a_in.get(w, u).as_f64()
            )
            .unwrap();
        }
        writeln!(s, "RIG").unwrap();
        for &(u, w) in &self.rig_edges {
            writeln!(
                s,
                "  {} -> {}  out={:.6} in={:.6}",
                name(u),
                name(w),
                self.b_out.get(u, w).as_f64(),
                self.b_in.get(w, u).as_f64()
            )
            .unwrap();
        }
        s
    }
}

fn hconcat<S: Scalar>(a: &Array<S>, b: &Array<S>) -> Array<S> {
    let rows: Vec<Vec<S>> = (0..a.rows())
        .map(|r| a.row(r).iter().chain(b.row(r)).copied().collect())
        .collect();
    if rows.is_empty() {
        return Array::zeros(0, a.cols() + b.cols());
    }
    Array::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = SessionGraph<f64>;

    #[test]
    fn single_item_session() {
        let (nodes, out, inc) = build_aig::<f64>(&[7]);
        assert_eq!(nodes, [7]);
        assert_eq!(out.data(), &[0.0]);
        assert_eq!(inc.data(), &[0.0]);
    }

    #[test]
    fn single_edge() {
        let (_, out, inc) = build_aig::<f64>(&[0, 1]);
        assert_eq!(out.data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(inc.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn repeated_item_outdegree_normalization() {
        // a b c b d with a..d = 10..13
        let g = G::build(&[10, 11, 12, 11, 13], &[None; 14], RigRule::SameTopic);
        assert_eq!(g.nodes, [10, 11, 12, 13]);
        let expected = BTreeSet::from([(0, 1), (1, 2), (2, 1), (1, 3)]);
        assert_eq!(g.aig_edges(), expected);
        assert_eq!(g.a_out.get(0, 1), 1.0);
        assert_eq!(g.a_out.get(1, 2), 0.5);
        assert_eq!(g.a_out.get(1, 3), 0.5);
        assert_eq!(g.a_out.get(2, 1), 1.0);
        // b is entered from a and from c.
        assert_eq!(g.a_in.get(1, 0), 0.5);
        assert_eq!(g.a_in.get(1, 2), 0.5);
    }

    #[test]
    fn fig1_scenario_filters_adjacent_and_recalls_distant() {
        let topics = [Some(0), Some(1), Some(0)];
        let g = G::build(&[0, 1, 2], &topics, RigRule::SameTopic);
        assert_eq!(g.rig_edges, BTreeSet::from([(0, 2)]));
        assert_eq!(g.b_out.get(0, 2), 1.0);
        assert_eq!(g.b_in.get(2, 0), 1.0);
    }

    #[test]
    fn all_same_topic_links_every_ordered_pair() {
        let g = G::build(&[0, 1, 2], &[Some(3); 3], RigRule::SameTopic);
        assert_eq!(g.rig_edges, BTreeSet::from([(0, 1), (0, 2), (1, 2)]));
        assert_eq!(g.b_out.row(0), &[0.0, 0.5, 0.5]);
        assert_eq!(g.b_in.row(2), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn unknown_topics_give_no_edges() {
        let g = G::build(&[0, 1, 2], &[None; 3], RigRule::SameTopic);
        assert!(g.rig_edges.is_empty());
        assert!(g.b_out.data().iter().all(|&x| x == 0.0));
        assert!((0..3).all(|n| g.re_neighbors(n).is_empty()));
    }

    #[test]
    fn repeats_follow_first_occurrence_order() {
        // a b a c: the b..a position pair runs against first occurrence
        let g = G::build(&[0, 1, 0, 2], &[Some(0); 3], RigRule::SameTopic);
        assert_eq!(g.rig_edges, BTreeSet::from([(0, 1), (0, 2), (1, 2)]));
        // a reaches c from two positions and b from one
        assert_eq!(g.b_out.row(0), &[0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(g.b_in.row(2), &[2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn all_pairs_rule_ignores_topics() {
        let g = G::build(&[0, 1, 2], &[Some(0), Some(1), None], RigRule::AllPairs);
        assert_eq!(g.rig_edges, BTreeSet::from([(0, 1), (0, 2), (1, 2)]));
    }

    #[test]
    fn neighbor_sets_are_unions() {
        let g = G::build(&[0, 1, 2], &[Some(0), Some(1), Some(0)], RigRule::SameTopic);
        assert_eq!(g.re_neighbors(0), &[2]);
        assert_eq!(g.re_neighbors(2), &[0]);
        assert!(g.re_neighbors(1).is_empty());

        // middle node has one incoming and one outgoing edge
        let g = G::build(&[3, 0, 1], &[Some(0); 4], RigRule::SameTopic);
        assert_eq!(g.re_neighbors(1), &[0, 2]);
    }

    #[test]
    fn concatenated_matrices() {
        let g = G::build(&[0, 1], &[None; 2], RigRule::SameTopic);
        let a = g.a_concat();
        assert_eq!(a.shape(), [2, 4]);
        assert_eq!(a.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(a.row(1), &[0.0, 0.0, 1.0, 0.0]);
    }
}
