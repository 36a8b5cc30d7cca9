use std::collections::BTreeSet;

use super::{RoadNetwork, SegmentId};
use crate::error::Result;

/// Directed graph over a set of segments and their first-order neighbors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocalGraph<T = SegmentId> {
    /// Input items first (deduplicated, input order), then neighbors ascending.
    pub nodes: Vec<T>,
    /// Directed edges `(from, to)` as positions in `nodes`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl<T: Copy + Ord> LocalGraph<T> {
    /// First-order closure of `items` under `succ` and `pred`, with edges
    /// restricted to the closure.
    pub fn closure<'a>(
        items: &[T],
        succ: impl Fn(T) -> &'a [T],
        pred: impl Fn(T) -> &'a [T],
    ) -> Self
    where
        T: 'a,
    {
        let mut nodes: Vec<T> = Vec::with_capacity(items.len() * 4);
        let mut seen = BTreeSet::new();
        for &s in items {
            if seen.insert(s) {
                nodes.push(s);
            }
        }
        let mut extra = BTreeSet::new();
        for &s in &nodes {
            for &n in succ(s).iter().chain(pred(s)) {
                if !seen.contains(&n) {
                    extra.insert(n);
                }
            }
        }
        nodes.extend(extra);
        let mut sorted: Vec<(T, usize)> = nodes.iter().copied().enumerate().map(|(i, x)| (x, i)).collect();
        sorted.sort();
        let pos_of = |x: T| sorted.binary_search_by(|(y, _)| y.cmp(&x)).ok().map(|k| sorted[k].1);
        let mut edges = Vec::new();
        for (i, &s) in nodes.iter().enumerate() {
            for &n in succ(s) {
                if let Some(j) = pos_of(n) {
                    edges.push((i, j));
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Self { nodes, edges }
    }

    /// Attention neighborhoods: `N_i` = successors, plus predecessors when
    /// `bidirectional`, plus `i` itself when `self_loops`. Each list ascending.
    pub fn neighborhoods(&self, bidirectional: bool, self_loops: bool) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            out[a].push(b);
            if bidirectional {
                out[b].push(a);
            }
        }
        for (i, n) in out.iter_mut().enumerate() {
            if self_loops {
                n.push(i);
            }
            n.sort_unstable();
            n.dedup();
        }
        out
    }
}

/// Local directed graph over `segments` and their direct successors and
/// predecessors.
pub fn local_subgraph(network: &RoadNetwork, segments: &[SegmentId]) -> Result<LocalGraph> {
    let succ: Vec<(SegmentId, Vec<SegmentId>, Vec<SegmentId>)> = segments
        .iter()
        .map(|&s| Ok((s, network.successors(s)?, network.predecessors(s)?)))
        .collect::<Result<_>>()?;
    // Neighbor lists for the closure nodes, including neighbors of the input.
    let mut all: std::collections::BTreeMap<SegmentId, (Vec<SegmentId>, Vec<SegmentId>)> =
        succ.into_iter().map(|(s, a, b)| (s, (a, b))).collect();
    let firsts: Vec<SegmentId> = all.values().flat_map(|(a, b)| a.iter().chain(b)).copied().collect();
    for n in firsts {
        if !all.contains_key(&n) {
            all.insert(n, (network.successors(n)?, network.predecessors(n)?));
        }
    }
    Ok(LocalGraph::closure(segments, |s| all[&s].0.as_slice(), |s| all[&s].1.as_slice()))
}
