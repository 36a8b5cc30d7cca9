//! Upper-bounded origin-destination table: every node pair whose shortest
//! path is no longer than a bound, with the first hop and last hop of that
//! path.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NodeId, RoadNetwork, SegmentId};
use crate::error::{Error, Result};

pub const DEFAULT_DELTA_M: f64 = 3000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UbodtEntry {
    pub origin: NodeId,
    pub destination: NodeId,
    pub next_node: NodeId,
    pub next_edge: SegmentId,
    pub prev_node: NodeId,
    pub distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ubodt {
    delta: f64,
    entries: HashMap<(NodeId, NodeId), UbodtEntry>,
}

#[derive(PartialEq)]
struct Queued {
    dist: f64,
    node: NodeId,
}

impl Eq for Queued {}

impl Ord for Queued {
    // min-heap on (dist, node)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ubodt {
    /// Bounded Dijkstra from every node. Zero-length `(o, o)` pairs are not
    /// stored. Sources are processed in parallel; the table does not depend on
    /// scheduling.
    pub fn build(network: &RoadNetwork, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::invalid(format!("delta must be positive, got {delta}")));
        }
        let origins: Vec<NodeId> = network.nodes().keys().copied().collect();
        let rows: Vec<Vec<UbodtEntry>> = origins
            .par_iter()
            .map(|&o| single_source(network, o, delta))
            .collect();
        let entries = rows
            .into_iter()
            .flatten()
            .map(|e| ((e.origin, e.destination), e))
            .collect();
        Ok(Self { delta, entries })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, origin: NodeId, destination: NodeId) -> Option<&UbodtEntry> {
        self.entries.get(&(origin, destination))
    }

    /// Shortest distance, with `0` for `origin == destination`.
    pub fn distance(&self, origin: NodeId, destination: NodeId) -> Option<f64> {
        if origin == destination {
            return Some(0.0);
        }
        self.lookup(origin, destination).map(|e| e.distance)
    }

    /// Segments of the stored shortest path, following `next_edge` hops.
    pub fn path(&self, origin: NodeId, destination: NodeId) -> Option<Vec<SegmentId>> {
        let mut out = Vec::new();
        let mut at = origin;
        while at != destination {
            let e = self.lookup(at, destination)?;
            out.push(e.next_edge);
            at = e.next_node;
            if out.len() > self.entries.len() {
                return None;
            }
        }
        Some(out)
    }

    /// Entries sorted by `(origin, destination)`.
    pub fn sorted_entries(&self) -> Vec<UbodtEntry> {
        let mut v: Vec<UbodtEntry> = self.entries.values().copied().collect();
        v.sort_by_key(|e| (e.origin, e.destination));
        v
    }

    /// CSV `origin,destination,next_node,next_edge,prev_node,distance`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["origin", "destination", "next_node", "next_edge", "prev_node", "distance"])?;
        for e in self.sorted_entries() {
            wr.write_record([
                e.origin.to_string(),
                e.destination.to_string(),
                e.next_node.to_string(),
                e.next_edge.to_string(),
                e.prev_node.to_string(),
                // shortest representation that parses back to the same bits
                e.distance.to_string(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads a table written by [`Ubodt::write_csv`]. The bound is recovered
    /// as the largest stored distance unless given.
    pub fn read_csv(r: impl Read, delta: Option<f64>) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut entries = HashMap::new();
        let mut max_d: f64 = 0.0;
        for row in rd.deserialize() {
            let e: UbodtEntry = row?;
            max_d = max_d.max(e.distance);
            entries.insert((e.origin, e.destination), e);
        }
        Ok(Self {
            delta: delta.unwrap_or(max_d),
            entries,
        })
    }
}

fn single_source(network: &RoadNetwork, origin: NodeId, delta: f64) -> Vec<UbodtEntry> {
    // per reached node: (distance, first hop node, first hop segment, previous node)
    let mut best: HashMap<NodeId, (f64, NodeId, SegmentId, NodeId)> = HashMap::new();
    let mut settled: HashMap<NodeId, ()> = HashMap::new();
    let mut heap = BinaryHeap::new();
    let mut dist_of: HashMap<NodeId, f64> = HashMap::new();
    dist_of.insert(origin, 0.0);
    heap.push(Queued {
        dist: 0.0,
        node: origin,
    });
    let mut out = Vec::new();
    while let Some(Queued { dist, node }) = heap.pop() {
        if settled.insert(node, ()).is_some() {
            continue;
        }
        if node != origin {
            let (d, next_node, next_edge, prev_node) = best[&node];
            out.push(UbodtEntry {
                origin,
                destination: node,
                next_node,
                next_edge,
                prev_node,
                distance: d,
            });
        }
        for &si in network.outgoing(node) {
            let s = network.segment_at(si);
            let nd = dist + s.length;
            if nd > delta || s.to_node == origin {
                continue;
            }
            let improves = dist_of.get(&s.to_node).is_none_or(|&old| nd < old);
            if improves && !settled.contains_key(&s.to_node) {
                dist_of.insert(s.to_node, nd);
                let (hop_node, hop_edge) = if node == origin {
                    (s.to_node, s.id)
                } else {
                    let b = best[&node];
                    (b.1, b.2)
                };
                best.insert(s.to_node, (nd, hop_node, hop_edge, node));
                heap.push(Queued { dist: nd, node: s.to_node });
            }
        }
    }
    out
}
