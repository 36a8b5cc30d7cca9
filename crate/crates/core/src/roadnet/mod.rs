//! Segment-level directed road network.
//!
//! Vertices are road segments; `u → w` is an edge exactly when `u` ends at the
//! intersection where `w` starts.

mod io;
mod mask;
mod subgraph;
mod ubodt;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{project_on_polyline, LocalProjection, LonLat, Projection};

pub use io::{read_edge_list, read_edge_list_file, write_edge_list, write_edge_list_file};
pub use mask::NeighborMask;
pub use subgraph::{local_subgraph, LocalGraph};
pub use ubodt::{Ubodt, UbodtEntry, DEFAULT_DELTA_M};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: SegmentId,
    pub from_node: NodeId,
    pub to_node: NodeId,
    /// Meters.
    pub length: f64,
    pub geometry: Vec<LonLat>,
}

/// Node positions may differ by at most this many degrees between segments.
const NODE_TOLERANCE_DEG: f64 = 1e-6;
const GRID_CELL_M: f64 = 100.0;

/// Immutable after construction.
#[derive(Clone, Debug)]
pub struct RoadNetwork {
    segments: Vec<RoadSegment>,
    index: HashMap<SegmentId, usize>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    outgoing: BTreeMap<NodeId, Vec<usize>>,
    nodes: BTreeMap<NodeId, LonLat>,
    projection: LocalProjection,
    projected: Vec<Vec<(f64, f64)>>,
    grid: HashMap<(i64, i64), Vec<usize>>,
}

impl RoadNetwork {
    /// Builds connectivity by joining `to_node` onto `from_node`.
    pub fn build(edge_list: Vec<RoadSegment>) -> Result<Self> {
        if edge_list.is_empty() {
            return Err(Error::EmptyNetwork);
        }
        let mut segments = edge_list;
        segments.sort_by_key(|s| s.id);
        for w in segments.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::DuplicateSegment(w[0].id));
            }
        }

        let mut nodes: BTreeMap<NodeId, (LonLat, SegmentId)> = BTreeMap::new();
        for s in &segments {
            if !(s.length > 0.0 && s.length.is_finite()) {
                return Err(Error::InvalidSegment {
                    id: s.id,
                    reason: format!("length {} is not positive", s.length),
                });
            }
            if s.geometry.len() < 2 {
                return Err(Error::InvalidSegment {
                    id: s.id,
                    reason: "geometry needs at least two points".into(),
                });
            }
            let ends = [(s.from_node, s.geometry[0]), (s.to_node, *s.geometry.last().unwrap())];
            for (node, pos) in ends {
                match nodes.get(&node) {
                    Some(&(known, first)) => {
                        if (known.lon - pos.lon).abs() > NODE_TOLERANCE_DEG
                            || (known.lat - pos.lat).abs() > NODE_TOLERANCE_DEG
                        {
                            return Err(Error::DanglingNode {
                                node,
                                first,
                                second: s.id,
                            });
                        }
                    }
                    None => {
                        nodes.insert(node, (pos, s.id));
                    }
                }
            }
        }
        let nodes: BTreeMap<NodeId, LonLat> = nodes.into_iter().map(|(k, (p, _))| (k, p)).collect();

        let index: HashMap<SegmentId, usize> = segments.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        let mut outgoing: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        let mut incoming: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (i, s) in segments.iter().enumerate() {
            outgoing.entry(s.from_node).or_default().push(i);
            incoming.entry(s.to_node).or_default().push(i);
        }
        // indices follow id order, so these lists are already sorted by id
        let succ: Vec<Vec<usize>> = segments
            .iter()
            .map(|s| outgoing.get(&s.to_node).cloned().unwrap_or_default())
            .collect();
        let pred: Vec<Vec<usize>> = segments
            .iter()
            .map(|s| incoming.get(&s.from_node).cloned().unwrap_or_default())
            .collect();

        let n = nodes.len() as f64;
        let origin = LonLat::new(
            nodes.values().map(|p| p.lon).sum::<f64>() / n,
            nodes.values().map(|p| p.lat).sum::<f64>() / n,
        );
        let projection = LocalProjection::new(origin);
        let projected: Vec<Vec<(f64, f64)>> = segments
            .iter()
            .map(|s| s.geometry.iter().map(|&p| projection.to_xy(p)).collect())
            .collect();
        let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, line) in projected.iter().enumerate() {
            let (x0, y0, x1, y1) = bbox(line);
            for cx in cell(x0)..=cell(x1) {
                for cy in cell(y0)..=cell(y1) {
                    grid.entry((cx, cy)).or_default().push(i);
                }
            }
        }

        Ok(Self {
            segments,
            index,
            succ,
            pred,
            outgoing,
            nodes,
            projection,
            projected,
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Segments in ascending id order.
    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> Option<&RoadSegment> {
        self.index.get(&id).map(|&i| &self.segments[i])
    }

    pub fn segment_at(&self, index: usize) -> &RoadSegment {
        &self.segments[index]
    }

    pub fn index_of(&self, id: SegmentId) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownSegment(id))
    }

    pub fn contains(&self, id: SegmentId) -> bool {
        self.index.contains_key(&id)
    }

    /// Successor segment indices, sorted by id.
    pub fn succ_indices(&self, index: usize) -> &[usize] {
        &self.succ[index]
    }

    pub fn pred_indices(&self, index: usize) -> &[usize] {
        &self.pred[index]
    }

    pub fn successors(&self, id: SegmentId) -> Result<Vec<SegmentId>> {
        let i = self.index_of(id)?;
        Ok(self.succ[i].iter().map(|&j| self.segments[j].id).collect())
    }

    pub fn predecessors(&self, id: SegmentId) -> Result<Vec<SegmentId>> {
        let i = self.index_of(id)?;
        Ok(self.pred[i].iter().map(|&j| self.segments[j].id).collect())
    }

    pub fn is_edge(&self, from: SegmentId, to: SegmentId) -> bool {
        match (self.segment(from), self.segment(to)) {
            (Some(a), Some(b)) => a.to_node == b.from_node,
            _ => false,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.succ.iter().map(Vec::len).sum()
    }

    pub fn nodes(&self) -> &BTreeMap<NodeId, LonLat> {
        &self.nodes
    }

    /// Segment indices leaving `node`, sorted by id.
    pub fn outgoing(&self, node: NodeId) -> &[usize] {
        self.outgoing.get(&node).map_or(&[], Vec::as_slice)
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    /// Every segment within `radius` meters of `p`, with its closest point.
    /// Distances are measured in the network's local projection.
    pub fn segments_near(&self, p: LonLat, radius: f64) -> Vec<(usize, Projection)> {
        let (x, y) = self.projection.to_xy(p);
        let mut seen: Vec<usize> = Vec::new();
        for cx in cell(x - radius)..=cell(x + radius) {
            for cy in cell(y - radius)..=cell(y + radius) {
                if let Some(list) = self.grid.get(&(cx, cy)) {
                    seen.extend(list);
                }
            }
        }
        seen.sort_unstable();
        seen.dedup();
        seen.into_iter()
            .filter_map(|i| {
                let pr = project_on_polyline((x, y), &self.projected[i]);
                (pr.distance <= radius).then_some((i, pr))
            })
            .collect()
    }

    /// Projected polyline of a segment, in meters.
    pub fn projected_geometry(&self, index: usize) -> &[(f64, f64)] {
        &self.projected[index]
    }
}

fn cell(v: f64) -> i64 {
    (v / GRID_CELL_M).floor() as i64
}

fn bbox(line: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    line.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
    )
}
