//! GeoJSON rendering of a history, its true continuation and a prediction.

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::roadnet::{RoadNetwork, SegmentId};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    History,
    Target,
    Predicted,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::History => "history",
            Role::Target => "target",
            Role::Predicted => "predicted",
        }
    }

    /// Purple history, green target, red prediction.
    pub fn stroke(self) -> &'static str {
        match self {
            Role::History => "#800080",
            Role::Target => "#008000",
            Role::Predicted => "#ff0000",
        }
    }
}

/// A FeatureCollection with one LineString per segment. Each feature carries
/// `role`, `stroke`, `segment_id` and its `position` within the role.
pub fn export_geojson(
    network: &RoadNetwork,
    history: &[SegmentId],
    target: &[SegmentId],
    predicted: &[SegmentId],
) -> Result<Value> {
    let mut features = Vec::new();
    for (role, seq) in [(Role::History, history), (Role::Target, target), (Role::Predicted, predicted)] {
        for (pos, &id) in seq.iter().enumerate() {
            let seg = network.segment(id).ok_or(Error::UnknownSegment(id))?;
            let coords: Vec<[f64; 2]> = seg.geometry.iter().map(|p| [p.lon, p.lat]).collect();
            features.push(json!({
                "type": "Feature",
                "geometry": { "type": "LineString", "coordinates": coords },
                "properties": {
                    "role": role.name(),
                    "stroke": role.stroke(),
                    "segment_id": id.0,
                    "position": pos,
                },
            }));
        }
    }
    Ok(json!({ "type": "FeatureCollection", "features": features }))
}
