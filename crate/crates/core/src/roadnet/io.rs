//! Edge-list CSV: `id,from_node,to_node,length,geometry` with geometry as
//! `lon lat;lon lat;...`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NodeId, RoadSegment, SegmentId};
use crate::error::{Error, Result};
use crate::geo::LonLat;

#[derive(Serialize, Deserialize)]
struct Row {
    id: u64,
    from_node: u64,
    to_node: u64,
    length: f64,
    geometry: String,
}

fn parse_geometry(s: &str, line: usize) -> Result<Vec<LonLat>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|pair| {
            let mut it = pair.split_whitespace();
            let parse = |v: Option<&str>| -> Result<f64> {
                v.ok_or_else(|| Error::Parse {
                    line,
                    message: format!("bad coordinate pair `{pair}`"),
                })?
                .parse()
                .map_err(|e| Error::Parse {
                    line,
                    message: format!("`{pair}`: {e}"),
                })
            };
            let lon = parse(it.next())?;
            let lat = parse(it.next())?;
            if it.next().is_some() {
                return Err(Error::Parse {
                    line,
                    message: format!("extra values in `{pair}`"),
                });
            }
            Ok(LonLat { lon, lat })
        })
        .collect()
}

fn format_geometry(points: &[LonLat]) -> String {
    points
        .iter()
        .map(|p| format!("{} {}", p.lon, p.lat))
        .collect::<Vec<_>>()
        .join(";")
}

pub fn read_edge_list(r: impl Read) -> Result<Vec<RoadSegment>> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "from_node", "to_node", "length", "geometry"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header {:?}", headers),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rd.deserialize().enumerate() {
        let row: Row = row?;
        out.push(RoadSegment {
            id: SegmentId(row.id),
            from_node: NodeId(row.from_node),
            to_node: NodeId(row.to_node),
            length: row.length,
            geometry: parse_geometry(&row.geometry, i + 2)?,
        });
    }
    Ok(out)
}

pub fn write_edge_list(w: impl Write, segments: &[RoadSegment]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for s in segments {
        wr.serialize(Row {
            id: s.id.0,
            from_node: s.from_node.0,
            to_node: s.to_node.0,
            length: s.length,
            geometry: format_geometry(&s.geometry),
        })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_edge_list_file(path: impl AsRef<Path>) -> Result<Vec<RoadSegment>> {
    read_edge_list(std::fs::File::open(path)?)
}

pub fn write_edge_list_file(path: impl AsRef<Path>, segments: &[RoadSegment]) -> Result<()> {
    write_edge_list(std::io::BufWriter::new(std::fs::File::create(path)?), segments)
}
