//! HMM map matching of GPS traces onto road segments, with transition
//! distances looked up in a precomputed origin-destination table.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine, LonLat};
use crate::roadnet::{RoadNetwork, SegmentId, Ubodt};

pub const BEIJING_HEADER: [&str; 4] = ["id", "time", "lon", "lat"];
pub const CHENGDU_HEADER: [&str; 5] = ["id", "time", "lon", "lat", "occupancy"];
const TIME_FORMATS: [&str; 2] = ["%Y-%m-%d %H:%M:%S", "%Y/%m/%d %H:%M:%S"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpsRecord {
    pub vehicle_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub lon: f64,
    pub lat: f64,
    pub occupancy: Option<u8>,
}

impl GpsRecord {
    pub fn position(&self) -> LonLat {
        LonLat::new(self.lon, self.lat)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub rows: usize,
    pub malformed: usize,
    pub out_of_range: usize,
    /// Rows dropped because an earlier row had the same vehicle and time.
    pub duplicates: usize,
}

pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc().timestamp())
        .or_else(|| s.parse().ok())
}

pub fn format_timestamp(t: i64) -> String {
    chrono::DateTime::from_timestamp(t, 0)
        .map(|d| d.format(TIME_FORMATS[0]).to_string())
        .unwrap_or_else(|| t.to_string())
}

/// Per-vehicle, time-sorted traces. Bad rows are skipped and counted.
pub fn parse_gps_csv(r: impl Read) -> Result<(BTreeMap<String, Vec<GpsRecord>>, ParseStats)> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(r);
    let mut rows = rd.records();
    let mut stats = ParseStats::default();
    let mut out: BTreeMap<String, Vec<GpsRecord>> = BTreeMap::new();
    let Some(header) = rows.next() else {
        return Ok((out, stats));
    };
    let header = header?;
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    let with_occupancy = if fields == CHENGDU_HEADER {
        true
    } else if fields == BEIJING_HEADER {
        false
    } else {
        return Err(Error::Parse {
            line: 1,
            message: format!("unrecognized GPS header {fields:?}"),
        });
    };
    let width = if with_occupancy { 5 } else { 4 };
    for row in rows {
        stats.rows += 1;
        let Ok(row) = row else {
            stats.malformed += 1;
            continue;
        };
        if row.len() != width {
            stats.malformed += 1;
            continue;
        }
        let parsed = (|| {
            let lon: f64 = row[2].trim().parse().ok()?;
            let lat: f64 = row[3].trim().parse().ok()?;
            let occupancy = if with_occupancy {
                Some(row[4].trim().parse::<u8>().ok().filter(|o| *o <= 1)?)
            } else {
                None
            };
            Some(GpsRecord {
                vehicle_id: row[0].trim().to_string(),
                timestamp: parse_timestamp(&row[1])?,
                lon,
                lat,
                occupancy,
            })
        })();
        match parsed {
            None => stats.malformed += 1,
            Some(r) if !(-180.0..=180.0).contains(&r.lon) || !(-90.0..=90.0).contains(&r.lat) => {
                stats.out_of_range += 1
            }
            Some(r) => out.entry(r.vehicle_id.clone()).or_default().push(r),
        }
    }
    for trace in out.values_mut() {
        trace.sort_by_key(|r| r.timestamp);
        let before = trace.len();
        trace.dedup_by_key(|r| r.timestamp);
        stats.duplicates += before - trace.len();
    }
    Ok((out, stats))
}

pub fn write_gps_csv(w: impl Write, records: &[GpsRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(BEIJING_HEADER)?;
    for r in records {
        wr.write_record([
            r.vehicle_id.clone(),
            format_timestamp(r.timestamp),
            r.lon.to_string(),
            r.lat.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Drops fixes implying a speed above `max_speed` m/s from the last kept
/// fix. Returns the number removed.
pub fn filter_speed_outliers(trace: &mut Vec<GpsRecord>, max_speed: f64) -> usize {
    let before = trace.len();
    let mut kept: Vec<GpsRecord> = Vec::with_capacity(before);
    for r in trace.drain(..) {
        let ok = kept.last().is_none_or(|p| {
            let dt = (r.timestamp - p.timestamp) as f64;
            dt > 0.0 && haversine(p.position(), r.position()) / dt <= max_speed
        });
        if ok {
            kept.push(r);
        }
    }
    *trace = kept;
    before - trace.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub segment: SegmentId,
    pub proj_point: LonLat,
    /// Meters from the segment start, scaled to the segment's stated length.
    pub offset: f64,
    pub perp_dist: f64,
}

/// Up to `k` segments within `radius`, nearest first, ties by segment id.
pub fn candidates(network: &RoadNetwork, point: LonLat, radius: f64, k: usize) -> Vec<Candidate> {
    let mut c: Vec<Candidate> = network
        .segments_near(point, radius)
        .into_iter()
        .map(|(i, pr)| {
            let seg = network.segment_at(i);
            let frac = if pr.total > 0.0 { pr.along / pr.total } else { 0.0 };
            Candidate {
                segment: seg.id,
                proj_point: network.projection().to_lonlat(pr.point),
                offset: (frac * seg.length).clamp(0.0, seg.length),
                perp_dist: pr.distance,
            }
        })
        .collect();
    c.sort_by(|a, b| a.perp_dist.total_cmp(&b.perp_dist).then(a.segment.cmp(&b.segment)));
    c.truncate(k);
    c
}

pub fn emission_logprob(perp_dist: f64, sigma: f64) -> f64 {
    -perp_dist * perp_dist / (2.0 * sigma * sigma) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Driving distance from `a` to `b`, or `None` when the table has no route.
/// Moving backwards on one segment by at most `reverse_tolerance` meters
/// counts as standing still.
pub fn route_distance(
    ubodt: &Ubodt,
    network: &RoadNetwork,
    a: &Candidate,
    b: &Candidate,
    reverse_tolerance: f64,
) -> Option<f64> {
    if a.segment == b.segment && b.offset >= a.offset - reverse_tolerance {
        return Some((b.offset - a.offset).max(0.0));
    }
    let sa = network.segment(a.segment)?;
    let sb = network.segment(b.segment)?;
    let mid = ubodt.distance(sa.to_node, sb.from_node)?;
    Some(sa.length - a.offset + mid + b.offset)
}

fn route_ratio_logprob(route: Option<f64>, gc_dist: f64) -> f64 {
    match route {
        None => f64::NEG_INFINITY,
        Some(r) if r <= 0.0 => 0.0,
        Some(r) => (gc_dist / r).min(1.0).ln(),
    }
}

pub fn transition_logprob(ubodt: &Ubodt, network: &RoadNetwork, a: &Candidate, b: &Candidate, gc_dist: f64) -> f64 {
    route_ratio_logprob(route_distance(ubodt, network, a, b, 0.0), gc_dist)
}

/// Best state sequence through a lattice. `emission[t][j]` scores state `j`
/// at step `t`; `transition(t, i, j)` scores moving from state `i` at `t - 1`
/// to `j` at `t`. Among equal scores the state with the lower `key` wins.
/// Returns `None` when every path has score `-inf`.
pub fn viterbi<K: Ord>(
    emission: &[Vec<f64>],
    key: impl Fn(usize, usize) -> K,
    mut transition: impl FnMut(usize, usize, usize) -> f64,
) -> Option<(Vec<usize>, f64)> {
    let steps = emission.len();
    if steps == 0 {
        return None;
    }
    let mut score = emission[0].clone();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(steps);
    back.push(vec![0; score.len()]);
    for t in 1..steps {
        let mut next = vec![f64::NEG_INFINITY; emission[t].len()];
        let mut from = vec![usize::MAX; emission[t].len()];
        for (j, e) in emission[t].iter().enumerate() {
            for (i, s) in score.iter().enumerate() {
                if *s == f64::NEG_INFINITY {
                    continue;
                }
                let v = s + transition(t, i, j) + e;
                if v == f64::NEG_INFINITY {
                    continue;
                }
                if from[j] == usize::MAX || v > next[j] || (v == next[j] && key(t - 1, i) < key(t - 1, from[j])) {
                    next[j] = v;
                    from[j] = i;
                }
            }
        }
        score = next;
        back.push(from);
    }
    let last = steps - 1;
    let mut best: Option<usize> = None;
    for (j, s) in score.iter().enumerate() {
        if *s == f64::NEG_INFINITY {
            continue;
        }
        best = match best {
            Some(b) if score[b] > *s || (score[b] == *s && key(last, b) < key(last, j)) => Some(b),
            _ => Some(j),
        };
    }
    let mut j = best?;
    let total = score[j];
    let mut path = vec![j; steps];
    for t in (1..steps).rev() {
        j = back[t][j];
        path[t - 1] = j;
    }
    Some((path, total))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub radius: f64,
    pub k: usize,
    pub sigma: f64,
    pub reverse_tolerance: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            radius: 50.0,
            k: 8,
            sigma: 15.0,
            reverse_tolerance: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub segment_seq: Vec<SegmentId>,
    pub per_point: Vec<Candidate>,
    /// Index into the input trace of each entry of `per_point`.
    pub point_index: Vec<usize>,
    pub log_likelihood: f64,
}

/// Matches one trace. Points without candidates and transitions with no
/// route split the trace; each part with at least two points is matched on
/// its own.
pub fn match_trajectory(
    trace: &[GpsRecord],
    network: &RoadNetwork,
    ubodt: &Ubodt,
    params: &MatchParams,
) -> Vec<MatchResult> {
    let cands: Vec<Vec<Candidate>> = trace
        .iter()
        .map(|r| candidates(network, r.position(), params.radius, params.k))
        .collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start < trace.len() {
        if cands[start].is_empty() {
            start += 1;
            continue;
        }
        let mut end = start + 1;
        while end < trace.len() && !cands[end].is_empty() {
            end += 1;
        }
        match_run(trace, &cands, start, end, network, ubodt, params, &mut out);
        start = end;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn match_run(
    trace: &[GpsRecord],
    cands: &[Vec<Candidate>],
    start: usize,
    end: usize,
    network: &RoadNetwork,
    ubodt: &Ubodt,
    params: &MatchParams,
    out: &mut Vec<MatchResult>,
) {
    let mut s = start;
    while end - s >= 2 {
        // Longest prefix from `s` whose lattice stays connected.
        let mut reach: Vec<bool> = vec![true; cands[s].len()];
        let mut stop = s + 1;
        while stop < end {
            let gc = haversine(trace[stop - 1].position(), trace[stop].position());
            let next: Vec<bool> = cands[stop]
                .iter()
                .map(|b| {
                    cands[stop - 1].iter().zip(&reach).any(|(a, r)| {
                        *r && route_distance(ubodt, network, a, b, params.reverse_tolerance).is_some()
                            && gc.is_finite()
                    })
                })
                .collect();
            if !next.iter().any(|r| *r) {
                break;
            }
            reach = next;
            stop += 1;
        }
        if stop - s >= 2 {
            out.push(match_window(trace, cands, s, stop, network, ubodt, params));
        }
        s = stop;
    }
}

fn match_window(
    trace: &[GpsRecord],
    cands: &[Vec<Candidate>],
    start: usize,
    end: usize,
    network: &RoadNetwork,
    ubodt: &Ubodt,
    params: &MatchParams,
) -> MatchResult {
    let layers = &cands[start..end];
    let emission: Vec<Vec<f64>> = layers
        .iter()
        .map(|l| l.iter().map(|c| emission_logprob(c.perp_dist, params.sigma)).collect())
        .collect();
    let gc: Vec<f64> = (start + 1..end)
        .map(|t| haversine(trace[t - 1].position(), trace[t].position()))
        .collect();
    let (path, ll) = viterbi(
        &emission,
        |t, i| layers[t][i].segment,
        |t, i, j| {
            let route = route_distance(ubodt, network, &layers[t - 1][i], &layers[t][j], params.reverse_tolerance);
            route_ratio_logprob(route, gc[t - 1])
        },
    )
    .expect("window lattice is connected by construction");
    let per_point: Vec<Candidate> = path.iter().enumerate().map(|(t, &j)| layers[t][j]).collect();
    MatchResult {
        segment_seq: expand_route(&per_point, network, ubodt),
        per_point,
        point_index: (start..end).collect(),
        log_likelihood: ll,
    }
}

/// Segment sequence visited by consecutive chosen candidates, filling gaps
/// with table paths and collapsing repeats.
pub fn expand_route(per_point: &[Candidate], network: &RoadNetwork, ubodt: &Ubodt) -> Vec<SegmentId> {
    let mut seq: Vec<SegmentId> = Vec::new();
    let push = |seq: &mut Vec<SegmentId>, s: SegmentId| {
        if seq.last() != Some(&s) {
            seq.push(s);
        }
    };
    for (i, c) in per_point.iter().enumerate() {
        if i > 0 {
            let a = &per_point[i - 1];
            if a.segment != c.segment {
                let (Some(sa), Some(sb)) = (network.segment(a.segment), network.segment(c.segment)) else {
                    continue;
                };
                for s in ubodt.path(sa.to_node, sb.from_node).unwrap_or_default() {
                    push(&mut seq, s);
                }
            }
        }
        push(&mut seq, c.segment);
    }
    seq
}

/// Fraction of `truth` recovered in order: LCS length over truth length.
pub fn recovery(matched: &[SegmentId], truth: &[SegmentId]) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let mut row = vec![0usize; matched.len() + 1];
    for t in truth {
        let mut diag = 0;
        for (j, m) in matched.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if t == m { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[matched.len()] as f64 / truth.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchSummary {
    pub vehicles: usize,
    pub points: usize,
    pub speed_outliers: usize,
    pub parts: usize,
    pub vehicles_unmatched: usize,
    pub points_unmatched: usize,
    pub segments: usize,
    pub mean_log_likelihood: f64,
    pub parse: ParseStats,
}

/// Matched parts per vehicle, in vehicle order.
pub type Matched = Vec<(String, Vec<MatchResult>)>;

/// Matches all traces in parallel after speed filtering.
pub fn match_all(
    traces: &BTreeMap<String, Vec<GpsRecord>>,
    network: &RoadNetwork,
    ubodt: &Ubodt,
    params: &MatchParams,
    max_speed: f64,
) -> (Matched, MatchSummary) {
    let list: Vec<(&String, &Vec<GpsRecord>)> = traces.iter().collect();
    let results: Vec<(String, Vec<MatchResult>, usize, usize)> = list
        .par_iter()
        .map(|(id, trace)| {
            let mut t = (*trace).clone();
            let removed = filter_speed_outliers(&mut t, max_speed);
            let parts = match_trajectory(&t, network, ubodt, params);
            ((*id).clone(), parts, removed, t.len())
        })
        .collect();
    let mut summary = MatchSummary {
        vehicles: results.len(),
        ..Default::default()
    };
    let mut ll = 0.0;
    let mut matched = Vec::with_capacity(results.len());
    for (id, parts, removed, n) in results {
        summary.points += n + removed;
        summary.speed_outliers += removed;
        summary.parts += parts.len();
        summary.points_unmatched += n - parts.iter().map(|p| p.per_point.len()).sum::<usize>();
        summary.segments += parts.iter().map(|p| p.segment_seq.len()).sum::<usize>();
        if parts.is_empty() {
            summary.vehicles_unmatched += 1;
        }
        ll += parts.iter().map(|p| p.log_likelihood).sum::<f64>();
        matched.push((id, parts));
    }
    if summary.parts > 0 {
        summary.mean_log_likelihood = ll / summary.parts as f64;
    }
    (matched, summary)
}

/// Part label: the vehicle id for the first part, `id#k` for later ones.
pub fn part_label(vehicle: &str, part: usize) -> String {
    if part == 0 {
        vehicle.to_string()
    } else {
        format!("{vehicle}#{part}")
    }
}

/// CSV `vehicle_id,seq_index,segment_id`.
pub fn write_matches(w: impl Write, matched: &Matched) -> Result<()> {
    let seqs: Vec<(String, Vec<SegmentId>)> = matched
        .iter()
        .flat_map(|(id, parts)| {
            parts
                .iter()
                .enumerate()
                .map(move |(k, p)| (part_label(id, k), p.segment_seq.clone()))
        })
        .collect();
    write_sequences(w, &seqs)
}

/// Labeled segment sequences in the matches CSV layout.
pub fn write_sequences(w: impl Write, seqs: &[(String, Vec<SegmentId>)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["vehicle_id", "seq_index", "segment_id"])?;
    for (label, seq) in seqs {
        for (i, s) in seq.iter().enumerate() {
            wr.write_record([label.clone(), i.to_string(), s.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads a matches CSV back into per-label sequences, in file order.
pub fn read_matches(r: impl Read) -> Result<Vec<(String, Vec<SegmentId>)>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: Vec<(String, Vec<SegmentId>)> = Vec::new();
    for (line, row) in rd.deserialize().enumerate() {
        let (id, idx, seg): (String, usize, u64) = row?;
        if out.last().is_none_or(|(l, _)| *l != id) {
            out.push((id.clone(), Vec::new()));
        }
        let seq = &mut out.last_mut().expect("pushed above").1;
        if idx != seq.len() {
            return Err(Error::Parse {
                line: line + 2,
                message: format!("seq_index {idx} out of order for {id}"),
            });
        }
        seq.push(SegmentId(seg));
    }
    Ok(out)
}
