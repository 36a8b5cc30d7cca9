//! Synthetic grid road networks, turn-policy random walks and noisy GPS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{LocalProjection, LonLat};
use crate::mapmatch::GpsRecord;
use crate::roadnet::{NodeId, RoadNetwork, RoadSegment, SegmentId};

/// 2008-02-02 00:00:00 UTC.
const BASE_TIME: i64 = 1_201_910_400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Intersections per side.
    pub grid_n: usize,
    /// Meters between neighboring intersections.
    pub spacing: f64,
    pub n_traj: usize,
    /// Segments per trajectory.
    pub traj_len: usize,
    /// Probabilities of going straight, left and right.
    pub policy: [f64; 3],
    pub gps_noise_sigma: f64,
    /// Seconds between fixes.
    pub gps_interval: f64,
    /// Vehicle speed in m/s.
    pub speed: f64,
    pub origin: LonLat,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            grid_n: 8,
            spacing: 100.0,
            n_traj: 2000,
            traj_len: 20,
            policy: [0.6, 0.2, 0.2],
            gps_noise_sigma: 10.0,
            gps_interval: 3.0,
            speed: 10.0,
            origin: LonLat::new(116.3, 39.9),
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 2 {
            return Err(Error::invalid(format!("grid_n must be at least 2, got {}", self.grid_n)));
        }
        if self.policy.iter().any(|p| !(*p >= 0.0)) || (self.policy.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("policy {:?} must be probabilities summing to 1", self.policy)));
        }
        if !(self.spacing > 0.0) || !(self.speed > 0.0) || !(self.gps_interval > 0.0) || !(self.gps_noise_sigma >= 0.0) {
            return Err(Error::invalid("spacing, speed and gps_interval must be positive, noise non-negative"));
        }
        if self.traj_len == 0 {
            return Err(Error::invalid("traj_len must be at least 1"));
        }
        Ok(())
    }
}

/// Node id of intersection `(row, col)`.
pub fn grid_node(grid_n: usize, row: usize, col: usize) -> NodeId {
    NodeId((row * grid_n + col) as u64)
}

/// Grid of two-way streets. Each undirected street `e` (horizontal streets
/// first, row-major, then vertical ones) yields segments `2e` (towards
/// increasing column or row) and `2e + 1` (the reverse).
pub fn synth_network(spec: &SynthSpec) -> Result<Vec<RoadSegment>> {
    spec.validate()?;
    let n = spec.grid_n;
    let proj = LocalProjection::new(spec.origin);
    let pos = |r: usize, c: usize| proj.to_lonlat((c as f64 * spec.spacing, r as f64 * spec.spacing));
    let mut streets: Vec<((usize, usize), (usize, usize))> = Vec::new();
    for r in 0..n {
        for c in 0..n - 1 {
            streets.push(((r, c), (r, c + 1)));
        }
    }
    for r in 0..n - 1 {
        for c in 0..n {
            streets.push(((r, c), (r + 1, c)));
        }
    }
    let mut out = Vec::with_capacity(streets.len() * 2);
    for (e, (a, b)) in streets.into_iter().enumerate() {
        for (k, (p, q)) in [(a, b), (b, a)].into_iter().enumerate() {
            out.push(RoadSegment {
                id: SegmentId((2 * e + k) as u64),
                from_node: grid_node(n, p.0, p.1),
                to_node: grid_node(n, q.0, q.1),
                length: spec.spacing,
                geometry: vec![pos(p.0, p.1), pos(q.0, q.1)],
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    Straight,
    Left,
    Right,
}

/// Exit direction: the last piece of the polyline.
fn heading(network: &RoadNetwork, index: usize) -> (f64, f64) {
    let g = network.projected_geometry(index);
    let (a, b) = (g[g.len() - 2], g[g.len() - 1]);
    (b.0 - a.0, b.1 - a.1)
}

fn entry_heading(network: &RoadNetwork, index: usize) -> (f64, f64) {
    let g = network.projected_geometry(index);
    (g[1].0 - g[0].0, g[1].1 - g[0].1)
}

/// Turn class from segment `from` onto `to`: straight within 45 degrees,
/// otherwise left for counter-clockwise and right for clockwise.
pub fn classify_turn(network: &RoadNetwork, from: usize, to: usize) -> Turn {
    let (ax, ay) = heading(network, from);
    let (bx, by) = entry_heading(network, to);
    let angle = (ax * by - ay * bx).atan2(ax * bx + ay * by);
    if angle.abs() < std::f64::consts::FRAC_PI_4 {
        Turn::Straight
    } else if angle > 0.0 {
        Turn::Left
    } else {
        Turn::Right
    }
}

fn is_u_turn(network: &RoadNetwork, from: usize, to: usize) -> bool {
    network.segment_at(to).to_node == network.segment_at(from).from_node
}

/// Successor choices from segment `index`: each non-U-turn successor with
/// its turn class. When there is none, the U-turn is the only choice.
pub fn choices(network: &RoadNetwork, index: usize) -> Vec<(usize, Turn)> {
    let succ = network.succ_indices(index);
    let forward: Vec<(usize, Turn)> = succ
        .iter()
        .filter(|&&s| !is_u_turn(network, index, s))
        .map(|&s| (s, classify_turn(network, index, s)))
        .collect();
    if forward.is_empty() {
        succ.iter().map(|&s| (s, Turn::Straight)).collect()
    } else {
        forward
    }
}

/// One step of the walk: a turn class drawn from `policy` restricted to the
/// available classes, then a uniform choice within that class.
pub fn step(network: &RoadNetwork, index: usize, policy: &[f64; 3], rng: &mut impl Rng) -> Option<usize> {
    let opts = choices(network, index);
    if opts.is_empty() {
        return None;
    }
    let classes = [Turn::Straight, Turn::Left, Turn::Right];
    let weights: Vec<f64> = classes
        .iter()
        .zip(policy)
        .map(|(c, p)| if opts.iter().any(|(_, t)| t == c) { *p } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let class = if total > 0.0 {
        let mut u = rng.random::<f64>() * total;
        let mut pick = classes.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if *w > 0.0 && u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        while weights[pick] == 0.0 {
            pick -= 1;
        }
        classes[pick]
    } else {
        opts[rng.random_range(0..opts.len())].1
    };
    let within: Vec<usize> = opts.iter().filter(|(_, t)| *t == class).map(|(s, _)| *s).collect();
    Some(within[rng.random_range(0..within.len())])
}

/// Random walks of `spec.traj_len` segments from uniform start segments.
pub fn synth_trajectories(spec: &SynthSpec, network: &RoadNetwork) -> Result<Vec<Vec<SegmentId>>> {
    spec.validate()?;
    if network.is_empty() {
        return Err(Error::EmptyNetwork);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_traj);
    let mut attempts = 0usize;
    while out.len() < spec.n_traj {
        attempts += 1;
        if attempts > 100 * spec.n_traj.max(1) {
            return Err(Error::invalid("network has too many dead ends for the requested walk length"));
        }
        let mut at = rng.random_range(0..network.len());
        let mut walk = vec![at];
        while walk.len() < spec.traj_len {
            match step(network, at, &spec.policy, &mut rng) {
                Some(next) => {
                    walk.push(next);
                    at = next;
                }
                None => break,
            }
        }
        if walk.len() == spec.traj_len {
            out.push(walk.into_iter().map(|i| network.segment_at(i).id).collect());
        }
    }
    Ok(out)
}

/// Fixes along a walk every `gps_interval` seconds at `speed`, starting at
/// a random point of the first segment's first half and ending at the end of
/// the last segment, with isotropic Gaussian noise.
pub fn synth_gps(
    spec: &SynthSpec,
    network: &RoadNetwork,
    walks: &[Vec<SegmentId>],
    seed: u64,
) -> Result<Vec<GpsRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.gps_noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let proj = network.projection();
    let mut out = Vec::new();
    for (v, walk) in walks.iter().enumerate() {
        let mut pieces: Vec<((f64, f64), (f64, f64), f64)> = Vec::new();
        for id in walk {
            let g = network.projected_geometry(network.index_of(*id)?);
            for w in g.windows(2) {
                let len = ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt();
                pieces.push((w[0], w[1], len));
            }
        }
        let total: f64 = pieces.iter().map(|p| p.2).sum();
        let first = pieces.first().map_or(0.0, |p| p.2);
        let step = spec.speed * spec.gps_interval;
        let mut s = rng.random::<f64>() * first * 0.5;
        let mut k = 0usize;
        loop {
            let at = s.min(total);
            let (mut acc, mut p) = (0.0, pieces[0].0);
            for (a, b, len) in &pieces {
                if at <= acc + len {
                    let t = if *len > 0.0 { (at - acc) / len } else { 0.0 };
                    p = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
                    break;
                }
                acc += len;
                p = *b;
            }
            let ll = proj.to_lonlat((p.0 + noise.sample(&mut rng), p.1 + noise.sample(&mut rng)));
            out.push(GpsRecord {
                vehicle_id: v.to_string(),
                timestamp: BASE_TIME + (v as i64) * 100_000 + (k as f64 * spec.gps_interval).round() as i64,
                lon: ll.lon,
                lat: ll.lat,
                occupancy: None,
            });
            if at >= total {
                break;
            }
            s += step;
            k += 1;
        }
    }
    Ok(out)
}
