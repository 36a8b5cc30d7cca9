//! Spherical distances and a local planar projection for small extents.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LonLat {
    pub lon: f64,
    pub lat: f64,
}

impl LonLat {
    pub const fn new(lon: f64, lat: f64) -> Self {
        Self { lon, lat }
    }
}

/// Great-circle distance in meters.
pub fn haversine(a: LonLat, b: LonLat) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

pub fn polyline_length(points: &[LonLat]) -> f64 {
    points.windows(2).map(|w| haversine(w[0], w[1])).sum()
}

/// Equirectangular projection around a reference latitude, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    origin: LonLat,
    meters_per_deg_lon: f64,
    meters_per_deg_lat: f64,
}

impl LocalProjection {
    pub fn new(origin: LonLat) -> Self {
        let meters_per_deg_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Self {
            origin,
            meters_per_deg_lat,
            meters_per_deg_lon: meters_per_deg_lat * origin.lat.to_radians().cos(),
        }
    }

    pub fn origin(&self) -> LonLat {
        self.origin
    }

    pub fn to_xy(&self, p: LonLat) -> (f64, f64) {
        (
            (p.lon - self.origin.lon) * self.meters_per_deg_lon,
            (p.lat - self.origin.lat) * self.meters_per_deg_lat,
        )
    }

    pub fn to_lonlat(&self, (x, y): (f64, f64)) -> LonLat {
        LonLat {
            lon: self.origin.lon + x / self.meters_per_deg_lon,
            lat: self.origin.lat + y / self.meters_per_deg_lat,
        }
    }

    /// Moves `p` by `(dx, dy)` meters east/north.
    pub fn offset(&self, p: LonLat, dx: f64, dy: f64) -> LonLat {
        let (x, y) = self.to_xy(p);
        self.to_lonlat((x + dx, y + dy))
    }
}

/// Closest point on a projected polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub point: (f64, f64),
    pub distance: f64,
    /// Along-line distance from the first vertex, in projected meters.
    pub along: f64,
    pub total: f64,
}

pub fn project_on_polyline(p: (f64, f64), line: &[(f64, f64)]) -> Projection {
    let mut best = Projection {
        point: line[0],
        distance: f64::INFINITY,
        along: 0.0,
        total: 0.0,
    };
    let mut acc = 0.0;
    for w in line.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let len = len2.sqrt();
        let t = if len2 > 0.0 {
            (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = (a.0 + t * dx, a.1 + t * dy);
        let d = ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
        if d < best.distance {
            best = Projection {
                point: q,
                distance: d,
                along: acc + t * len,
                total: 0.0,
            };
        }
        acc += len;
    }
    best.total = acc;
    best
}
