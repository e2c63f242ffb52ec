//! Geographic primitives: points, local metric projection, point-to-segment
//! distances and polygon containment.
//!
//! Metric distances between nearby points use an equirectangular projection
//! centred on a reference point. At city scale the distortion is far below
//! GPS noise. Great-circle lengths between graph nodes use haversine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in meters (IUGG).
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub const fn new(lat: f64, lon: f64) -> Self {
        GeoPoint { lat, lon }
    }

    /// Builds a point, rejecting non-finite or out-of-range coordinates.
    pub fn checked(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(Error::InvalidInput(format!(
                "coordinate out of range: lat={lat}, lon={lon}"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Equirectangular projection around a fixed origin, in meters
/// (x = easting, y = northing).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalProjection {
    pub fn new(origin: GeoPoint) -> Self {
        LocalProjection {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn to_xy(&self, p: GeoPoint) -> (f64, f64) {
        let x = EARTH_RADIUS_M * (p.lon - self.origin.lon).to_radians() * self.cos_lat;
        let y = EARTH_RADIUS_M * (p.lat - self.origin.lat).to_radians();
        (x, y)
    }

    pub fn from_xy(&self, x: f64, y: f64) -> GeoPoint {
        let lat = self.origin.lat + (y / EARTH_RADIUS_M).to_degrees();
        let lon = self.origin.lon + (x / (EARTH_RADIUS_M * self.cos_lat)).to_degrees();
        GeoPoint { lat, lon }
    }

    /// Planar distance between two points in this projection.
    pub fn distance(&self, a: GeoPoint, b: GeoPoint) -> f64 {
        let (ax, ay) = self.to_xy(a);
        let (bx, by) = self.to_xy(b);
        (ax - bx).hypot(ay - by)
    }
}

/// Distance from `p` to segment `a`–`b` in the plane, plus the clamped
/// parameter `t ∈ [0, 1]` of the closest point.
pub fn point_segment_distance_xy(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = a.0 + t * dx;
    let cy = a.1 + t * dy;
    ((p.0 - cx).hypot(p.1 - cy), t)
}

/// Distance in meters from `p` to segment `a`–`b`, projected around `p`.
pub fn point_to_segment_distance(p: GeoPoint, a: GeoPoint, b: GeoPoint) -> f64 {
    let proj = LocalProjection::new(p);
    point_segment_distance_xy((0.0, 0.0), proj.to_xy(a), proj.to_xy(b)).0
}

/// Minimum distance in meters from `p` to any segment of `polyline`.
pub fn point_to_polyline_distance(p: GeoPoint, polyline: &[GeoPoint]) -> f64 {
    let proj = LocalProjection::new(p);
    match polyline {
        [] => f64::INFINITY,
        [only] => {
            let (x, y) = proj.to_xy(*only);
            x.hypot(y)
        }
        _ => polyline
            .windows(2)
            .map(|w| point_segment_distance_xy((0.0, 0.0), proj.to_xy(w[0]), proj.to_xy(w[1])).0)
            .fold(f64::INFINITY, f64::min),
    }
}

/// Length of a polyline in meters, summing haversine segment lengths.
pub fn polyline_length(polyline: &[GeoPoint]) -> f64 {
    polyline.windows(2).map(|w| haversine(w[0], w[1])).sum()
}

/// Even-odd containment test treating (lon, lat) as planar coordinates.
pub fn point_in_ring(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (yi, xi) = (ring[i].lat, ring[i].lon);
        let (yj, xj) = (ring[j].lat, ring[j].lon);
        if (yi > p.lat) != (yj > p.lat) {
            let x_cross = xi + (p.lat - yi) / (yj - yi) * (xj - xi);
            if p.lon < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orientation(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

/// Closed-segment intersection test in the (lon, lat) plane.
pub fn segments_intersect(a1: GeoPoint, a2: GeoPoint, b1: GeoPoint, b2: GeoPoint) -> bool {
    let d1 = orientation(b1, b2, a1);
    let d2 = orientation(b1, b2, a2);
    let d3 = orientation(a1, a2, b1);
    let d4 = orientation(a1, a2, b2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(b1, b2, a1))
        || (d2 == 0.0 && on_segment(b1, b2, a2))
        || (d3 == 0.0 && on_segment(a1, a2, b1))
        || (d4 == 0.0 && on_segment(a1, a2, b2))
}

/// True when no two non-adjacent edges of the closed ring touch.
pub fn ring_is_simple(ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}
