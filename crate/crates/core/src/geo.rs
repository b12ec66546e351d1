//! Trajectory data model, Web Mercator projection and dataset-level filters.
//!
//! Every coordinate inside the crate is in projected meters. Degrees only
//! appear at the file boundary (see [`crate::io`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sphere radius used by spherical Web Mercator.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Latitude beyond which Web Mercator is undefined for our purposes.
pub const MAX_MERCATOR_LAT: f64 = 85.05;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Euclidean distance from `self` to the closed segment `a`-`b`.
    ///
    /// A zero-length segment degenerates to the point distance.
    pub fn distance_to_segment(&self, a: &Point, b: &Point) -> f64 {
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        let len2 = dx * dx + dy * dy;
        if len2 == 0.0 {
            return self.distance(a);
        }
        let t = (((self.x - a.x) * dx + (self.y - a.y) * dy) / len2).clamp(0.0, 1.0);
        let px = a.x + t * dx;
        let py = a.y + t * dy;
        // the endpoint terms make a vertex's distance to its own segment exactly 0
        (self.x - px).hypot(self.y - py).min(self.distance(a)).min(self.distance(b))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Point {
        Point::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<Point>) -> Self {
        Trajectory {
            id: id.into(),
            points,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of consecutive point distances, in meters.
    pub fn length_m(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }

    /// Same id, new point sequence.
    pub fn with_points(&self, points: Vec<Point>) -> Trajectory {
        Trajectory {
            id: self.id.clone(),
            points,
        }
    }

    pub(crate) fn require_len(&self, min: usize, what: &str) -> Result<()> {
        if self.points.len() < min {
            return Err(Error::input(format!(
                "{what}: trajectory '{}' has {} points, need at least {min}",
                self.id,
                self.points.len()
            )));
        }
        Ok(())
    }
}

/// Axis-aligned bounding box in projected meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Point,
    pub max: Point,
}

impl BBox {
    pub fn new(min: Point, max: Point) -> Self {
        BBox { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    /// Tight box around all points of all trajectories; `None` when there are no points.
    pub fn of_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Option<BBox> {
        let mut it = trajs.into_iter().flat_map(|t| t.points.iter());
        let first = *it.next()?;
        let mut bb = BBox::new(first, first);
        for p in it {
            bb.min.x = bb.min.x.min(p.x);
            bb.min.y = bb.min.y.min(p.y);
            bb.max.x = bb.max.x.max(p.x);
            bb.max.y = bb.max.y.max(p.y);
        }
        Some(bb)
    }

    pub fn expand(&self, margin: f64) -> BBox {
        BBox::new(
            self.min.translate(-margin, -margin),
            self.max.translate(margin, margin),
        )
    }
}

/// Spherical Web Mercator forward projection.
pub fn project(lon: f64, lat: f64) -> Result<Point> {
    if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
        return Err(Error::input(format!("longitude {lon} outside [-180, 180]")));
    }
    if !lat.is_finite() || lat.abs() >= MAX_MERCATOR_LAT {
        return Err(Error::input(format!(
            "latitude {lat} outside (-{MAX_MERCATOR_LAT}, {MAX_MERCATOR_LAT})"
        )));
    }
    let x = EARTH_RADIUS_M * lon.to_radians();
    // atanh(sin φ) equals ln tan(π/4 + φ/2) and is exactly zero on the equator
    let y = EARTH_RADIUS_M * lat.to_radians().sin().atanh();
    Ok(Point::new(x, y))
}

/// Inverse of [`project`], returning `(lon, lat)` in degrees.
pub fn unproject(p: Point) -> (f64, f64) {
    let lon = (p.x / EARTH_RADIUS_M).to_degrees();
    let lat = (p.y / EARTH_RADIUS_M).sinh().atan().to_degrees();
    (lon, lat)
}

/// Keeps trajectories with `min_pts <= len <= max_pts`, preserving order.
pub fn preprocess_filter(trajs: &[Trajectory], min_pts: usize, max_pts: usize) -> Vec<Trajectory> {
    trajs
        .iter()
        .filter(|t| (min_pts..=max_pts).contains(&t.len()))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub mean_points: f64,
    pub min_length_km: f64,
    pub max_length_km: f64,
    pub mean_length_km: f64,
}

pub fn dataset_stats(trajs: &[Trajectory]) -> Result<DatasetStats> {
    if trajs.is_empty() {
        return Err(Error::input("dataset_stats on an empty dataset"));
    }
    let mut stats = DatasetStats {
        count: trajs.len(),
        min_points: usize::MAX,
        max_points: 0,
        mean_points: 0.0,
        min_length_km: f64::INFINITY,
        max_length_km: 0.0,
        mean_length_km: 0.0,
    };
    let mut pts_sum = 0usize;
    let mut len_sum = 0.0;
    for t in trajs {
        let km = t.length_m() / 1000.0;
        stats.min_points = stats.min_points.min(t.len());
        stats.max_points = stats.max_points.max(t.len());
        stats.min_length_km = stats.min_length_km.min(km);
        stats.max_length_km = stats.max_length_km.max(km);
        pts_sum += t.len();
        len_sum += km;
    }
    let n = trajs.len() as f64;
    stats.mean_points = pts_sum as f64 / n;
    // clamp guards the last-ulp case where a mean of identical values drifts outside [min, max]
    stats.mean_length_km = (len_sum / n).clamp(stats.min_length_km, stats.max_length_km);
    Ok(stats)
}
