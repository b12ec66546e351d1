//! Trajectory augmentation operators used to build contrastive views.
//!
//! All operators are pure given `(input, parameters, rng)`: none reorders
//! points, and apart from shifting they return subsequences of the input.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Point, Trajectory};

/// Smallest offset scale used when a zero `rho_m` is requested.
pub const MIN_SHIFT_M: f64 = 1e-9;

// Products like 0.7 * 10 land a few ulps off the integer; snap before rounding.
const ROUND_TOL: f64 = 1e-9;

pub(crate) fn floor_tol(x: f64) -> f64 {
    (x + ROUND_TOL).floor()
}

pub(crate) fn ceil_tol(x: f64) -> f64 {
    (x - ROUND_TOL).ceil()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Raw,
    Shift,
    Mask,
    Truncate,
    Simplify,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "raw" => Method::Raw,
            "shift" => Method::Shift,
            "mask" => Method::Mask,
            "truncate" => Method::Truncate,
            "simplify" => Method::Simplify,
            other => return Err(Error::config(format!("unknown augmentation '{other}'"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Raw => "raw",
            Method::Shift => "shift",
            Method::Mask => "mask",
            Method::Truncate => "truncate",
            Method::Simplify => "simplify",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub method: Method,
    /// Maximum per-coordinate shift, meters.
    pub rho_m: f64,
    /// Std-dev of the unit Gaussian before truncation to [-1, 1].
    pub sigma: f64,
    /// Fraction of points removed by masking.
    pub rho_d: f64,
    /// Fraction of points kept by truncation.
    pub rho_b: f64,
    /// Douglas-Peucker tolerance, meters.
    pub rho_p: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            method: Method::Raw,
            rho_m: 100.0,
            sigma: 0.5,
            rho_d: 0.3,
            rho_b: 0.7,
            rho_p: 100.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn with_method(method: Method) -> Self {
        AugmentConfig {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v < 1.0;
        if !in_unit(self.rho_d) || !in_unit(self.rho_b) {
            return Err(Error::config(format!(
                "rho_d ({}) and rho_b ({}) must lie in (0, 1)",
                self.rho_d, self.rho_b
            )));
        }
        if !(self.rho_m > 0.0 && self.rho_p > 0.0 && self.sigma > 0.0) {
            return Err(Error::config("rho_m, rho_p and sigma must be positive"));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, t: &Trajectory, rng: &mut R) -> Result<Trajectory> {
        match self.method {
            Method::Raw => Ok(t.clone()),
            Method::Shift => point_shift(t, self.rho_m, self.sigma, rng),
            Method::Mask => point_mask(t, self.rho_d, rng),
            Method::Truncate => truncate(t, self.rho_b, rng),
            Method::Simplify => simplify_dp(t, self.rho_p),
        }
    }
}

/// Draws from N(0, sigma^2) restricted to [-1, 1] by rejection.
pub fn bounded_unit_gaussian<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    let normal = Normal::new(0.0, sigma).expect("sigma must be positive and finite");
    loop {
        let u: f64 = normal.sample(rng);
        if (-1.0..=1.0).contains(&u) {
            return u;
        }
    }
}

/// Offsets every coordinate by `rho_m * u`, `u` a bounded Gaussian draw.
pub fn point_shift<R: Rng + ?Sized>(
    t: &Trajectory,
    rho_m: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    t.require_len(2, "point_shift")?;
    if !(sigma > 0.0) {
        return Err(Error::input(format!("sigma must be positive, got {sigma}")));
    }
    let scale = rho_m.max(MIN_SHIFT_M);
    Ok(t.with_points(shift_points(&t.points, scale, sigma, rng)))
}

pub(crate) fn shift_point<R: Rng + ?Sized>(p: &Point, scale: f64, sigma: f64, rng: &mut R) -> Point {
    let dx = scale * bounded_unit_gaussian(sigma, rng);
    let dy = scale * bounded_unit_gaussian(sigma, rng);
    p.translate(dx, dy)
}

fn shift_points<R: Rng + ?Sized>(pts: &[Point], scale: f64, sigma: f64, rng: &mut R) -> Vec<Point> {
    pts.iter().map(|p| shift_point(p, scale, sigma, rng)).collect()
}

/// Number of points kept by [`point_mask`].
pub fn masked_len(n: usize, rho_d: f64) -> usize {
    floor_tol((1.0 - rho_d) * n as f64).max(0.0) as usize
}

/// Keeps a uniformly random subset of `floor((1 - rho_d) * n)` points, in order.
pub fn point_mask<R: Rng + ?Sized>(t: &Trajectory, rho_d: f64, rng: &mut R) -> Result<Trajectory> {
    t.require_len(2, "point_mask")?;
    let n = t.len();
    let keep = masked_len(n, rho_d).min(n);
    if keep < 2 {
        return Err(Error::input(format!(
            "point_mask would leave {keep} points (|T|={n}, rho_d={rho_d})"
        )));
    }
    let mut idx = index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(t.with_points(idx.into_iter().map(|i| t.points[i]).collect()))
}

/// 0-based inclusive `(start, end)` of the truncation window for a given
/// 1-based `start`.
pub fn truncation_window(n: usize, rho_b: f64, start_1based: usize) -> (usize, usize) {
    let end_1based = (floor_tol(start_1based as f64 + rho_b * n as f64) as usize).min(n);
    (start_1based - 1, end_1based.max(start_1based) - 1)
}

/// Largest admissible 1-based start index for [`truncate`].
pub fn truncation_max_start(n: usize, rho_b: f64) -> usize {
    (ceil_tol((1.0 - rho_b) * n as f64) as usize).clamp(1, n)
}

/// Keeps a contiguous slice of roughly `rho_b * n` points starting at a random offset.
pub fn truncate<R: Rng + ?Sized>(t: &Trajectory, rho_b: f64, rng: &mut R) -> Result<Trajectory> {
    t.require_len(2, "truncate")?;
    let n = t.len();
    if floor_tol(rho_b * n as f64) < 1.0 {
        return Err(Error::input(format!("truncate keeps no points (|T|={n}, rho_b={rho_b})")));
    }
    let start = rng.random_range(1..=truncation_max_start(n, rho_b));
    let (s, e) = truncation_window(n, rho_b, start);
    Ok(t.with_points(t.points[s..=e].to_vec()))
}

/// Indices kept by Douglas-Peucker with tolerance `rho_p`.
///
/// Iterative with an explicit stack. The breaking point of a span is the
/// first index attaining the maximum point-to-segment distance; it is kept
/// when that distance is strictly greater than `rho_p`.
pub fn simplify_dp_indices(pts: &[Point], rho_p: f64) -> Vec<usize> {
    let n = pts.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    let mut stack = vec![(0usize, n - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (a, b) = (pts[lo], pts[hi]);
        let mut best = lo;
        let mut dmax = -1.0;
        for (i, p) in pts.iter().enumerate().take(hi).skip(lo + 1) {
            let d = p.distance_to_segment(&a, &b);
            if d > dmax {
                dmax = d;
                best = i;
            }
        }
        if dmax > rho_p {
            keep[best] = true;
            stack.push((best, hi));
            stack.push((lo, best));
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

pub fn simplify_dp(t: &Trajectory, rho_p: f64) -> Result<Trajectory> {
    t.require_len(2, "simplify_dp")?;
    let idx = simplify_dp_indices(&t.points, rho_p);
    Ok(t.with_points(idx.into_iter().map(|i| t.points[i]).collect()))
}

/// Two independently drawn views of `t`.
pub fn make_views<R: Rng + ?Sized>(
    t: &Trajectory,
    first: &AugmentConfig,
    second: &AugmentConfig,
    rng: &mut R,
) -> Result<(Trajectory, Trajectory)> {
    let a = first.apply(t, rng)?;
    let b = second.apply(t, rng)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zigzag(n: usize) -> Trajectory {
        Trajectory::new(
            "z",
            (0..n)
                .map(|i| Point::new(i as f64 * 50.0, if i % 2 == 0 { 0.0 } else { 30.0 }))
                .collect(),
        )
    }

    #[test]
    fn shift_zero_offset_limit() {
        let t = zigzag(10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = point_shift(&t, 0.0, 0.5, &mut rng).unwrap();
        for (a, b) in t.points.iter().zip(&s.points) {
            assert!((a.x - b.x).abs() <= 2.0 * MIN_SHIFT_M && (a.y - b.y).abs() <= 2.0 * MIN_SHIFT_M);
        }
    }

    #[test]
    fn shift_is_bounded_and_deterministic() {
        let t = zigzag(50);
        let run = |seed| point_shift(&t, 100.0, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = run(9);
        assert_eq!(s.len(), 50);
        for (a, b) in t.points.iter().zip(&s.points) {
            assert!((a.x - b.x).abs() <= 100.0 && (a.y - b.y).abs() <= 100.0);
        }
        assert_eq!(s, run(9));
    }

    #[test]
    fn mask_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(point_mask(&zigzag(10), 0.3, &mut rng).unwrap().len(), 7);
        let t = zigzag(20);
        assert_eq!(point_mask(&t, 1e-12, &mut rng).unwrap(), t);
        assert!(point_mask(&zigzag(3), 0.5, &mut rng).is_err());
    }

    #[test]
    fn truncate_bounds_for_ten_points() {
        assert_eq!(truncation_max_start(10, 0.7), 3);
        for start in 1..=3 {
            let (s, e) = truncation_window(10, 0.7, start);
            let len = e - s + 1;
            assert!(len == 7 || len == 8, "start {start} -> {len}");
        }
        let t = zigzag(10);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(truncate(&t, 1.0 - 1e-12, &mut rng).unwrap(), t);
    }

    #[test]
    fn dp_examples() {
        let t = Trajectory::new(
            "t",
            vec![Point::new(0.0, 0.0), Point::new(5.0, 1.0), Point::new(10.0, 0.0)],
        );
        assert_eq!(simplify_dp(&t, 2.0).unwrap().len(), 2);
        assert_eq!(simplify_dp(&t, 0.5).unwrap().len(), 3);
        let line = Trajectory::new("l", (0..100).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect());
        let s = simplify_dp(&line, 0.01).unwrap();
        assert_eq!(s.points, vec![line.points[0], line.points[99]]);
    }

    #[test]
    fn dp_handles_stalls() {
        let t = Trajectory::new(
            "s",
            vec![Point::new(0.0, 0.0), Point::new(3.0, 4.0), Point::new(0.0, 0.0)],
        );
        // zero-length chord: distance falls back to the point distance (5)
        assert_eq!(simplify_dp(&t, 4.0).unwrap().len(), 3);
        assert_eq!(simplify_dp(&t, 6.0).unwrap().len(), 2);
    }

    #[test]
    fn views_default_pair_lengths() {
        let t = zigzag(100);
        let mask = AugmentConfig::with_method(Method::Mask);
        let trunc = AugmentConfig::with_method(Method::Truncate);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = make_views(&t, &mask, &trunc, &mut rng).unwrap();
        assert_eq!(a.len(), 70);
        assert!(b.len() == 70 || b.len() == 71);
        let raw = AugmentConfig::with_method(Method::Raw);
        assert_eq!(make_views(&t, &raw, &raw, &mut rng).unwrap(), (t.clone(), t.clone()));
    }

    #[test]
    fn views_differ_across_seeds() {
        let t = zigzag(100);
        let mask = AugmentConfig::with_method(Method::Mask);
        let trunc = AugmentConfig::with_method(Method::Truncate);
        let mut same = 0;
        for seed in 0..200u64 {
            let v1 = make_views(&t, &mask, &trunc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let v2 = make_views(&t, &mask, &trunc, &mut ChaCha8Rng::seed_from_u64(seed + 1000)).unwrap();
            if v1 == v2 {
                same += 1;
            }
        }
        // each view pair collides with probability < 1/C(100,70) * 1/30
        assert_eq!(same, 0);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { rho_d: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { rho_m: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
