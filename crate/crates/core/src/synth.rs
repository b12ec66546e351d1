//! Synthetic trajectories: 2-D correlated random walks whose heading changes
//! are momentum-smoothed, reflected at the borders of a bounding box.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{project, BBox, Point, Trajectory};
use crate::grid::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub min_points: usize,
    pub max_points: usize,
    /// Bounding box in degrees: `[min_lon, min_lat, max_lon, max_lat]`.
    pub bbox: [f64; 4],
    /// Mean step length in meters.
    pub step_m: f64,
    /// Standard deviation of the per-step turn-rate innovation, radians.
    pub turn_sigma: f64,
    /// Weight of the previous turn rate, in [0, 1).
    pub turn_momentum: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            seed: 0,
            min_points: 20,
            max_points: 200,
            bbox: [-8.70, 41.10, -8.55, 41.20],
            step_m: 100.0,
            turn_sigma: 0.15,
            turn_momentum: 0.8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_points < 2 || self.min_points > self.max_points {
            return Err(Error::config("synth needs 2 <= min_points <= max_points"));
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::config("synth bbox must have min < max"));
        }
        if !(self.step_m > 0.0 && self.turn_sigma >= 0.0 && (0.0..1.0).contains(&self.turn_momentum)) {
            return Err(Error::config("synth step_m > 0, turn_sigma >= 0 and turn_momentum in [0, 1) required"));
        }
        Ok(())
    }

    pub fn projected_bbox(&self) -> Result<BBox> {
        let [x0, y0, x1, y1] = self.bbox;
        Ok(BBox::new(project(x0, y0)?, project(x1, y1)?))
    }
}

fn reflect(v: f64, lo: f64, hi: f64) -> (f64, bool) {
    if v < lo {
        ((2.0 * lo - v).min(hi), true)
    } else if v > hi {
        ((2.0 * hi - v).max(lo), true)
    } else {
        (v, false)
    }
}

/// One walk per trajectory, each from its own RNG stream so the output for
/// index `i` does not depend on `n`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let bb = cfg.projected_bbox()?;
    let width = (cfg.n.max(1) - 1).to_string().len();
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = derived_rng(cfg.seed, i as u64);
        let len = rng.random_range(cfg.min_points..=cfg.max_points);
        let mut x = rng.random_range(bb.min.x..=bb.max.x);
        let mut y = rng.random_range(bb.min.y..=bb.max.y);
        let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
        let mut turn = 0.0f64;
        let mut pts = Vec::with_capacity(len);
        pts.push(Point::new(x, y));
        for _ in 1..len {
            let eps: f64 = StandardNormal.sample(&mut rng);
            turn = cfg.turn_momentum * turn + cfg.turn_sigma * eps;
            heading += turn;
            let step = cfg.step_m * rng.random_range(0.5..1.5);
            let (nx, fx) = reflect(x + step * heading.cos(), bb.min.x, bb.max.x);
            let (ny, fy) = reflect(y + step * heading.sin(), bb.min.y, bb.max.y);
            if fx {
                heading = std::f64::consts::PI - heading;
            }
            if fy {
                heading = -heading;
            }
            x = nx;
            y = ny;
            pts.push(Point::new(x, y));
        }
        out.push(Trajectory::new(format!("syn{i:0width$}"), pts));
    }
    Ok(out)
}
