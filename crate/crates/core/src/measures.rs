//! Heuristic trajectory distances: Hausdorff, discrete Fréchet and EDR.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{Point, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffVariant {
    /// Point to polyline (closed segments) distance.
    #[default]
    PointToSegment,
    /// Point to nearest vertex.
    PointToPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeasureKind {
    Hausdorff {
        #[serde(default)]
        variant: HausdorffVariant,
    },
    FrechetDiscrete,
    Edr {
        #[serde(default = "default_edr_epsilon")]
        epsilon: f64,
    },
}

fn default_edr_epsilon() -> f64 {
    100.0
}

impl Default for MeasureKind {
    fn default() -> Self {
        MeasureKind::Hausdorff {
            variant: HausdorffVariant::PointToSegment,
        }
    }
}

impl std::str::FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hausdorff" => MeasureKind::default(),
            "hausdorff_p2p" => MeasureKind::Hausdorff {
                variant: HausdorffVariant::PointToPoint,
            },
            "frechet" | "frechet_discrete" => MeasureKind::FrechetDiscrete,
            "edr" => MeasureKind::Edr {
                epsilon: default_edr_epsilon(),
            },
            other => return Err(Error::config(format!("unknown measure '{other}'"))),
        })
    }
}

impl MeasureKind {
    pub fn validate(&self) -> Result<()> {
        if let MeasureKind::Edr { epsilon } = self {
            if !(*epsilon > 0.0) {
                return Err(Error::config(format!("edr epsilon must be positive, got {epsilon}")));
            }
        }
        Ok(())
    }

    pub fn distance(&self, a: &Trajectory, b: &Trajectory) -> Result<f64> {
        match *self {
            MeasureKind::Hausdorff { variant } => hausdorff_with(&a.points, &b.points, variant),
            MeasureKind::FrechetDiscrete => frechet_discrete(&a.points, &b.points),
            MeasureKind::Edr { epsilon } => edr(&a.points, &b.points, epsilon).map(|c| c as f64),
        }
    }
}

fn non_empty(a: &[Point], b: &[Point], what: &str) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input(format!("{what} needs two non-empty trajectories")));
    }
    Ok(())
}

fn point_to_polyline(p: &Point, line: &[Point]) -> f64 {
    if line.len() == 1 {
        return p.distance(&line[0]);
    }
    line.windows(2)
        .map(|w| p.distance_to_segment(&w[0], &w[1]))
        .fold(f64::INFINITY, f64::min)
}

fn directed(a: &[Point], b: &[Point], variant: HausdorffVariant) -> f64 {
    a.iter()
        .map(|p| match variant {
            HausdorffVariant::PointToSegment => point_to_polyline(p, b),
            HausdorffVariant::PointToPoint => {
                b.iter().map(|q| p.distance(q)).fold(f64::INFINITY, f64::min)
            }
        })
        .fold(0.0, f64::max)
}

/// Symmetric Hausdorff distance with point-to-polyline directed distances.
pub fn hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    hausdorff_with(a, b, HausdorffVariant::PointToSegment)
}

pub fn hausdorff_with(a: &[Point], b: &[Point], variant: HausdorffVariant) -> Result<f64> {
    non_empty(a, b, "hausdorff")?;
    Ok(directed(a, b, variant).max(directed(b, a, variant)))
}

/// Discrete Fréchet distance, O(n·m) time with a rolling row.
pub fn frechet_discrete(a: &[Point], b: &[Point]) -> Result<f64> {
    non_empty(a, b, "frechet")?;
    let m = b.len();
    let mut prev = vec![0.0f64; m];
    let mut cur = vec![0.0f64; m];
    for (i, p) in a.iter().enumerate() {
        for j in 0..m {
            let d = p.distance(&b[j]);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => cur[j - 1].max(d),
                (_, 0) => prev[0].max(d),
                _ => prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Edit Distance on Real sequence: unit insert/delete cost, substitution free
/// when both coordinate gaps are within `epsilon`.
pub fn edr(a: &[Point], b: &[Point], epsilon: f64) -> Result<usize> {
    non_empty(a, b, "edr")?;
    if !(epsilon > 0.0) {
        return Err(Error::input(format!("edr epsilon must be positive, got {epsilon}")));
    }
    let m = b.len();
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for (i, p) in a.iter().enumerate() {
        cur[0] = i + 1;
        for j in 1..=m {
            let q = &b[j - 1];
            let sub = usize::from(!((p.x - q.x).abs() <= epsilon && (p.y - q.y).abs() <= epsilon));
            cur[j] = (prev[j - 1] + sub).min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `out[i][j] = kind.distance(a[i], b[j])`, evaluated in parallel by row.
pub fn pairwise_matrix(a: &[Trajectory], b: &[Trajectory], kind: MeasureKind) -> Result<Vec<Vec<f64>>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("pairwise_matrix needs non-empty inputs"));
    }
    kind.validate()?;
    a.par_iter()
        .map(|ta| b.iter().map(|tb| kind.distance(ta, tb)).collect())
        .collect()
}
