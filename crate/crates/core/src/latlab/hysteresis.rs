use serde::{Deserialize, Serialize};

use super::profile::LatencyProfile;
use crate::error::{Error, Result};

/// Which grid points count as latency hysteresis points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LhpRule {
    /// A point is an LHP when it is a strict new prefix minimum: every
    /// smaller dimension is slower. The first point of a tie run wins.
    #[default]
    PrefixMin,
    /// A point is an LHP when no larger dimension is strictly faster. The
    /// largest grid point is always one, so every dimension has a target.
    Pareto,
}

/// A maximal run of grid points sharing one recovery target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: usize,
    pub upper: usize,
    /// `None` for a prefix-min tail after the last LHP.
    pub lhp: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisMap {
    pub rule: LhpRule,
    pub grid: Vec<usize>,
    /// Central (median) latency per grid point.
    pub latency_ns: Vec<f64>,
    pub lhps: Vec<usize>,
    pub bins: Vec<Bin>,
    pub redundancy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NearestLhp {
    pub dim: usize,
    /// False when no LHP lies at or above the query; `dim` is then the query.
    pub found: bool,
}

/// LHP flags for a latency curve.
pub fn lhp_flags(latency: &[f64], rule: LhpRule) -> Vec<bool> {
    let mut flags = vec![false; latency.len()];
    match rule {
        LhpRule::PrefixMin => {
            let mut best = f64::INFINITY;
            for (flag, &l) in flags.iter_mut().zip(latency) {
                if l < best {
                    best = l;
                    *flag = true;
                }
            }
        }
        LhpRule::Pareto => {
            let mut best = f64::INFINITY;
            for (flag, &l) in flags.iter_mut().zip(latency).rev() {
                if l <= best {
                    best = l;
                    *flag = true;
                }
            }
        }
    }
    flags
}

/// Builds the map from raw points; `grid` must be strictly ascending and
/// the same length as `latency`.
pub fn detect_from_curve(grid: &[usize], latency: &[f64], rule: LhpRule) -> Result<HysteresisMap> {
    if grid.is_empty() || grid.len() != latency.len() {
        return Err(Error::Input(format!(
            "curve needs matching non-empty grid and latencies ({} vs {})",
            grid.len(),
            latency.len()
        )));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Input("grid must be strictly ascending".into()));
    }
    if latency.iter().any(|l| !l.is_finite()) {
        return Err(Error::non_finite("latency curve"));
    }
    let flags = lhp_flags(latency, rule);
    let lhps: Vec<usize> = grid.iter().zip(&flags).filter(|(_, &f)| f).map(|(&d, _)| d).collect();
    let mut bins = Vec::new();
    let mut start = 0;
    for (i, &flag) in flags.iter().enumerate() {
        if flag {
            bins.push(Bin {
                lower: grid[start],
                upper: grid[i],
                lhp: Some(grid[i]),
            });
            start = i + 1;
        }
    }
    if start < grid.len() {
        bins.push(Bin {
            lower: grid[start],
            upper: grid[grid.len() - 1],
            lhp: None,
        });
    }
    Ok(HysteresisMap {
        rule,
        grid: grid.to_vec(),
        latency_ns: latency.to_vec(),
        redundancy: 1.0 - lhps.len() as f64 / grid.len() as f64,
        lhps,
        bins,
    })
}

/// LHP analysis of a profile's median latencies.
pub fn detect_lhps(profile: &LatencyProfile, rule: LhpRule) -> Result<HysteresisMap> {
    detect_from_curve(&profile.grid(), &profile.medians(), rule)
}

impl HysteresisMap {
    pub fn redundancy(&self) -> f64 {
        self.redundancy
    }

    pub fn is_lhp(&self, dim: usize) -> bool {
        self.lhps.binary_search(&dim).is_ok()
    }

    /// Smallest LHP at or above `dim`.
    pub fn nearest_lhp(&self, dim: usize) -> Result<NearestLhp> {
        let max = *self.grid.last().expect("map has a grid");
        if dim > max {
            return Err(Error::Query(format!("dimension {dim} is above the profiled grid (max {max})")));
        }
        let i = self.lhps.partition_point(|&l| l < dim);
        Ok(match self.lhps.get(i) {
            Some(&l) => NearestLhp { dim: l, found: true },
            None => NearestLhp { dim, found: false },
        })
    }

    /// Median latency at a grid point.
    pub fn latency_at(&self, dim: usize) -> Option<f64> {
        self.grid.binary_search(&dim).ok().map(|i| self.latency_ns[i])
    }

    pub fn report(&self) -> HysteresisReport {
        HysteresisReport {
            rule: self.rule,
            grid_points: self.grid.len(),
            lhp_count: self.lhps.len(),
            lhp_set: self.lhps.clone(),
            bins: self.bins.clone(),
            redundancy: self.redundancy,
            redundancy_percent: format!("{:.1}%", self.redundancy * 100.0),
        }
    }
}

/// Serializable analysis summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisReport {
    pub rule: LhpRule,
    pub grid_points: usize,
    pub lhp_count: usize,
    pub lhp_set: Vec<usize>,
    pub bins: Vec<Bin>,
    pub redundancy: f64,
    pub redundancy_percent: String,
}
