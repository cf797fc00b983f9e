use serde::{Deserialize, Serialize};

use super::weight::check_ratio;
use crate::error::{Error, Result};

/// Ratios and stopping rules for every grow/prune phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowPruneConfig {
    /// Weight growth ratio, applied once per growth epoch.
    pub g_w: f64,
    /// Initial weight pruning ratio.
    pub p_w: f64,
    /// Initial row pruning ratio (gate hidden neurons, `d_h`).
    pub p_r: f64,
    /// Initial column pruning ratio (state units `d_s` and inputs `d_x`).
    pub p_c: f64,
    /// Row/column growth ratios for standalone [`super::rc_grow`] use; the
    /// synthesis flow derives exact counts from the latency map instead.
    pub g_r: f64,
    pub g_c: f64,
    /// Upper bound on validation perplexity; `None` means "use the dense
    /// baseline's".
    pub accuracy_threshold: Option<f64>,
    /// Below this ratio, fractional pruning gives way to single units.
    pub halving_floor: f64,
    /// Retraining epochs allowed to recover after each prune.
    pub retrain_patience: usize,
    /// Also prune embedding input columns during row/column pruning.
    pub prune_input_columns: bool,
}

impl Default for GrowPruneConfig {
    fn default() -> Self {
        Self {
            g_w: 0.1,
            p_w: 0.7,
            p_r: 0.2,
            p_c: 0.2,
            g_r: 0.0,
            g_c: 0.0,
            accuracy_threshold: None,
            halving_floor: 0.02,
            retrain_patience: 2,
            prune_input_columns: false,
        }
    }
}

impl GrowPruneConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("g_w", self.g_w),
            ("p_w", self.p_w),
            ("p_r", self.p_r),
            ("p_c", self.p_c),
            ("g_r", self.g_r),
            ("g_c", self.g_c),
        ] {
            check_ratio(n, v)?;
        }
        if let Some(t) = self.accuracy_threshold {
            if !(t > 0.0) {
                return Err(Error::config("accuracy_threshold must be positive"));
            }
        }
        if !(self.halving_floor > 0.0 && self.halving_floor <= 1.0) {
            return Err(Error::config("halving_floor must lie in (0, 1]"));
        }
        if self.retrain_patience == 0 {
            return Err(Error::config("retrain_patience must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Prune a fraction of the active units or weights per iteration.
    Fraction,
    /// Prune one unit per axis per iteration.
    Single,
    Done,
}

/// What the caller must do after an iteration's metric is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Keep the pruned model and prune again.
    Accept,
    /// Restore the pre-prune model, then continue with the updated ratios.
    Revert,
    /// Restore the pre-prune model and finish the phase.
    RevertAndStop,
}

/// Ratio halving on threshold violation, optionally ending in single-unit
/// pruning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalvingSchedule {
    pub ratios: Vec<f64>,
    pub floor: f64,
    pub mode: PruneMode,
    pub single_allowed: bool,
}

impl HalvingSchedule {
    pub fn new(ratios: Vec<f64>, floor: f64, single_allowed: bool) -> Self {
        let mode = if ratios.iter().all(|&r| r == 0.0) {
            PruneMode::Done
        } else if ratios.iter().all(|&r| r < floor) {
            if single_allowed {
                PruneMode::Single
            } else {
                PruneMode::Done
            }
        } else {
            PruneMode::Fraction
        };
        Self {
            ratios,
            floor,
            mode,
            single_allowed,
        }
    }

    pub fn is_done(&self) -> bool {
        self.mode == PruneMode::Done
    }

    /// `metric ≤ threshold` keeps the prune. Otherwise the ratios halve; once
    /// every ratio is below the floor the schedule drops to single-unit mode
    /// (or finishes), and a violation in single-unit mode finishes.
    pub fn observe(&mut self, metric: f64, threshold: f64) -> Verdict {
        if metric.is_finite() && metric <= threshold {
            return Verdict::Accept;
        }
        match self.mode {
            PruneMode::Fraction => {
                for r in &mut self.ratios {
                    *r /= 2.0;
                }
                if self.ratios.iter().all(|&r| r < self.floor) {
                    if self.single_allowed {
                        self.mode = PruneMode::Single;
                    } else {
                        self.mode = PruneMode::Done;
                        return Verdict::RevertAndStop;
                    }
                }
                Verdict::Revert
            }
            PruneMode::Single | PruneMode::Done => {
                self.mode = PruneMode::Done;
                Verdict::RevertAndStop
            }
        }
    }

    /// Forces the schedule to finish (e.g. when pruning would empty a layer).
    pub fn finish(&mut self) {
        self.mode = PruneMode::Done;
    }
}

/// Stand-alone form of the halving rule on a config: returns the updated
/// config and the mode to continue in.
pub fn halve_on_violation(cfg: &GrowPruneConfig, achieved_metric: f64) -> (GrowPruneConfig, PruneMode) {
    let threshold = cfg.accuracy_threshold.unwrap_or(f64::INFINITY);
    let mut s = HalvingSchedule::new(vec![cfg.p_r, cfg.p_c], cfg.halving_floor, true);
    s.observe(achieved_metric, threshold);
    let mut out = *cfg;
    out.p_r = s.ratios[0];
    out.p_c = s.ratios[1];
    (out, s.mode)
}
