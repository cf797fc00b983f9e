//! Order statistics with a fixed rounding and tie rule.
//!
//! Counts are `k = ⌈q·n⌉`. When selecting, equal values are ordered by their
//! original index so the chosen set is fully determined by the input.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Smallest,
    Largest,
}

/// `⌈ratio·n⌉`, with products within 1e-9 of an integer snapped to it so
/// that e.g. `0.1·30` yields 3 rather than 4.
pub fn ceil_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let nearest = x.round();
    let k = if (x - nearest).abs() < 1e-9 {
        nearest
    } else {
        x.ceil()
    };
    (k.max(0.0) as usize).min(n)
}

fn order(values: &[f64], direction: Direction) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_value = values[a].total_cmp(&values[b]);
        let by_value = match direction {
            Direction::Smallest => by_value,
            Direction::Largest => by_value.reverse(),
        };
        match by_value {
            Ordering::Equal => a.cmp(&b),
            other => other,
        }
    });
    idx
}

/// Indices of the `k` most extreme values in `direction`, in selection order.
pub fn select_k(values: &[f64], k: usize, direction: Direction) -> Vec<usize> {
    let mut idx = order(values, direction);
    idx.truncate(k.min(values.len()));
    idx
}

/// The `⌈q·n⌉`-th order statistic counted from `direction`.
///
/// `q = 0` selects nothing: the returned sentinel is `-∞` for `Smallest`
/// (nothing is `≤` it) and `+∞` for `Largest` (nothing is `≥` it).
pub fn percentile_threshold(values: &[f64], q: f64, direction: Direction) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("percentile of an empty list"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract(format!("percentile fraction {q} outside [0, 1]")));
    }
    let k = ceil_count(q, values.len());
    if k == 0 {
        return Ok(match direction {
            Direction::Smallest => f64::NEG_INFINITY,
            Direction::Largest => f64::INFINITY,
        });
    }
    let idx = order(values, direction);
    Ok(values[idx[k - 1]])
}
