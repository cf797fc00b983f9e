use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::backend::{MatmulBackend, Timing};
use crate::error::{Error, Result};

/// Summary of the timed runs at one grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub mean_ns: f64,
    pub median_ns: f64,
    pub p95_ns: f64,
    pub runs: usize,
}

impl SampleStats {
    /// Mean, median (middle pair averaged for even counts) and nearest-rank
    /// 95th percentile.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("no samples"));
        }
        let mut s = samples.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Ok(Self {
            mean_ns: s.iter().sum::<f64>() / n as f64,
            median_ns: median,
            p95_ns: s[rank - 1],
            runs: n,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub dim: usize,
    pub stats: SampleStats,
}

/// Per-dimension latency statistics from one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub hardware_id: String,
    pub batch: usize,
    pub timestamp: String,
    pub samples: Vec<ProfileSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub warmup_runs: usize,
    pub measured_runs: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            warmup_runs: 10,
            measured_runs: 50,
        }
    }
}

pub const MIN_RUNS: usize = 5;

/// Runs `warmup_runs` discarded repetitions, then `measured_runs` timed ones.
pub fn measure_point(
    backend: &mut dyn MatmulBackend,
    dim: usize,
    batch: usize,
    warmup_runs: usize,
    measured_runs: usize,
) -> Result<SampleStats> {
    if dim == 0 || batch == 0 {
        return Err(Error::config("dim and batch must be positive"));
    }
    if measured_runs < MIN_RUNS {
        return Err(Error::config(format!(
            "measured_runs must be at least {MIN_RUNS}, got {measured_runs}"
        )));
    }
    let wrap = |e: Error| match e {
        e @ Error::Measurement { .. } => e,
        other => Error::Measurement {
            dim,
            message: other.to_string(),
        },
    };
    backend.prepare(dim, batch).map_err(wrap)?;
    for _ in 0..warmup_runs {
        backend.run(dim, batch).map_err(wrap)?;
    }
    let mut samples = Vec::with_capacity(measured_runs);
    for _ in 0..measured_runs {
        let start = Instant::now();
        let timing = backend.run(dim, batch).map_err(wrap)?;
        let elapsed = start.elapsed().as_nanos() as f64;
        samples.push(match timing {
            Timing::Virtual(ns) => ns,
            // A sub-resolution run still took some time.
            Timing::WallClock => elapsed.max(1.0),
        });
    }
    SampleStats::from_samples(&samples)
}

/// A sweep that stopped early, with everything measured before the failure.
#[derive(Debug, thiserror::Error)]
#[error("sweep stopped after {} points: {error}", partial.samples.len())]
pub struct SweepFailure {
    pub partial: LatencyProfile,
    #[source]
    pub error: Error,
}

impl From<SweepFailure> for Error {
    fn from(f: SweepFailure) -> Self {
        f.error
    }
}

/// Inclusive `start:stop:step` grid.
pub fn parse_grid(spec: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::config(format!("grid must be start:stop:step with 1 ≤ start ≤ stop and step ≥ 1, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (a, b, step) = (nums[0], nums[1], nums[2]);
    if a == 0 || b < a || step == 0 {
        return Err(bad());
    }
    Ok((a..=b).step_by(step).collect())
}

fn check_grid(grid: &[usize]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("grid is empty"));
    }
    if grid[0] == 0 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("grid must be positive and strictly ascending"));
    }
    Ok(())
}

/// Measures every grid point in order on a dedicated thread, one point at a
/// time.
pub fn sweep<B: MatmulBackend>(
    backend: &mut B,
    grid: &[usize],
    batch: usize,
    cfg: MeasureConfig,
    timestamp: String,
) -> std::result::Result<LatencyProfile, SweepFailure> {
    let mut profile = LatencyProfile {
        hardware_id: backend.id(),
        batch,
        timestamp,
        samples: Vec::with_capacity(grid.len()),
    };
    if let Err(error) = check_grid(grid) {
        return Err(SweepFailure {
            partial: profile,
            error,
        });
    }
    std::thread::scope(|scope| {
        scope
            .spawn(|| {
                for &dim in grid {
                    match measure_point(backend, dim, batch, cfg.warmup_runs, cfg.measured_runs) {
                        Ok(stats) => profile.samples.push(ProfileSample { dim, stats }),
                        Err(error) => {
                            return Err(SweepFailure {
                                partial: profile,
                                error,
                            })
                        }
                    }
                }
                Ok(profile)
            })
            .join()
            .expect("measurement thread panicked")
    })
}

const COLUMNS: [&str; 6] = ["dim", "batch", "mean_ns", "median_ns", "p95_ns", "runs"];

impl LatencyProfile {
    pub fn grid(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.dim).collect()
    }

    pub fn medians(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.stats.median_ns).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Input("profile has no samples".into()));
        }
        check_grid(&self.grid()).map_err(|e| Error::Input(e.to_string()))?;
        for s in &self.samples {
            let st = s.stats;
            if ![st.mean_ns, st.median_ns, st.p95_ns].iter().all(|v| v.is_finite() && *v > 0.0) || st.runs == 0 {
                return Err(Error::Input(format!("dim {}: statistics must be positive", s.dim)));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# hardware_id: {}", self.hardware_id.replace('\n', " "));
        let _ = writeln!(out, "# timestamp: {}", self.timestamp.replace('\n', " "));
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                s.dim, self.batch, s.stats.mean_ns, s.stats.median_ns, s.stats.p95_ns, s.stats.runs
            );
        }
        out
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut hardware_id = String::new();
        let mut timestamp = String::new();
        let mut columns: Option<Vec<usize>> = None;
        let mut batch: Option<usize> = None;
        let mut samples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("hardware_id:") {
                    hardware_id = v.trim().to_string();
                } else if let Some(v) = comment.strip_prefix("timestamp:") {
                    timestamp = v.trim().to_string();
                }
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let Some(cols) = &columns else {
                let mut pos = Vec::with_capacity(COLUMNS.len());
                for want in COLUMNS {
                    match fields.iter().position(|f| *f == want) {
                        Some(p) => pos.push(p),
                        None => return Err(perr(line_no, format!("missing column `{want}` in header"))),
                    }
                }
                columns = Some(pos);
                continue;
            };
            if fields.len() < cols.iter().max().map_or(0, |m| m + 1) {
                return Err(perr(line_no, format!("expected {} fields, found {}", COLUMNS.len(), fields.len())));
            }
            let int = |k: usize| -> Result<usize> {
                fields[cols[k]]
                    .parse::<usize>()
                    .map_err(|_| perr(line_no, format!("column `{}`: not an integer: {:?}", COLUMNS[k], fields[cols[k]])))
            };
            let real = |k: usize| -> Result<f64> {
                fields[cols[k]]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && *v > 0.0)
                    .ok_or_else(|| perr(line_no, format!("column `{}`: not a positive number: {:?}", COLUMNS[k], fields[cols[k]])))
            };
            let row_batch = int(1)?;
            match batch {
                None => batch = Some(row_batch),
                Some(b) if b != row_batch => {
                    return Err(perr(line_no, format!("batch {row_batch} differs from earlier rows ({b})")))
                }
                _ => {}
            }
            let dim = int(0)?;
            if let Some(prev) = samples.last().map(|s: &ProfileSample| s.dim) {
                if dim <= prev {
                    return Err(perr(line_no, format!("dim {dim} not above previous {prev}")));
                }
            }
            let runs = int(5)?;
            if runs == 0 {
                return Err(perr(line_no, "column `runs`: must be positive".into()));
            }
            samples.push(ProfileSample {
                dim,
                stats: SampleStats {
                    mean_ns: real(2)?,
                    median_ns: real(3)?,
                    p95_ns: real(4)?,
                    runs,
                },
            });
        }
        if columns.is_none() {
            return Err(perr(text.lines().count().max(1), "missing header row".into()));
        }
        let profile = Self {
            hardware_id,
            batch: batch.ok_or_else(|| perr(text.lines().count(), "no data rows".into()))?,
            timestamp,
            samples,
        };
        Ok(profile)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text, path)
    }
}
