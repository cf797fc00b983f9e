use crate::error::{Error, Result};
use crate::hlstm::LmModel;
use crate::latlab::{measure_point, LatencyProfile, MatmulBackend, SampleStats, SyntheticCurveSpec, Timing};
use crate::numkit::SeededRng;

/// Per-dimension matmul latency used for virtual model timing.
#[derive(Debug, Clone, PartialEq)]
pub enum LatencyTable {
    /// Median latency per profiled dimension; off-grid dimensions round up
    /// to the next profiled one.
    Profile { grid: Vec<usize>, latency_ns: Vec<f64> },
    Curve(SyntheticCurveSpec),
}

impl LatencyTable {
    pub fn from_profile(p: &LatencyProfile) -> Self {
        LatencyTable::Profile {
            grid: p.grid(),
            latency_ns: p.medians(),
        }
    }

    pub fn lookup(&self, dim: usize) -> Result<f64> {
        match self {
            LatencyTable::Profile { grid, latency_ns } => {
                let i = grid.partition_point(|&g| g < dim);
                latency_ns.get(i).copied().ok_or_else(|| {
                    Error::Query(format!(
                        "dimension {dim} is above the profiled grid (max {})",
                        grid.last().copied().unwrap_or(0)
                    ))
                })
            }
            LatencyTable::Curve(spec) => {
                let ns = spec.latency_ns(dim);
                if ns > 0.0 {
                    Ok(ns)
                } else {
                    Err(Error::Measurement {
                        dim,
                        message: format!("curve gives non-positive latency {ns} ns"),
                    })
                }
            }
        }
    }
}

/// Closed-form forward latency: one matmul per cell layer per time step,
/// each costed at the layer's live output rows.
pub fn virtual_model_latency(model: &LmModel, table: &LatencyTable, seq_len: usize) -> Result<f64> {
    let mut per_step = 0.0;
    for id in model.cell_layer_ids() {
        let rows = model.layer(id).expect("listed layer exists").mask().active_rows().len();
        if rows > 0 {
            per_step += table.lookup(rows)?;
        }
    }
    Ok(per_step * seq_len as f64)
}

/// Times full unrolled forward passes of a model over fixed random tokens.
struct ForwardBackend<'a> {
    model: &'a LmModel,
    inputs: Vec<Vec<usize>>,
}

impl MatmulBackend for ForwardBackend<'_> {
    fn id(&self) -> String {
        "model-forward".into()
    }

    fn run(&mut self, _dim: usize, batch: usize) -> Result<Timing> {
        let init = self.model.initial_state(batch);
        std::hint::black_box(self.model.unroll_forward(&self.inputs, &init, None)?);
        Ok(Timing::WallClock)
    }
}

/// Wall-clock forward latency statistics for `batch` streams of `seq_len`
/// tokens.
pub fn native_model_latency(
    model: &LmModel,
    batch: usize,
    seq_len: usize,
    warmup_runs: usize,
    measured_runs: usize,
    seed: u64,
) -> Result<SampleStats> {
    let mut rng = SeededRng::new(seed);
    let v = model.vocab();
    let inputs = (0..seq_len).map(|_| (0..batch).map(|_| rng.below(v)).collect()).collect();
    let mut backend = ForwardBackend { model, inputs };
    measure_point(&mut backend, 1, batch, warmup_runs, measured_runs)
}

/// Degenerate statistics of an exact value.
pub fn exact_stats(ns: f64, runs: usize) -> SampleStats {
    SampleStats {
        mean_ns: ns,
        median_ns: ns,
        p95_ns: ns,
        runs,
    }
}
