//! Matrix-multiply latency profiling and latency hysteresis analysis.

mod backend;
mod hysteresis;
mod plot;
mod profile;
mod stats;

pub use backend::{Clock, MatmulBackend, NativeBackend, Ramp, SyntheticBackend, SyntheticCurveSpec, Timing};
pub use hysteresis::{
    detect_from_curve, detect_lhps, lhp_flags, Bin, HysteresisMap, HysteresisReport, LhpRule, NearestLhp,
};
pub use plot::render_svg;
pub use profile::{
    measure_point, parse_grid, sweep, LatencyProfile, MeasureConfig, ProfileSample, SampleStats, SweepFailure,
    MIN_RUNS,
};
pub use stats::{average_ranks, spearman};
