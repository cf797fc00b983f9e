//! The four-step synthesis flow: weight growth, row/column pruning,
//! LHP-guided row/column growth and weight pruning, with checkpoints and
//! per-step reports.

mod checkpoint;
mod config;
mod flow;
mod latency;
mod report;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{
    BaselineConfig, DataConfig, FlowConfig, LatencyConfig, LatencyMode, ModelConfig, PhaseConfig, ProfileSource,
    SweepBackend, SweepConfig, SCHEMA_VERSION,
};
pub use flow::{
    acquire_profile, bench_checkpoint, evaluate_checkpoint, load_flow_checkpoint, make_seed, run_flow, unix_timestamp,
    EvalSplit, Flow, FlowCheckpoint, FlowState, HistoryEntry, Phase, CHECKPOINT_FILE,
};
pub use latency::{exact_stats, native_model_latency, virtual_model_latency, LatencyTable};
pub use report::{
    cell_dims, format_dims, mask_pbm, write_mask_snapshot, FlowReport, LhpSummary, MaskImage, RcgCell, RcgSummary,
    ReportRow, SeedSummary, CSV_HEADER,
};
