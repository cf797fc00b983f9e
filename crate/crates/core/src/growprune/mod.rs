//! Mask mutation: weight growth and pruning, row/column pruning and
//! growth, coordinated structural edits across a cell's gates, and the
//! ratio-halving schedule.

mod rowcol;
mod schedule;
mod structure;
mod weight;

pub use rowcol::{rc_grow, rc_grow_counts, rc_prune, ActiveSets, Grown};
pub use schedule::{halve_on_violation, GrowPruneConfig, HalvingSchedule, PruneMode, Verdict};
pub use structure::{
    cell_requests, propagate_dead_neurons, ActiveDims, Axis, CellStructure, Occurrence, Request,
    StructureGroup, AXIS_DH, AXIS_DS, AXIS_DX,
};
pub use weight::{neuron_sweep, weight_grow, weight_prune, DeadLine, Side};
