use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::growprune::{ActiveDims, CellStructure};
use crate::hlstm::LmModel;
use crate::latlab::{LhpRule, SampleStats};
use crate::numkit::Mask;

/// One line of the per-step breakdown table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: String,
    /// `d_s/d_h` per cell (`d_s` alone for plain cells), `;`-separated.
    pub dims: String,
    pub total_params: usize,
    pub active_params: usize,
    pub cell_active_params: usize,
    pub valid_ppl: f64,
    pub latency: SampleStats,
    /// Training epochs spent so far on this model.
    pub epochs: usize,
}

pub const CSV_HEADER: &str =
    "step,dims,total_params,active_params,cell_active_params,valid_ppl,latency_mean_ns,latency_median_ns,latency_p95_ns,epochs";

/// Active dimensions of every cell, as [`ReportRow::dims`] formats them.
pub fn cell_dims(model: &LmModel) -> Result<Vec<ActiveDims>> {
    (0..model.cells().len())
        .map(|c| Ok(CellStructure::of(model, c)?.active_dims(model)))
        .collect()
}

pub fn format_dims(model: &LmModel) -> Result<String> {
    let deep = model.cells()[0].dims().hidden_depth > 0;
    Ok(cell_dims(model)?
        .iter()
        .map(|d| if deep { format!("{}/{}", d.d_s, d.d_h) } else { d.d_s.to_string() })
        .collect::<Vec<_>>()
        .join(";"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub total_params: usize,
    pub active_params: usize,
    pub cell_active_params: usize,
}

/// Per-cell outcome of recovering pruned dimensions to the nearest LHP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcgCell {
    pub pruned: ActiveDims,
    pub target_d_s: usize,
    pub target_d_h: usize,
    /// False when some axis had no LHP at or above it within the matrix.
    pub found: bool,
    pub grown: ActiveDims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcgSummary {
    pub cells: Vec<RcgCell>,
    pub latency_before_ns: f64,
    pub latency_after_ns: f64,
    pub valid_ppl_before: f64,
    pub valid_ppl_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LhpSummary {
    pub rule: LhpRule,
    pub hardware_id: String,
    pub grid_points: usize,
    pub lhp_count: usize,
    pub redundancy: f64,
}

/// Structured twin of the CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub complete: bool,
    pub cpu_mode: bool,
    pub threshold_ppl: Option<f64>,
    pub seed: Option<SeedSummary>,
    pub rows: Vec<ReportRow>,
    pub rcg: Option<RcgSummary>,
    pub lhp: Option<LhpSummary>,
    /// Why the flow stopped early, if it did.
    pub error: Option<String>,
}

impl FlowReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.dims,
                r.total_params,
                r.active_params,
                r.cell_active_params,
                r.valid_ppl,
                r.latency.mean_ns,
                r.latency.median_ns,
                r.latency.p95_ns,
                r.epochs
            );
        }
        out
    }

    pub fn row(&self, step: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.step == step)
    }

    /// Human-readable table; incomplete reports say so up front.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        if !self.complete {
            let _ = writeln!(out, "PARTIAL REPORT: the flow did not finish");
            if let Some(e) = &self.error {
                let _ = writeln!(out, "stopped by: {e}");
            }
        }
        if let Some(t) = self.threshold_ppl {
            let _ = writeln!(out, "perplexity threshold: {t:.3}");
        }
        let _ = writeln!(
            out,
            "{:<9} {:>11} {:>10} {:>10} {:>9} {:>14} {:>7}",
            "step", "dims", "params", "active", "ppl", "latency(ms)", "epochs"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<9} {:>11} {:>10} {:>10} {:>9.3} {:>14.4} {:>7}",
                r.step,
                r.dims,
                r.total_params,
                r.active_params,
                r.valid_ppl,
                r.latency.median_ns / 1e6,
                r.epochs
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join("report.json"))?)?)
    }
}

/// Plain (P1) bitmap of a mask: black = active.
pub fn mask_pbm(mask: &Mask) -> String {
    let mut out = format!("P1\n{} {}\n", mask.cols(), mask.rows());
    for r in 0..mask.rows() {
        let line: Vec<&str> = (0..mask.cols()).map(|c| if mask.get(r, c) { "1" } else { "0" }).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskImage {
    pub step: String,
    pub layer: String,
    pub path: String,
    pub rows: usize,
    pub cols: usize,
    pub active: usize,
}

/// Writes one bitmap per masked layer under `dir/masks/<step>/` and
/// appends them to `dir/masks/manifest.json`.
pub fn write_mask_snapshot(dir: &Path, step: &str, model: &LmModel) -> Result<()> {
    let masks = dir.join("masks");
    let step_dir = masks.join(step);
    std::fs::create_dir_all(&step_dir)?;
    let manifest_path = masks.join("manifest.json");
    let mut manifest: Vec<MaskImage> = match std::fs::read_to_string(&manifest_path) {
        Ok(t) => serde_json::from_str(&t)?,
        Err(_) => Vec::new(),
    };
    manifest.retain(|m| m.step != step);
    for id in model.layer_ids() {
        let layer = model.layer(id).expect("listed layer exists");
        let name = format!("{}.pbm", id.label());
        std::fs::write(step_dir.join(&name), mask_pbm(layer.mask()))?;
        manifest.push(MaskImage {
            step: step.to_string(),
            layer: id.label(),
            path: format!("{step}/{name}"),
            rows: layer.out_dim(),
            cols: layer.in_dim(),
            active: layer.active_weights(),
        });
    }
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
