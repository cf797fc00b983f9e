use serde::{Deserialize, Serialize};

use super::rowcol::{pick_grow, pick_prune, ActiveSets};
use super::weight::{check_gradient, check_ratio, Side};
use crate::error::{Error, Result};
use crate::hlstm::{GateKind, LayerId, LayerPart, LmModel};
use crate::numkit::{ceil_count, MaskedLinear, Matrix};

/// One place a structural unit lives: row or column `offset + unit` of a
/// layer in the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub layer: usize,
    pub side: Side,
    pub offset: usize,
}

/// A family of interchangeable units (e.g. the `d_h` hidden neurons) that
/// must be pruned and grown together across every layer they touch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub size: usize,
    pub occurrences: Vec<Occurrence>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureGroup {
    pub axes: Vec<Axis>,
}

/// How many units of an axis to prune or grow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Request {
    /// Prune: fraction of the currently active units. Grow: fraction of the
    /// axis size.
    Ratio(f64),
    Count(usize),
}

fn line_active(l: &MaskedLinear, side: Side, i: usize) -> bool {
    match side {
        Side::Row => l.mask().row_active(i),
        Side::Col => l.mask().col_active(i),
    }
}

impl Axis {
    pub fn unit_active(&self, layers: &[&MaskedLinear], u: usize) -> bool {
        self.occurrences
            .iter()
            .any(|o| line_active(layers[o.layer], o.side, o.offset + u))
    }

    pub fn active_units(&self, layers: &[&MaskedLinear]) -> Vec<usize> {
        (0..self.size).filter(|&u| self.unit_active(layers, u)).collect()
    }

    /// Unweighted sum of `Σ|W|` over every line the unit occupies.
    pub fn importance(&self, layers: &[&MaskedLinear], u: usize) -> f64 {
        self.occurrences
            .iter()
            .map(|o| {
                let w = layers[o.layer].weight();
                match o.side {
                    Side::Row => w.sum_abs_row(o.offset + u),
                    Side::Col => w.sum_abs_col(o.offset + u),
                }
            })
            .sum()
    }
}

impl StructureGroup {
    fn check(&self, n_layers: usize, layers: &[&MaskedLinear]) -> Result<()> {
        for a in &self.axes {
            for o in &a.occurrences {
                let l = layers.get(o.layer).filter(|_| o.layer < n_layers).ok_or_else(|| {
                    Error::contract(format!("axis {} names missing layer {}", a.name, o.layer))
                })?;
                let extent = match o.side {
                    Side::Row => l.out_dim(),
                    Side::Col => l.in_dim(),
                };
                if o.offset + a.size > extent {
                    return Err(Error::contract(format!(
                        "axis {} overruns layer {} ({} + {} > {extent})",
                        a.name, o.layer, o.offset, a.size
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn active_counts(&self, layers: &[&MaskedLinear]) -> Vec<usize> {
        self.axes.iter().map(|a| a.active_units(layers).len()).collect()
    }

    /// Chooses the units to prune on every axis, ranking all axes on the
    /// current weights before anything is removed.
    pub fn plan_prune(&self, layers: &[&MaskedLinear], requests: &[Request]) -> Result<Vec<Vec<usize>>> {
        self.check(layers.len(), layers)?;
        if requests.len() != self.axes.len() {
            return Err(Error::contract("one request per axis required"));
        }
        self.axes
            .iter()
            .zip(requests)
            .map(|(a, req)| {
                let active = a.active_units(layers);
                let ratio = match *req {
                    Request::Ratio(p) => {
                        check_ratio(&format!("prune ratio for {}", a.name), p)?;
                        p
                    }
                    Request::Count(k) => {
                        if k == 0 {
                            return Ok(Vec::new());
                        }
                        // Exact count expressed as a ratio that ceil_count maps back to k.
                        if k >= active.len() {
                            return Err(Error::Degenerate(format!(
                                "pruning {k} of {} active {} units would empty the axis",
                                active.len(),
                                a.name
                            )));
                        }
                        k as f64 / active.len() as f64
                    }
                };
                pick_prune(&active, |u| a.importance(layers, u), ratio, &format!("{} units", a.name))
            })
            .collect()
    }

    /// Clears every line of the planned units in all layers.
    pub fn apply_prune(&self, layers: &mut [&mut MaskedLinear], plan: &[Vec<usize>]) {
        for (a, units) in self.axes.iter().zip(plan) {
            for &u in units {
                for o in &a.occurrences {
                    let l = &mut *layers[o.layer];
                    match o.side {
                        Side::Row => l.deactivate_row(o.offset + u),
                        Side::Col => {
                            for r in 0..l.out_dim() {
                                l.deactivate(r, o.offset + u);
                            }
                        }
                    }
                }
            }
        }
        for l in layers.iter_mut() {
            l.apply_mask();
        }
    }

    /// Chooses dormant units to wake on every axis. A unit's score is the sum,
    /// over its lines, of `|G|` restricted to the layer's active lines on the
    /// other side.
    pub fn plan_grow(&self, layers: &[&MaskedLinear], grads: &[&Matrix], requests: &[Request]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
        self.check(layers.len(), layers)?;
        if requests.len() != self.axes.len() || grads.len() != layers.len() {
            return Err(Error::contract("one request per axis and one gradient per layer required"));
        }
        for (l, g) in layers.iter().zip(grads) {
            check_gradient(l, g)?;
        }
        let sets: Vec<ActiveSets> = layers.iter().map(|l| ActiveSets::of(l)).collect();
        let mut plan = Vec::new();
        let mut shortfalls = Vec::new();
        for (a, req) in self.axes.iter().zip(requests) {
            let k = match *req {
                Request::Ratio(p) => {
                    check_ratio(&format!("growth ratio for {}", a.name), p)?;
                    ceil_count(p, a.size)
                }
                Request::Count(k) => k,
            };
            let dormant: Vec<usize> = (0..a.size).filter(|&u| !a.unit_active(layers, u)).collect();
            let score = |u: usize| -> f64 {
                a.occurrences
                    .iter()
                    .map(|o| {
                        let g = grads[o.layer];
                        let s = &sets[o.layer];
                        let line = o.offset + u;
                        match o.side {
                            Side::Row => s.cols.iter().map(|&c| g[(line, c)].abs()).sum::<f64>(),
                            Side::Col => s.rows.iter().map(|&r| g[(r, line)].abs()).sum::<f64>(),
                        }
                    })
                    .sum()
            };
            let (units, short) = pick_grow(&dormant, score, k);
            plan.push(units);
            shortfalls.push(short);
        }
        Ok((plan, shortfalls))
    }

    /// Wakes the planned units across the lines that were active before the
    /// growth (`sets`), each weight starting at `−lr·G`.
    pub fn apply_grow(&self, layers: &mut [&mut MaskedLinear], grads: &[&Matrix], plan: &[Vec<usize>], lr: f64) {
        let sets: Vec<ActiveSets> = layers.iter().map(|l| ActiveSets::of(l)).collect();
        for (a, units) in self.axes.iter().zip(plan) {
            for &u in units {
                for o in &a.occurrences {
                    let l = &mut *layers[o.layer];
                    let g = grads[o.layer];
                    let s = &sets[o.layer];
                    let line = o.offset + u;
                    match o.side {
                        Side::Row => {
                            for &c in &s.cols {
                                l.activate(line, c, -lr * g[(line, c)]);
                            }
                        }
                        Side::Col => {
                            for &r in &s.rows {
                                l.activate(r, line, -lr * g[(r, line)]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Widths of a cell as seen through its structural axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveDims {
    pub d_x: usize,
    pub d_s: usize,
    pub d_h: usize,
}

/// The structural group of one cell plus the layers it touches, in group
/// order. Axes: `d_h` (gate hidden neurons, if the cell has hidden layers),
/// `d_s` (state units: gate output rows, recurrent input columns and the
/// consumer's input columns) and, for the first cell, `d_x` (input columns).
pub struct CellStructure {
    pub layers: Vec<LayerId>,
    pub group: StructureGroup,
}

pub const AXIS_DH: &str = "d_h";
pub const AXIS_DS: &str = "d_s";
pub const AXIS_DX: &str = "d_x";

impl CellStructure {
    pub fn of(model: &LmModel, cell: usize) -> Result<Self> {
        let c = model
            .cells()
            .get(cell)
            .ok_or_else(|| Error::contract(format!("no cell {cell}")))?;
        let dims = c.dims();
        let deep = dims.hidden_depth == 1;
        let mut layers = Vec::new();
        let idx = |layers: &mut Vec<LayerId>, id: LayerId| {
            layers.push(id);
            layers.len() - 1
        };
        let mut dh = Vec::new();
        let mut ds = Vec::new();
        let mut dx = Vec::new();
        for gate in GateKind::ALL {
            let out = idx(&mut layers, LayerId::Cell { cell, gate, part: LayerPart::Output });
            ds.push(Occurrence { layer: out, side: Side::Row, offset: 0 });
            let input_layer = if deep {
                let hid = idx(&mut layers, LayerId::Cell { cell, gate, part: LayerPart::Hidden });
                dh.push(Occurrence { layer: hid, side: Side::Row, offset: 0 });
                dh.push(Occurrence { layer: out, side: Side::Col, offset: 0 });
                hid
            } else {
                out
            };
            ds.push(Occurrence { layer: input_layer, side: Side::Col, offset: dims.d_x });
            dx.push(Occurrence { layer: input_layer, side: Side::Col, offset: 0 });
        }
        if cell + 1 < model.cells().len() {
            let next = &model.cells()[cell + 1];
            for gate in GateKind::ALL {
                let part = if next.gate(gate).hidden.is_some() { LayerPart::Hidden } else { LayerPart::Output };
                let l = idx(&mut layers, LayerId::Cell { cell: cell + 1, gate, part });
                ds.push(Occurrence { layer: l, side: Side::Col, offset: 0 });
            }
        } else {
            let l = idx(&mut layers, LayerId::Head);
            ds.push(Occurrence { layer: l, side: Side::Col, offset: 0 });
        }
        let mut axes = Vec::new();
        if deep {
            axes.push(Axis { name: AXIS_DH.into(), size: dims.d_h, occurrences: dh });
        }
        axes.push(Axis { name: AXIS_DS.into(), size: dims.d_s, occurrences: ds });
        if cell == 0 {
            axes.push(Axis { name: AXIS_DX.into(), size: dims.d_x, occurrences: dx });
        }
        Ok(Self { layers, group: StructureGroup { axes } })
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.group.axes.iter().position(|a| a.name == name)
    }

    pub fn layer_refs<'a>(&self, model: &'a LmModel) -> Vec<&'a MaskedLinear> {
        self.layers.iter().map(|&id| model.layer(id).expect("structure layer exists")).collect()
    }

    /// Mutable references to the group's layers, in group order.
    pub fn layer_muts<'a>(&self, model: &'a mut LmModel) -> Vec<&'a mut MaskedLinear> {
        let mut all: Vec<(LayerId, &'a mut MaskedLinear)> = Vec::new();
        let ids = model.layer_ids();
        // Split the model into disjoint layer borrows.
        let (cells, head) = model.cells_and_head_mut();
        for (ci, cell) in cells.iter_mut().enumerate() {
            for (gate, g) in GateKind::ALL.iter().zip(cell.gates_mut().iter_mut()) {
                if let Some(h) = g.hidden.as_mut() {
                    all.push((LayerId::Cell { cell: ci, gate: *gate, part: LayerPart::Hidden }, h));
                }
                all.push((LayerId::Cell { cell: ci, gate: *gate, part: LayerPart::Output }, &mut g.output));
            }
        }
        all.push((LayerId::Head, head));
        debug_assert_eq!(all.len(), ids.len());
        let mut slots: Vec<Option<&'a mut MaskedLinear>> = Vec::new();
        let mut by_id: Vec<(LayerId, Option<&'a mut MaskedLinear>)> = all.into_iter().map(|(i, l)| (i, Some(l))).collect();
        for want in &self.layers {
            let slot = by_id.iter_mut().find(|(i, _)| i == want).expect("structure layer exists");
            slots.push(slot.1.take());
        }
        slots.into_iter().map(|s| s.expect("layer listed once")).collect()
    }

    pub fn active_dims(&self, model: &LmModel) -> ActiveDims {
        let layers = self.layer_refs(model);
        let count = |name: &str| {
            self.axis_index(name)
                .map(|i| self.group.axes[i].active_units(&layers).len())
                .unwrap_or(0)
        };
        ActiveDims {
            d_x: match self.axis_index(AXIS_DX) {
                Some(_) => count(AXIS_DX),
                None => model.cells()[0].dims().d_s,
            },
            d_s: count(AXIS_DS),
            d_h: count(AXIS_DH),
        }
    }

    /// Coordinated prune; returns the pruned units per axis.
    pub fn prune(&self, model: &mut LmModel, requests: &[Request]) -> Result<Vec<Vec<usize>>> {
        let plan = self.group.plan_prune(&self.layer_refs(model), requests)?;
        self.group.apply_prune(&mut self.layer_muts(model), &plan);
        Ok(plan)
    }

    /// Coordinated growth from per-layer bridging gradients (indexed like
    /// `model.layer_ids()`). Returns woken units and shortfalls per axis.
    pub fn grow(&self, model: &mut LmModel, grads: &[(LayerId, Matrix)], requests: &[Request], lr: f64) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
        let mut gs: Vec<&Matrix> = Vec::with_capacity(self.layers.len());
        for id in &self.layers {
            let g = grads
                .iter()
                .find(|(i, _)| i == id)
                .map(|(_, g)| g)
                .ok_or_else(|| Error::contract(format!("no bridging gradient for {}", id.label())))?;
            gs.push(g);
        }
        let (plan, short) = self.group.plan_grow(&self.layer_refs(model), &gs, requests)?;
        self.group.apply_grow(&mut self.layer_muts(model), &gs, &plan, lr);
        Ok((plan, short))
    }
}

/// Requests for a cell's axes in [`CellStructure`] order.
pub fn cell_requests(s: &CellStructure, d_h: Request, d_s: Request, d_x: Request) -> Vec<Request> {
    s.group
        .axes
        .iter()
        .map(|a| match a.name.as_str() {
            AXIS_DH => d_h,
            AXIS_DS => d_s,
            _ => d_x,
        })
        .collect()
}

/// Gate-local dead-neuron cleanup: a gate hidden neuron whose output
/// weights are all pruned is removed from the hidden layer, and one whose
/// inputs are all pruned (with `act(0) = 0`) is removed from the output
/// layer. Returns the number of lines cleared.
pub fn propagate_dead_neurons(model: &mut LmModel) -> usize {
    let mut cleared = 0;
    for cell in model.cells_mut() {
        let zero_at_zero = cell.hidden_activation().apply(0.0) == 0.0;
        for g in cell.gates_mut() {
            let Some(h) = g.hidden.as_mut() else { continue };
            for u in 0..h.out_dim() {
                let row_live = h.mask().row_active(u);
                let col_live = g.output.mask().col_active(u);
                if row_live && !col_live {
                    h.deactivate_row(u);
                    cleared += 1;
                } else if !row_live && col_live && zero_at_zero {
                    for r in 0..g.output.out_dim() {
                        g.output.deactivate(r, u);
                    }
                    g.output.apply_mask();
                    cleared += 1;
                }
            }
        }
    }
    cleared
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hlstm::ModelSpec;
    use crate::numkit::{Activation, SeededRng};

    fn model(depth: u8, stack: usize) -> LmModel {
        let mut m = LmModel::zeros(&ModelSpec {
            vocab: 5,
            d_x: 3,
            d_s: 4,
            d_h: 6,
            hidden_depth: depth,
            stack,
            hidden_activation: Activation::Relu,
            dropout_h: 0.0,
        })
        .unwrap();
        m.init_uniform(&mut SeededRng::new(3));
        m
    }

    #[test]
    fn structure_covers_expected_lines() {
        let m = model(1, 1);
        let s = CellStructure::of(&m, 0).unwrap();
        assert_eq!(s.layers.len(), 9);
        let names: Vec<&str> = s.group.axes.iter().map(|a| a.name.as_str()).collect();
        assert_eq!(names, vec![AXIS_DH, AXIS_DS, AXIS_DX]);
        assert_eq!(s.group.axes[0].occurrences.len(), 8);
        assert_eq!(s.group.axes[1].occurrences.len(), 9);
        assert_eq!(s.active_dims(&m), ActiveDims { d_x: 3, d_s: 4, d_h: 6 });
    }

    #[test]
    fn coordinated_prune_keeps_gates_equal() {
        let mut m = model(1, 1);
        let s = CellStructure::of(&m, 0).unwrap();
        let req = cell_requests(&s, Request::Count(2), Request::Count(1), Request::Count(0));
        s.prune(&mut m, &req).unwrap();
        assert_eq!(s.active_dims(&m), ActiveDims { d_x: 3, d_s: 3, d_h: 4 });
        for c in m.cells() {
            for g in c.gates() {
                assert_eq!(g.hidden.as_ref().unwrap().mask().active_rows().len(), 4);
                assert_eq!(g.output.mask().active_rows().len(), 3);
                assert_eq!(g.output.mask().active_cols().len(), 4);
            }
        }
        assert_eq!(m.head().mask().active_cols().len(), 3);
    }

    #[test]
    fn stacked_cell_consumer_is_next_cell() {
        let m = model(0, 2);
        let s = CellStructure::of(&m, 0).unwrap();
        // plain gates: 4 outputs + 4 consumer layers in the next cell
        assert_eq!(s.layers.len(), 8);
        let s1 = CellStructure::of(&m, 1).unwrap();
        assert!(s1.axis_index(AXIS_DX).is_none());
        assert!(s1.layers.contains(&LayerId::Head));
    }

    #[test]
    fn dead_hidden_neuron_is_cleared_in_output() {
        let mut m = model(1, 1);
        let gate = m.cells_mut()[0].gate_mut(GateKind::Input);
        gate.hidden.as_mut().unwrap().deactivate_row(2);
        assert_eq!(propagate_dead_neurons(&mut m), 1);
        assert!(!m.cells()[0].gate(GateKind::Input).output.mask().col_active(2));
    }
}
