use serde::{Deserialize, Serialize};

use super::cell::{CellDims, CellState, Dropout, GateKind, HlstmCell, StepCache};
use crate::error::{Error, Result};
use crate::numkit::{clip_factor, sgd_step, Activation, MaskedLinear, Matrix, SeededRng};

/// Shape of a language model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: usize,
    pub d_x: usize,
    pub d_s: usize,
    pub d_h: usize,
    pub hidden_depth: u8,
    pub stack: usize,
    pub hidden_activation: Activation,
    pub dropout_h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerPart {
    Hidden,
    Output,
}

/// Addresses one masked layer of an [`LmModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerId {
    Cell {
        cell: usize,
        gate: GateKind,
        part: LayerPart,
    },
    Head,
}

impl LayerId {
    pub fn label(&self) -> String {
        match self {
            LayerId::Cell { cell, gate, part } => format!(
                "cell{cell}.{}.{}",
                gate.label(),
                match part {
                    LayerPart::Hidden => "hidden",
                    LayerPart::Output => "output",
                }
            ),
            LayerId::Head => "head".to_string(),
        }
    }
}

/// Parameter totals split the way the synthesis report shows them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub cell_total: usize,
    pub cell_active: usize,
    pub embedding_total: usize,
    pub embedding_active: usize,
    pub head_total: usize,
    pub head_active: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.cell_total + self.embedding_total + self.head_total
    }

    pub fn active(&self) -> usize {
        self.cell_active + self.embedding_active + self.head_active
    }
}

/// Embedding → stacked H-LSTM cells → masked softmax head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmModel {
    embedding: Matrix,
    cells: Vec<HlstmCell>,
    head: MaskedLinear,
    dropout_h: f64,
    #[serde(skip)]
    grad_embedding: Option<Matrix>,
}

/// Output of [`LmModel::unroll_forward`].
#[derive(Debug)]
pub struct Unrolled {
    /// One `V × batch` matrix per time step.
    pub logits: Vec<Matrix>,
    pub final_state: Vec<CellState>,
    pub cache: UnrollCache,
}

/// Per-step caches for [`LmModel::bptt`].
#[derive(Debug)]
pub struct UnrollCache {
    tokens: Vec<Vec<usize>>,
    steps: Vec<Vec<StepCache>>,
    head_inputs: Vec<Matrix>,
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Total negative log-likelihood of `targets` under column-wise softmax of
/// `logits`; optionally writes `scale·(softmax − onehot)` into `grad`.
pub fn softmax_nll(logits: &Matrix, targets: &[usize], grad: Option<&mut Matrix>) -> Result<f64> {
    let (v, batch) = logits.shape();
    if targets.len() != batch {
        return Err(Error::contract(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let mut probs = Matrix::zeros(v, batch);
    let mut total = 0.0;
    for (b, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::Input(format!("target token {t} outside vocabulary of {v}")));
        }
        let mut m = f64::NEG_INFINITY;
        for r in 0..v {
            m = m.max(logits[(r, b)]);
        }
        let mut z = 0.0;
        for r in 0..v {
            let e = (logits[(r, b)] - m).exp();
            probs[(r, b)] = e;
            z += e;
        }
        for r in 0..v {
            probs[(r, b)] /= z;
        }
        total += m + z.ln() - logits[(t, b)];
    }
    if !total.is_finite() {
        return Err(Error::non_finite("softmax loss"));
    }
    if let Some(g) = grad {
        for (b, &t) in targets.iter().enumerate() {
            probs[(t, b)] -= 1.0;
        }
        *g = probs;
    }
    Ok(total)
}

impl LmModel {
    /// All-zero model with dense masks.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        if spec.vocab < 2 {
            return Err(Error::config("vocabulary must have at least 2 symbols"));
        }
        if spec.stack == 0 {
            return Err(Error::config("stack depth must be at least 1"));
        }
        if !(0.0..1.0).contains(&spec.dropout_h) {
            return Err(Error::config("dropout_h must lie in [0, 1)"));
        }
        let mut cells = Vec::with_capacity(spec.stack);
        for l in 0..spec.stack {
            let dims = CellDims {
                d_x: if l == 0 { spec.d_x } else { spec.d_s },
                d_s: spec.d_s,
                d_h: if spec.hidden_depth == 0 { 0 } else { spec.d_h },
                hidden_depth: spec.hidden_depth,
            };
            cells.push(HlstmCell::zeros(dims, spec.hidden_activation)?);
        }
        Ok(Self {
            embedding: Matrix::zeros(spec.vocab, spec.d_x),
            cells,
            head: MaskedLinear::new(spec.vocab, spec.d_s),
            dropout_h: spec.dropout_h,
            grad_embedding: None,
        })
    }

    /// Scaled fan-in uniform init: weights `U(±1/√fan_in)`, biases zero,
    /// embedding `U(±1/√d_x)`. Masks are re-applied afterwards.
    pub fn init_uniform(&mut self, rng: &mut SeededRng) {
        let s = 1.0 / (self.embedding.cols() as f64).sqrt();
        for v in self.embedding.as_mut_slice() {
            *v = rng.uniform(-s, s);
        }
        for id in self.layer_ids() {
            let layer = self.layer_mut(id).expect("listed layer exists");
            let bound = 1.0 / (layer.in_dim() as f64).sqrt();
            for v in layer.weight_mut().as_mut_slice() {
                *v = rng.uniform(-bound, bound);
            }
            layer.bias_mut().iter_mut().for_each(|b| *b = 0.0);
            layer.apply_mask();
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn d_x(&self) -> usize {
        self.embedding.cols()
    }

    pub fn dropout_h(&self) -> f64 {
        self.dropout_h
    }

    pub fn set_dropout_h(&mut self, p: f64) {
        self.dropout_h = p;
    }

    pub fn embedding(&self) -> &Matrix {
        &self.embedding
    }

    pub fn embedding_mut(&mut self) -> &mut Matrix {
        &mut self.embedding
    }

    pub fn cells(&self) -> &[HlstmCell] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [HlstmCell] {
        &mut self.cells
    }

    /// Disjoint mutable borrows of the cells and the head.
    pub fn cells_and_head_mut(&mut self) -> (&mut [HlstmCell], &mut MaskedLinear) {
        (&mut self.cells, &mut self.head)
    }

    pub fn head(&self) -> &MaskedLinear {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut MaskedLinear {
        &mut self.head
    }

    /// Canonical layer order: cells in stack order, per gate hidden then
    /// output, then the head.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids = self.cell_layer_ids();
        ids.push(LayerId::Head);
        ids
    }

    pub fn cell_layer_ids(&self) -> Vec<LayerId> {
        let mut ids = Vec::new();
        for (cell, c) in self.cells.iter().enumerate() {
            for gate in GateKind::ALL {
                if c.gate(gate).hidden.is_some() {
                    ids.push(LayerId::Cell {
                        cell,
                        gate,
                        part: LayerPart::Hidden,
                    });
                }
                ids.push(LayerId::Cell {
                    cell,
                    gate,
                    part: LayerPart::Output,
                });
            }
        }
        ids
    }

    pub fn layer(&self, id: LayerId) -> Option<&MaskedLinear> {
        match id {
            LayerId::Head => Some(&self.head),
            LayerId::Cell { cell, gate, part } => {
                let g = self.cells.get(cell)?.gate(gate);
                match part {
                    LayerPart::Hidden => g.hidden.as_ref(),
                    LayerPart::Output => Some(&g.output),
                }
            }
        }
    }

    pub fn layer_mut(&mut self, id: LayerId) -> Option<&mut MaskedLinear> {
        match id {
            LayerId::Head => Some(&mut self.head),
            LayerId::Cell { cell, gate, part } => {
                let g = self.cells.get_mut(cell)?.gate_mut(gate);
                match part {
                    LayerPart::Hidden => g.hidden.as_mut(),
                    LayerPart::Output => Some(&mut g.output),
                }
            }
        }
    }

    pub fn set_dormant_grads(&mut self, on: bool) {
        for id in self.layer_ids() {
            self.layer_mut(id).expect("listed layer exists").set_dormant_grads(on);
        }
    }

    pub fn initial_state(&self, batch: usize) -> Vec<CellState> {
        self.cells
            .iter()
            .map(|c| CellState::zeros(c.dims().d_s, batch))
            .collect()
    }

    /// Input columns of the first cell that still feed some gate.
    pub fn active_input_columns(&self) -> Vec<usize> {
        let first = &self.cells[0];
        let d_x = first.dims().d_x;
        (0..d_x)
            .filter(|&c| {
                first.gates().iter().any(|g| {
                    let l = g.hidden.as_ref().unwrap_or(&g.output);
                    l.mask().col_active(c)
                })
            })
            .collect()
    }

    pub fn param_count(&self) -> ParamCount {
        let mut pc = ParamCount::default();
        for id in self.cell_layer_ids() {
            let l = self.layer(id).expect("listed layer exists");
            pc.cell_total += l.total_params();
            pc.cell_active += l.active_params();
        }
        pc.embedding_total = self.embedding.rows() * self.embedding.cols();
        pc.embedding_active = self.embedding.rows() * self.active_input_columns().len();
        pc.head_total = self.head.total_params();
        pc.head_active = self.head.active_params();
        pc
    }

    fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        let v = self.vocab();
        let d_x = self.d_x();
        let mut x = Matrix::zeros(d_x, tokens.len());
        for (b, &t) in tokens.iter().enumerate() {
            if t >= v {
                return Err(Error::Input(format!("token {t} outside vocabulary of {v}")));
            }
            for k in 0..d_x {
                x[(k, b)] = self.embedding[(t, k)];
            }
        }
        Ok(x)
    }

    /// Runs `inputs[t][b]` through the model from `init`. Dropout is active
    /// only when `rng` is given and `dropout_h > 0`.
    pub fn unroll_forward(
        &self,
        inputs: &[Vec<usize>],
        init: &[CellState],
        mut rng: Option<&mut SeededRng>,
    ) -> Result<Unrolled> {
        if init.len() != self.cells.len() {
            return Err(Error::contract(format!(
                "{} initial states for {} cells",
                init.len(),
                self.cells.len()
            )));
        }
        let mut state: Vec<CellState> = init.to_vec();
        let mut logits = Vec::with_capacity(inputs.len());
        let mut steps = Vec::with_capacity(inputs.len());
        let mut head_inputs = Vec::with_capacity(inputs.len());
        for (t, tokens) in inputs.iter().enumerate() {
            let mut x = self.embed(tokens)?;
            let mut caches = Vec::with_capacity(self.cells.len());
            for (l, cell) in self.cells.iter().enumerate() {
                let dropout = match rng.as_deref_mut() {
                    Some(r) if self.dropout_h > 0.0 => Some(Dropout {
                        ratio: self.dropout_h,
                        rng: r,
                    }),
                    _ => None,
                };
                let (next, cache) = cell.forward(&x, &state[l], dropout).map_err(|e| match e {
                    Error::NonFinite { context } => Error::NonFinite {
                        context: format!("{context} (cell {l}, step {t})"),
                    },
                    other => other,
                })?;
                x = next.h.clone();
                state[l] = next;
                caches.push(cache);
            }
            logits.push(self.head.forward(&x)?);
            head_inputs.push(x);
            steps.push(caches);
        }
        Ok(Unrolled {
            logits,
            final_state: state,
            cache: UnrollCache {
                tokens: inputs.to_vec(),
                steps,
                head_inputs,
            },
        })
    }

    /// Backpropagates the softmax loss through every step of `cache`,
    /// accumulating gradients scaled by `loss_scale`. Returns the unscaled
    /// total NLL.
    pub fn bptt(
        &mut self,
        cache: UnrollCache,
        logits: &[Matrix],
        targets: &[Vec<usize>],
        loss_scale: f64,
    ) -> Result<f64> {
        if logits.len() != cache.steps.len() || targets.len() != logits.len() {
            return Err(Error::contract("logits, targets and cache disagree in length"));
        }
        let UnrollCache {
            tokens,
            mut steps,
            mut head_inputs,
        } = cache;
        let n_cells = self.cells.len();
        let batch = tokens.first().map_or(0, Vec::len);
        let mut total = 0.0;
        let mut dh_next: Vec<Matrix> = self
            .cells
            .iter()
            .map(|c| Matrix::zeros(c.dims().d_s, batch))
            .collect();
        let mut dc_next = dh_next.clone();
        let grad_e = self
            .grad_embedding
            .get_or_insert_with(|| Matrix::zeros(self.embedding.rows(), self.embedding.cols()));
        let mut grad_e = std::mem::replace(grad_e, Matrix::zeros(0, 0));

        for t in (0..logits.len()).rev() {
            let mut dlogits = Matrix::zeros(0, 0);
            total += softmax_nll(&logits[t], &targets[t], Some(&mut dlogits))?;
            dlogits.scale(loss_scale);
            let h_top = head_inputs.pop().expect("one head input per step");
            let mut d_above = self.head.backward(&h_top, &dlogits)?;
            let mut step = steps.pop().expect("one cache per step");
            for l in (0..n_cells).rev() {
                let cache_l = step.pop().expect("one cache per cell");
                let mut dh = d_above;
                dh.add_assign(&dh_next[l])?;
                let (dx, dprev) = self.cells[l].backward(cache_l, &dh, &dc_next[l])?;
                dh_next[l] = dprev.h;
                dc_next[l] = dprev.c;
                d_above = dx;
            }
            for (b, &tok) in tokens[t].iter().enumerate() {
                for k in 0..grad_e.cols() {
                    grad_e[(tok, k)] += d_above[(k, b)];
                }
            }
        }
        self.grad_embedding = Some(grad_e);
        Ok(total)
    }

    pub fn grad_embedding(&self) -> Option<&Matrix> {
        self.grad_embedding.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for id in self.layer_ids() {
            self.layer_mut(id).expect("listed layer exists").zero_grad();
        }
        if let Some(g) = self.grad_embedding.as_mut() {
            g.fill(0.0);
        }
    }

    /// Clipped SGD over every layer and the embedding. Returns the
    /// pre-clipping global gradient norm.
    pub fn sgd_step(&mut self, lr: f64, weight_decay: f64, max_norm: Option<f64>) -> Result<f64> {
        let ids = self.layer_ids();
        let mut sq = 0.0;
        for &id in &ids {
            sq += self.layer(id).expect("listed layer exists").applied_grad_sq_norm();
        }
        if let Some(g) = &self.grad_embedding {
            sq += g.frobenius_sq();
        }
        if !sq.is_finite() {
            return Err(Error::non_finite("global gradient norm"));
        }
        let factor = clip_factor(sq, max_norm);
        for &id in &ids {
            let layer = self.layer_mut(id).expect("listed layer exists");
            if factor != 1.0 {
                layer.scale_grads(factor);
            }
            sgd_step(layer, lr, weight_decay, &id.label())?;
        }
        if let Some(g) = self.grad_embedding.as_mut() {
            for (w, gv) in self.embedding.as_mut_slice().iter_mut().zip(g.as_mut_slice()) {
                *w -= lr * (factor * *gv + weight_decay * *w);
                *gv = 0.0;
            }
        }
        Ok(sq.sqrt())
    }

    /// Mean NLL per token over `windows`, carrying state across them, with
    /// dropout off.
    pub fn evaluate(&self, windows: &[super::corpus::Window]) -> Result<f64> {
        let batch = match windows.first() {
            Some(w) => w.batch(),
            None => return Err(Error::Input("no evaluation windows".into())),
        };
        let mut state = self.initial_state(batch);
        let mut total = 0.0;
        let mut count = 0usize;
        for w in windows {
            let out = self.unroll_forward(&w.inputs, &state, None)?;
            for (lg, tg) in out.logits.iter().zip(&w.targets) {
                total += softmax_nll(lg, tg, None)?;
                count += tg.len();
            }
            state = out.final_state;
        }
        Ok(total / count as f64)
    }
}
