use serde::{Deserialize, Serialize};

use super::corpus::Window;
use super::model::{LayerId, LmModel};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, SeededRng};

/// SGD schedule knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplier applied to the learning rate on a validation plateau.
    pub lr_decay: f64,
    /// Epochs without validation improvement before decaying.
    pub patience: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch: usize,
    pub seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            lr_decay: 0.1,
            patience: 1,
            weight_decay: 1e-6,
            grad_clip: Some(0.25),
            batch: 16,
            seq_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("lr_decay must lie in (0, 1]"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::config("batch and seq_len must be positive"));
        }
        Ok(())
    }
}

/// Plateau-decay learning-rate state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrState {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl LrState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Records a validation metric (lower is better); decays the rate after
    /// `patience` epochs without improvement. Returns true on decay.
    pub fn observe(&mut self, metric: f64, cfg: &TrainConfig) -> bool {
        match self.best {
            Some(b) if metric >= b => {
                self.bad_epochs += 1;
                if self.bad_epochs >= cfg.patience.max(1) {
                    self.lr *= cfg.lr_decay;
                    self.bad_epochs = 0;
                    return true;
                }
                false
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
                false
            }
        }
    }
}

/// How many minibatches contribute to a bridging gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BridgingMode {
    /// Average over every minibatch of the pass.
    #[default]
    Epoch,
    /// Average over the first `n` minibatches only.
    Batches(usize),
}

impl BridgingMode {
    fn limit(self) -> Option<usize> {
        match self {
            BridgingMode::Epoch => None,
            BridgingMode::Batches(n) => Some(n),
        }
    }
}

/// Running sum of per-minibatch weight gradients for every masked layer,
/// dormant entries included.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    ids: Vec<LayerId>,
    sums: Vec<Matrix>,
    batches: usize,
    limit: Option<usize>,
}

impl GradAccumulator {
    pub fn new(model: &LmModel, mode: BridgingMode) -> Self {
        let ids = model.layer_ids();
        let sums = ids
            .iter()
            .map(|&id| {
                let l = model.layer(id).expect("listed layer exists");
                Matrix::zeros(l.out_dim(), l.in_dim())
            })
            .collect();
        Self {
            ids,
            sums,
            batches: 0,
            limit: mode.limit(),
        }
    }

    pub fn wants_more(&self) -> bool {
        self.limit.map_or(true, |n| self.batches < n)
    }

    /// Adds the model's current (unclipped) weight gradients.
    pub fn add(&mut self, model: &LmModel) -> Result<()> {
        if !self.wants_more() {
            return Ok(());
        }
        for (id, sum) in self.ids.iter().zip(self.sums.iter_mut()) {
            sum.add_assign(model.layer(*id).expect("listed layer exists").grad_w())?;
        }
        self.batches += 1;
        Ok(())
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    /// Per-layer averages, in the model's canonical layer order.
    pub fn average(self) -> Vec<(LayerId, Matrix)> {
        let n = self.batches.max(1) as f64;
        self.ids
            .into_iter()
            .zip(self.sums)
            .map(|(id, mut m)| {
                m.scale(1.0 / n);
                (id, m)
            })
            .collect()
    }
}

/// One pass of truncated BPTT over `windows` with state carried between
/// windows. Returns mean training NLL per token.
pub fn train_epoch(
    model: &mut LmModel,
    windows: &[Window],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut SeededRng,
    mut bridging: Option<&mut GradAccumulator>,
) -> Result<f64> {
    let batch = windows.first().map_or(0, Window::batch);
    let mut state = model.initial_state(batch);
    let mut total = 0.0;
    let mut count = 0usize;
    model.set_dormant_grads(bridging.is_some());
    model.zero_grad();
    for w in windows {
        let out = model.unroll_forward(&w.inputs, &state, Some(rng))?;
        let tokens = w.len() * w.batch();
        let loss = model.bptt(out.cache, &out.logits, &w.targets, 1.0 / tokens as f64)?;
        if !loss.is_finite() {
            return Err(Error::non_finite("training loss"));
        }
        total += loss;
        count += tokens;
        if let Some(acc) = bridging.as_deref_mut() {
            acc.add(model)?;
            if !acc.wants_more() {
                model.set_dormant_grads(false);
            }
        }
        model.sgd_step(lr, cfg.weight_decay, cfg.grad_clip)?;
        state = out.final_state;
    }
    model.set_dormant_grads(true);
    Ok(total / count.max(1) as f64)
}

/// Accumulates bridging gradients without touching the weights (dropout
/// off). Gradients are cleared afterwards.
pub fn gradient_pass(model: &mut LmModel, windows: &[Window], mode: BridgingMode) -> Result<GradAccumulator> {
    let mut acc = GradAccumulator::new(model, mode);
    let batch = windows.first().map_or(0, Window::batch);
    let mut state = model.initial_state(batch);
    model.set_dormant_grads(true);
    model.zero_grad();
    for w in windows {
        if !acc.wants_more() {
            break;
        }
        let out = model.unroll_forward(&w.inputs, &state, None)?;
        let tokens = w.len() * w.batch();
        model.bptt(out.cache, &out.logits, &w.targets, 1.0 / tokens as f64)?;
        acc.add(model)?;
        model.zero_grad();
        state = out.final_state;
    }
    Ok(acc)
}
