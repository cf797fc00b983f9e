//! Central finite differences against BPTT on tiny H-LSTM models.

use lhsynth_core::hlstm::{softmax_nll, LmModel, ModelSpec};
use lhsynth_core::numkit::{Activation, Mask, SeededRng};

pub fn spec(depth: u8, stack: usize) -> ModelSpec {
    ModelSpec {
        vocab: 6,
        d_x: 3,
        d_s: 4,
        d_h: 5,
        hidden_depth: depth,
        stack,
        hidden_activation: Activation::Relu,
        dropout_h: 0.0,
    }
}

/// Random weights, biases and ~70%-dense masks on every layer.
pub fn random_model(spec: &ModelSpec, seed: u64) -> LmModel {
    let mut rng = SeededRng::new(seed);
    let mut m = LmModel::zeros(spec).unwrap();
    for v in m.embedding_mut().as_mut_slice() {
        *v = rng.uniform(-1.0, 1.0);
    }
    for id in m.layer_ids() {
        let layer = m.layer_mut(id).unwrap();
        let (r, c) = (layer.out_dim(), layer.in_dim());
        let bits: Vec<bool> = (0..r * c).map(|_| rng.bernoulli(0.7)).collect();
        layer.set_mask(Mask::from_fn(r, c, |i, j| bits[i * c + j])).unwrap();
        for i in 0..r {
            for j in 0..c {
                let v = rng.uniform(-0.9, 0.9);
                if layer.mask().get(i, j) {
                    layer.weight_mut()[(i, j)] = v;
                }
            }
            layer.bias_mut()[i] = rng.uniform(-0.5, 0.5);
        }
    }
    m
}

pub fn random_tokens(rng: &mut SeededRng, t: usize, b: usize, v: usize) -> Vec<Vec<usize>> {
    (0..t).map(|_| (0..b).map(|_| rng.below(v)).collect()).collect()
}

pub fn total_loss(m: &LmModel, inputs: &[Vec<usize>], targets: &[Vec<usize>]) -> f64 {
    let out = m
        .unroll_forward(inputs, &m.initial_state(inputs[0].len()), None)
        .unwrap();
    out.logits
        .iter()
        .zip(targets)
        .map(|(l, t)| softmax_nll(l, t, None).unwrap())
        .sum()
}

/// `|a − n| / max(|a|, |n|, 1e-4)`. The floor sits above the central
/// difference round-off (about ε·|L|/h ≈ 1e-10 here), so tiny gradients are
/// held to an absolute 1e-9 instead of a meaningless ratio of noise.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Central differences for every weight (active and dormant), bias and
/// embedding entry; returns the worst relative error.
pub fn max_gradient_error(spec: &ModelSpec, seed: u64) -> f64 {
    let h = 1e-5;
    let mut model = random_model(spec, seed);
    let mut rng = SeededRng::new(seed ^ 0xABCD);
    let inputs = random_tokens(&mut rng, 4, 2, spec.vocab);
    let targets = random_tokens(&mut rng, 4, 2, spec.vocab);

    let out = model
        .unroll_forward(&inputs, &model.initial_state(2), None)
        .unwrap();
    model.bptt(out.cache, &out.logits, &targets, 1.0).unwrap();

    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for id in model.layer_ids() {
        let analytic = model.layer(id).unwrap().clone();
        let (r, c) = (analytic.out_dim(), analytic.in_dim());
        for i in 0..r {
            for j in 0..c {
                let was_on = analytic.mask().get(i, j);
                let w0 = analytic.weight()[(i, j)];
                // A dormant entry's gradient is the derivative w.r.t. the
                // effective weight at zero: wake it at 0, then perturb.
                probe.layer_mut(id).unwrap().activate(i, j, w0 + h);
                let lp = total_loss(&probe, &inputs, &targets);
                probe.layer_mut(id).unwrap().activate(i, j, w0 - h);
                let lm = total_loss(&probe, &inputs, &targets);
                if was_on {
                    probe.layer_mut(id).unwrap().activate(i, j, w0);
                } else {
                    probe.layer_mut(id).unwrap().deactivate(i, j);
                }
                let num = (lp - lm) / (2.0 * h);
                worst = worst.max(rel_err(analytic.grad_w()[(i, j)], num));
            }
            let b0 = analytic.bias()[i];
            probe.layer_mut(id).unwrap().bias_mut()[i] = b0 + h;
            let lp = total_loss(&probe, &inputs, &targets);
            probe.layer_mut(id).unwrap().bias_mut()[i] = b0 - h;
            let lm = total_loss(&probe, &inputs, &targets);
            probe.layer_mut(id).unwrap().bias_mut()[i] = b0;
            worst = worst.max(rel_err(analytic.grad_b()[i], (lp - lm) / (2.0 * h)));
        }
    }
    let ge = model.grad_embedding().unwrap().clone();
    for k in 0..ge.as_slice().len() {
        let e0 = probe.embedding().as_slice()[k];
        probe.embedding_mut().as_mut_slice()[k] = e0 + h;
        let lp = total_loss(&probe, &inputs, &targets);
        probe.embedding_mut().as_mut_slice()[k] = e0 - h;
        let lm = total_loss(&probe, &inputs, &targets);
        probe.embedding_mut().as_mut_slice()[k] = e0;
        worst = worst.max(rel_err(ge.as_slice()[k], (lp - lm) / (2.0 * h)));
    }
    worst
}

