mod common;

use common::fd::{max_gradient_error, random_model, random_tokens, spec};
use lhsynth_core::hlstm::{
    perplexity, softmax_nll, CellDims, CellState, GateKind, HlstmCell, LayerId, LmModel,
    ModelSpec,
};
use lhsynth_core::numkit::{sigmoid, Activation, Matrix, SeededRng};

#[test]
fn bptt_matches_finite_differences_on_twenty_models() {
    for seed in 0..20 {
        let err = max_gradient_error(&spec(1, 1), seed);
        assert!(err <= 1e-5, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn bptt_matches_finite_differences_stacked_and_plain() {
    for seed in 100..104 {
        let err = max_gradient_error(&spec(1, 2), seed);
        assert!(err <= 1e-5, "stacked seed {seed}: {err:e}");
        let err = max_gradient_error(&spec(0, 1), seed);
        assert!(err <= 1e-5, "plain seed {seed}: {err:e}");
    }
}

#[test]
fn depth_zero_cell_is_a_plain_lstm() {
    let mut cell = HlstmCell::zeros(
        CellDims {
            d_x: 2,
            d_s: 3,
            d_h: 0,
            hidden_depth: 0,
        },
        Activation::Relu,
    )
    .unwrap();
    let mut rng = SeededRng::new(5);
    for l in cell.layers_mut() {
        for v in l.weight_mut().as_mut_slice() {
            *v = rng.uniform(-1.0, 1.0);
        }
        for b in l.bias_mut() {
            *b = rng.uniform(-1.0, 1.0);
        }
    }
    let x = [0.4, -0.7];
    let h = [0.1, -0.2, 0.3];
    let c = [0.5, 0.0, -0.6];
    let prev = CellState {
        h: Matrix::column(&h),
        c: Matrix::column(&c),
    };
    let (next, _) = cell.forward(&Matrix::column(&x), &prev, None).unwrap();

    // Textbook LSTM step with W·[x; h] + b per gate.
    let z: Vec<f64> = x.iter().chain(h.iter()).copied().collect();
    let affine = |kind: GateKind, r: usize| {
        let o = &cell.gate(kind).output;
        o.bias()[r] + (0..5).map(|k| o.weight()[(r, k)] * z[k]).sum::<f64>()
    };
    for r in 0..3 {
        let f = sigmoid(affine(GateKind::Forget, r));
        let i = sigmoid(affine(GateKind::Input, r));
        let o = sigmoid(affine(GateKind::Output, r));
        let g = affine(GateKind::Update, r).tanh();
        let c_new = f * c[r] + i * g;
        assert!((next.c.as_slice()[r] - c_new).abs() < 1e-14);
        assert!((next.h.as_slice()[r] - o * c_new.tanh()).abs() < 1e-14);
    }
}

#[test]
fn hidden_state_and_gates_stay_bounded() {
    let mut rng = SeededRng::new(77);
    for seed in 0..10 {
        let mut m = random_model(&spec(1, 1), seed);
        // Large weights push activations toward saturation.
        for id in m.layer_ids() {
            m.layer_mut(id).unwrap().weight_mut().scale(2.0);
        }
        let inputs = random_tokens(&mut rng, 12, 3, 6);
        let mut state = m.initial_state(3);
        for tok in &inputs {
            let x = Matrix::from_vec(
                3,
                3,
                (0..3)
                    .flat_map(|k| tok.iter().map(move |&t| (t as f64 - 2.5) * (k as f64 + 1.0)))
                    .collect(),
            )
            .unwrap();
            let (next, cache) = m.cells()[0].forward(&x, &state[0], None).unwrap();
            assert!(next.h.as_slice().iter().all(|v| v.abs() < 1.0));
            for g in [GateKind::Forget, GateKind::Input, GateKind::Output] {
                assert!(cache
                    .gate_value(g)
                    .as_slice()
                    .iter()
                    .all(|&v| v > 0.0 && v < 1.0));
            }
            state[0] = next;
        }
    }
}

#[test]
fn pruned_input_column_makes_output_invariant() {
    let mut m = random_model(&spec(1, 1), 3);
    for id in m.cell_layer_ids() {
        if let LayerId::Cell {
            part: lhsynth_core::hlstm::LayerPart::Hidden,
            ..
        } = id
        {
            m.layer_mut(id).unwrap().deactivate_col(1);
        }
    }
    let cell = &m.cells()[0];
    let prev = CellState {
        h: Matrix::column(&[0.1, 0.2, -0.3, 0.4]),
        c: Matrix::column(&[0.5, -0.5, 0.2, 0.0]),
    };
    let (a, _) = cell.forward(&Matrix::column(&[0.3, -2.0, 0.8]), &prev, None).unwrap();
    let (b, _) = cell.forward(&Matrix::column(&[0.3, 9.0, 0.8]), &prev, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unroll_equals_sequential_cell_steps() {
    let m = random_model(&spec(1, 1), 11);
    let inputs = vec![vec![1], vec![4], vec![2]];
    let out = m.unroll_forward(&inputs, &m.initial_state(1), None).unwrap();
    let mut state = CellState::zeros(4, 1);
    for (t, tok) in inputs.iter().enumerate() {
        let x = Matrix::column(m.embedding().row(tok[0]));
        let (next, _) = m.cells()[0].forward(&x, &state, None).unwrap();
        let logits = m.head().forward(&next.h).unwrap();
        assert_eq!(logits, out.logits[t]);
        state = next;
    }
    assert_eq!(state, out.final_state[0]);
}

#[test]
fn zero_model_predicts_uniformly() {
    let m = LmModel::zeros(&ModelSpec {
        vocab: 2,
        ..spec(1, 1)
    })
    .unwrap();
    let out = m.unroll_forward(&[vec![0], vec![1]], &m.initial_state(1), None).unwrap();
    for l in &out.logits {
        assert!(l.as_slice().iter().all(|&v| v == 0.0));
        let nll = softmax_nll(l, &[1], None).unwrap();
        assert!((nll - 2f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn single_step_gradient_is_cross_entropy_gradient() {
    let mut m = random_model(&spec(1, 1), 21);
    let out = m.unroll_forward(&[vec![2]], &m.initial_state(1), None).unwrap();
    let logits = out.logits[0].clone();
    let x = Matrix::column(m.embedding().row(2));
    let (step, _) = m.cells()[0].forward(&x, &CellState::zeros(4, 1), None).unwrap();
    let h = step.h.into_vec();
    m.bptt(out.cache, &out.logits, &[vec![5]], 1.0).unwrap();
    let mut expected = Matrix::zeros(0, 0);
    softmax_nll(&logits, &[5], Some(&mut expected)).unwrap();
    let head = m.head();
    for r in 0..6 {
        assert!((head.grad_b()[r] - expected[(r, 0)]).abs() < 1e-15);
        for k in 0..4 {
            // Dormant head entries carry the same dense gradient.
            let want = expected[(r, 0)] * h[k];
            assert!((head.grad_w()[(r, k)] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn perplexity_examples() {
    assert!((perplexity(10f64.ln()) - 10.0).abs() < 1e-12);
    assert_eq!(perplexity(0.0), 1.0);
    assert!((perplexity(50f64.ln()) - 50.0).abs() < 1e-12);
}

#[test]
fn evaluation_without_dropout_is_bitwise_repeatable() {
    let mut s = spec(1, 1);
    s.dropout_h = 0.5;
    let m = random_model(&s, 8);
    let inputs = vec![vec![0, 1], vec![2, 3], vec![4, 5]];
    let a = m.unroll_forward(&inputs, &m.initial_state(2), None).unwrap();
    let b = m.unroll_forward(&inputs, &m.initial_state(2), None).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn out_of_range_token_is_an_input_error() {
    let m = random_model(&spec(1, 1), 1);
    let err = m.unroll_forward(&[vec![6]], &m.initial_state(1), None).unwrap_err();
    assert!(matches!(err, lhsynth_core::Error::Input(_)));
}
