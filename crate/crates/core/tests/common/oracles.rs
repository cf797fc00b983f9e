//! Every selection rule checked against a full-sort brute force on random
//! matrices up to 10×10.

use lhsynth_core::growprune::{
    cell_requests, neuron_sweep, rc_grow, rc_prune, weight_grow, weight_prune, CellStructure,
    DeadLine, Request, Side,
};
use lhsynth_core::hlstm::{GateKind, LayerId, LmModel, ModelSpec};
use lhsynth_core::numkit::{Activation, Mask, MaskedLinear, Matrix, SeededRng};

pub const TRIALS: u64 = 1000;

/// Random values; every other trial draws from a tiny integer set so ties
/// are common.
fn value(rng: &mut SeededRng, coarse: bool) -> f64 {
    if coarse {
        (rng.below(4) as f64 - 1.5) * 0.5
    } else {
        rng.uniform(-1.0, 1.0)
    }
}

fn random_layer(rng: &mut SeededRng, coarse: bool, density: f64) -> MaskedLinear {
    let r = 1 + rng.below(10);
    let c = 1 + rng.below(10);
    let w: Vec<f64> = (0..r * c).map(|_| value(rng, coarse)).collect();
    let bits: Vec<bool> = (0..r * c).map(|_| rng.bernoulli(density)).collect();
    let bias: Vec<f64> = (0..r).map(|_| value(rng, coarse)).collect();
    let mut l = MaskedLinear::from_parts(
        Matrix::from_vec(r, c, w).unwrap(),
        Mask::from_fn(r, c, |i, j| bits[i * c + j]),
        bias,
    )
    .unwrap();
    l.apply_mask();
    l
}

fn random_grad(rng: &mut SeededRng, rows: usize, cols: usize, coarse: bool) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| value(rng, coarse)).collect()).unwrap()
}

/// Indices of `keys` in ascending `(key, index)` order.
fn sorted_by(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap().then(a.cmp(&b)));
    idx
}

fn ceil_k(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).ceil() as usize).min(n)
}

fn ratio(rng: &mut SeededRng) -> f64 {
    match rng.below(5) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.uniform(0.0, 1.0),
    }
}

pub fn weight_grow_matches_sort_oracle() {
    let mut rng = SeededRng::new(1);
    for trial in 0..TRIALS {
        let coarse = trial % 2 == 0;
        let mut layer = random_layer(&mut rng, coarse, 0.5);
        let (r, c) = layer.weight().shape();
        let g = random_grad(&mut rng, r, c, coarse);
        let g_w = ratio(&mut rng);
        let lr = 0.3;
        let before = layer.clone();

        let neg_mag: Vec<f64> = g.as_slice().iter().map(|v| -v.abs()).collect();
        let top: Vec<usize> = sorted_by(&neg_mag).into_iter().take(ceil_k(g_w, r * c)).collect();
        let mut expect_mask = before.mask().as_slice().to_vec();
        let mut expect_w = before.weight().as_slice().to_vec();
        let mut expect_count = 0;
        for &i in &top {
            if !expect_mask[i] {
                expect_mask[i] = true;
                expect_w[i] = -lr * g.as_slice()[i];
                expect_count += 1;
            }
        }

        let n = weight_grow(&mut layer, &g, g_w, lr).unwrap();
        assert_eq!(n, expect_count, "trial {trial}");
        assert_eq!(layer.mask().as_slice(), &expect_mask[..], "trial {trial}");
        assert_eq!(layer.weight().as_slice(), &expect_w[..], "trial {trial}");
        assert!(layer.active_params() >= before.active_params());
    }
}

pub fn weight_prune_matches_sort_oracle() {
    let mut rng = SeededRng::new(2);
    for trial in 0..TRIALS {
        let coarse = trial % 2 == 0;
        let mut layer = random_layer(&mut rng, coarse, 0.8);
        let p_w = ratio(&mut rng);
        let before = layer.clone();

        let active: Vec<usize> = (0..before.mask().as_slice().len())
            .filter(|&i| before.mask().as_slice()[i])
            .collect();
        let mags: Vec<f64> = active.iter().map(|&i| before.weight().as_slice()[i].abs()).collect();
        let k = ceil_k(p_w, active.len());
        let mut expect_mask = before.mask().as_slice().to_vec();
        for j in sorted_by(&mags).into_iter().take(k) {
            expect_mask[active[j]] = false;
        }

        let n = weight_prune(&mut layer, p_w).unwrap();
        assert_eq!(n, k, "trial {trial}");
        assert_eq!(layer.mask().as_slice(), &expect_mask[..], "trial {trial}");
        for (i, &on) in expect_mask.iter().enumerate() {
            let w = layer.weight().as_slice()[i];
            assert_eq!(w, if on { before.weight().as_slice()[i] } else { 0.0 });
        }
        assert!(layer.active_params() <= before.active_params());
        // Nothing left at or below the removed magnitudes' maximum, except
        // surviving ties.
        if k > 0 && k < active.len() {
            let cut = sorted_by(&mags).into_iter().take(k).map(|j| mags[j]).fold(0.0, f64::max);
            let remaining_below = layer
                .weight()
                .as_slice()
                .iter()
                .zip(layer.mask().as_slice())
                .filter(|(w, &on)| on && w.abs() < cut)
                .count();
            assert_eq!(remaining_below, 0);
        }
    }
}

fn row_sum(l: &MaskedLinear, r: usize) -> f64 {
    (0..l.in_dim()).map(|c| l.weight()[(r, c)].abs()).sum()
}

fn col_sum(l: &MaskedLinear, c: usize) -> f64 {
    (0..l.out_dim()).map(|r| l.weight()[(r, c)].abs()).sum()
}

fn row_live(l: &MaskedLinear, r: usize) -> bool {
    (0..l.in_dim()).any(|c| l.mask().get(r, c))
}

fn col_live(l: &MaskedLinear, c: usize) -> bool {
    (0..l.out_dim()).any(|r| l.mask().get(r, c))
}

pub fn rc_prune_matches_sort_oracle() {
    let mut rng = SeededRng::new(3);
    let mut checked = 0;
    for trial in 0..TRIALS {
        let coarse = trial % 2 == 0;
        let mut layer = random_layer(&mut rng, coarse, 0.85);
        let (p_r, p_c) = (rng.uniform(0.0, 0.6), rng.uniform(0.0, 0.6));
        let before = layer.clone();

        let rows: Vec<usize> = (0..before.out_dim()).filter(|&r| row_live(&before, r)).collect();
        let cols: Vec<usize> = (0..before.in_dim()).filter(|&c| col_live(&before, c)).collect();
        let kr = ceil_k(p_r, rows.len());
        let kc = ceil_k(p_c, cols.len());
        let result = rc_prune(&mut layer, p_r, p_c);
        if (kr > 0 && kr >= rows.len()) || (kc > 0 && kc >= cols.len()) {
            assert!(result.is_err(), "trial {trial}: should refuse");
            assert_eq!(layer, before);
            continue;
        }
        let (got_r, got_c) = result.unwrap();
        let rs: Vec<f64> = rows.iter().map(|&r| row_sum(&before, r)).collect();
        let cs: Vec<f64> = cols.iter().map(|&c| col_sum(&before, c)).collect();
        let mut want_r: Vec<usize> = sorted_by(&rs).into_iter().take(kr).map(|j| rows[j]).collect();
        let mut want_c: Vec<usize> = sorted_by(&cs).into_iter().take(kc).map(|j| cols[j]).collect();
        want_r.sort_unstable();
        want_c.sort_unstable();
        assert_eq!(got_r, want_r, "trial {trial}");
        assert_eq!(got_c, want_c, "trial {trial}");
        for r in 0..before.out_dim() {
            for c in 0..before.in_dim() {
                let want = before.mask().get(r, c) && !want_r.contains(&r) && !want_c.contains(&c);
                assert_eq!(layer.mask().get(r, c), want);
                if !want {
                    assert_eq!(layer.weight()[(r, c)], 0.0);
                }
            }
        }
        assert!(layer.active_params() <= before.active_params());
        checked += 1;
    }
    assert!(checked > TRIALS / 2);
}

pub fn rc_grow_matches_sort_oracle() {
    let mut rng = SeededRng::new(4);
    for trial in 0..TRIALS {
        let coarse = trial % 2 == 0;
        // Structured sparsity: kill a random subset of rows and columns.
        let mut layer = random_layer(&mut rng, coarse, 1.0);
        let (m, n) = layer.weight().shape();
        for r in 0..m {
            if rng.bernoulli(0.4) {
                layer.deactivate_row(r);
            }
        }
        for c in 0..n {
            if rng.bernoulli(0.4) {
                layer.deactivate_col(c);
            }
        }
        let g = random_grad(&mut rng, m, n, coarse);
        let (g_r, g_c) = (ratio(&mut rng), ratio(&mut rng));
        let lr = 0.5;
        let before = layer.clone();

        let set_r: Vec<usize> = (0..m).filter(|&r| row_live(&before, r)).collect();
        let set_c: Vec<usize> = (0..n).filter(|&c| col_live(&before, c)).collect();
        let dr: Vec<usize> = (0..m).filter(|r| !set_r.contains(r)).collect();
        let dc: Vec<usize> = (0..n).filter(|c| !set_c.contains(c)).collect();
        let r_scores: Vec<f64> = dr.iter().map(|&r| -set_c.iter().map(|&c| g[(r, c)].abs()).sum::<f64>()).collect();
        let c_scores: Vec<f64> = dc.iter().map(|&c| -set_r.iter().map(|&r| g[(r, c)].abs()).sum::<f64>()).collect();
        let kr = ceil_k(g_r, m);
        let kc = ceil_k(g_c, n);
        let mut want_r: Vec<usize> = sorted_by(&r_scores).into_iter().take(kr).map(|j| dr[j]).collect();
        let mut want_c: Vec<usize> = sorted_by(&c_scores).into_iter().take(kc).map(|j| dc[j]).collect();
        want_r.sort_unstable();
        want_c.sort_unstable();

        let out = rc_grow(&mut layer, &g, g_r, g_c, lr).unwrap();
        assert_eq!(out.rows, want_r, "trial {trial}");
        assert_eq!(out.cols, want_c, "trial {trial}");
        assert_eq!(out.row_shortfall, kr - want_r.len());
        assert_eq!(out.col_shortfall, kc - want_c.len());
        for r in 0..m {
            for c in 0..n {
                let inside = set_r.contains(&r) && set_c.contains(&c);
                let woken = (want_r.contains(&r) && set_c.contains(&c)) || (want_c.contains(&c) && set_r.contains(&r));
                if inside {
                    // The active block is never touched.
                    assert_eq!(layer.mask().get(r, c), before.mask().get(r, c));
                    assert_eq!(layer.weight()[(r, c)], before.weight()[(r, c)]);
                } else if woken {
                    assert!(layer.mask().get(r, c));
                    assert_eq!(layer.weight()[(r, c)], -lr * g[(r, c)]);
                } else {
                    assert!(!layer.mask().get(r, c), "trial {trial} ({r},{c})");
                }
            }
        }
        assert!(layer.active_params() >= before.active_params());
    }
}

pub fn neuron_sweep_matches_exhaustive_scan() {
    let mut rng = SeededRng::new(5);
    for _ in 0..TRIALS {
        let a = random_layer(&mut rng, false, 0.3);
        let b = random_layer(&mut rng, false, 0.6);
        let mut want = Vec::new();
        for (li, l) in [&a, &b].iter().enumerate() {
            for r in 0..l.out_dim() {
                if !row_live(l, r) {
                    want.push(DeadLine { layer: li, side: Side::Row, index: r });
                }
            }
            for c in 0..l.in_dim() {
                if !col_live(l, c) {
                    want.push(DeadLine { layer: li, side: Side::Col, index: c });
                }
            }
        }
        assert_eq!(neuron_sweep(&[&a, &b]), want);
    }
}

fn random_cell_model(rng: &mut SeededRng) -> LmModel {
    let spec = ModelSpec {
        vocab: 2 + rng.below(4),
        d_x: 1 + rng.below(4),
        d_s: 2 + rng.below(4),
        d_h: 2 + rng.below(4),
        hidden_depth: 1,
        stack: 1,
        hidden_activation: Activation::Relu,
        dropout_h: 0.0,
    };
    let mut m = LmModel::zeros(&spec).unwrap();
    let coarse = rng.bernoulli(0.5);
    for id in m.layer_ids() {
        let l = m.layer_mut(id).unwrap();
        for v in l.weight_mut().as_mut_slice() {
            *v = value(rng, coarse);
        }
    }
    m
}

/// Independent importance: walk the gate equations directly.
fn oracle_importance(m: &LmModel, axis: &str, u: usize) -> f64 {
    let cell = &m.cells()[0];
    let d_x = cell.dims().d_x;
    let mut s = 0.0;
    for gate in GateKind::ALL {
        let h = cell.gate(gate).hidden.as_ref().unwrap();
        let o = &cell.gate(gate).output;
        match axis {
            "d_h" => s += row_sum(h, u) + col_sum(o, u),
            "d_s" => s += row_sum(o, u) + col_sum(h, d_x + u),
            _ => s += col_sum(h, u),
        }
    }
    if axis == "d_s" {
        s += col_sum(m.head(), u);
    }
    s
}

pub fn coordinated_prune_matches_sum_then_sort_oracle() {
    let mut rng = SeededRng::new(6);
    for trial in 0..TRIALS {
        let mut m = random_cell_model(&mut rng);
        let s = CellStructure::of(&m, 0).unwrap();
        let dims = m.cells()[0].dims();
        let k_h = rng.below(dims.d_h);
        let k_s = rng.below(dims.d_s);
        let k_x = rng.below(dims.d_x);
        let before = m.clone();
        let req = cell_requests(&s, Request::Count(k_h), Request::Count(k_s), Request::Count(k_x));
        let got = s.prune(&mut m, &req).unwrap();
        for (axis, k, size) in [("d_h", k_h, dims.d_h), ("d_s", k_s, dims.d_s), ("d_x", k_x, dims.d_x)] {
            let scores: Vec<f64> = (0..size).map(|u| oracle_importance(&before, axis, u)).collect();
            let mut want: Vec<usize> = sorted_by(&scores).into_iter().take(k).collect();
            want.sort_unstable();
            let idx = s.axis_index(axis).unwrap();
            assert_eq!(got[idx], want, "trial {trial} axis {axis}");
        }
        let d = s.active_dims(&m);
        assert_eq!((d.d_h, d.d_s, d.d_x), (dims.d_h - k_h, dims.d_s - k_s, dims.d_x - k_x));
        for gate in GateKind::ALL {
            let h = m.cells()[0].gate(gate).hidden.as_ref().unwrap();
            assert_eq!(h.mask().active_rows().len(), dims.d_h - k_h);
            assert_eq!(m.cells()[0].gate(gate).output.mask().active_rows().len(), dims.d_s - k_s);
        }
        for id in m.layer_ids() {
            let l = m.layer(id).unwrap();
            for (w, &on) in l.weight().as_slice().iter().zip(l.mask().as_slice()) {
                assert!(on || *w == 0.0);
            }
        }
    }
}

pub fn coordinated_prune_on_identical_gates_equals_single_layer() {
    use lhsynth_core::growprune::{Axis, Occurrence, StructureGroup};
    let mut rng = SeededRng::new(7);
    for trial in 0..TRIALS {
        let layer = random_layer(&mut rng, trial % 2 == 0, 1.0);
        let (m, n) = layer.weight().shape();
        if m < 2 || n < 2 {
            continue;
        }
        let (kr, kc) = (rng.below(m), rng.below(n));
        let group = StructureGroup {
            axes: vec![
                Axis { name: "rows".into(), size: m, occurrences: (0..4).map(|l| Occurrence { layer: l, side: Side::Row, offset: 0 }).collect() },
                Axis { name: "cols".into(), size: n, occurrences: (0..4).map(|l| Occurrence { layer: l, side: Side::Col, offset: 0 }).collect() },
            ],
        };
        let gates = [layer.clone(), layer.clone(), layer.clone(), layer.clone()];
        let refs: Vec<&MaskedLinear> = gates.iter().collect();
        let plan = group.plan_prune(&refs, &[Request::Count(kr), Request::Count(kc)]).unwrap();
        let mut single = layer.clone();
        let (r, c) = rc_prune(&mut single, kr as f64 / m as f64, kc as f64 / n as f64).unwrap();
        assert_eq!(plan, vec![r, c], "trial {trial}");
    }
}

pub fn coordinated_grow_matches_oracle_and_spares_active_block() {
    let mut rng = SeededRng::new(8);
    for trial in 0..TRIALS {
        let mut m = random_cell_model(&mut rng);
        let s = CellStructure::of(&m, 0).unwrap();
        let dims = m.cells()[0].dims();
        let prune = cell_requests(
            &s,
            Request::Count(rng.below(dims.d_h)),
            Request::Count(rng.below(dims.d_s)),
            Request::Count(0),
        );
        s.prune(&mut m, &prune).unwrap();
        let grads: Vec<(LayerId, Matrix)> = m
            .layer_ids()
            .into_iter()
            .map(|id| {
                let l = m.layer(id).unwrap();
                (id, random_grad(&mut rng, l.out_dim(), l.in_dim(), trial % 2 == 0))
            })
            .collect();
        let g_of = |id: LayerId| &grads.iter().find(|(i, _)| *i == id).unwrap().1;
        let before = m.clone();
        let pre = s.active_dims(&m);
        let (k_h, k_s) = (rng.below(dims.d_h + 1), rng.below(dims.d_s + 1));
        let req = cell_requests(&s, Request::Count(k_h), Request::Count(k_s), Request::Count(0));
        let (got, short) = s.grow(&mut m, &grads, &req, 0.1).unwrap();

        // Oracle scores on the pre-growth masks.
        let cell = &before.cells()[0];
        let d_x = dims.d_x;
        let active_rows = |l: &MaskedLinear| (0..l.out_dim()).filter(|&r| row_live(l, r)).collect::<Vec<_>>();
        let active_cols = |l: &MaskedLinear| (0..l.in_dim()).filter(|&c| col_live(l, c)).collect::<Vec<_>>();
        let score = |axis: &str, u: usize| -> f64 {
            let mut t = 0.0;
            for gate in GateKind::ALL {
                let h = cell.gate(gate).hidden.as_ref().unwrap();
                let o = &cell.gate(gate).output;
                let gh = g_of(LayerId::Cell { cell: 0, gate, part: lhsynth_core::hlstm::LayerPart::Hidden });
                let go = g_of(LayerId::Cell { cell: 0, gate, part: lhsynth_core::hlstm::LayerPart::Output });
                if axis == "d_h" {
                    t += active_cols(h).iter().map(|&c| gh[(u, c)].abs()).sum::<f64>();
                    t += active_rows(o).iter().map(|&r| go[(r, u)].abs()).sum::<f64>();
                } else {
                    t += active_cols(o).iter().map(|&c| go[(u, c)].abs()).sum::<f64>();
                    t += active_rows(h).iter().map(|&r| gh[(r, d_x + u)].abs()).sum::<f64>();
                }
            }
            if axis == "d_s" {
                let gh = g_of(LayerId::Head);
                t += active_rows(before.head()).iter().map(|&r| gh[(r, u)].abs()).sum::<f64>();
            }
            t
        };
        for (axis, k, size, active_now) in [("d_h", k_h, dims.d_h, pre.d_h), ("d_s", k_s, dims.d_s, pre.d_s)] {
            let structure = CellStructure::of(&before, 0).unwrap();
            let refs = structure.layer_refs(&before);
            let ax = &structure.group.axes[structure.axis_index(axis).unwrap()];
            let dormant: Vec<usize> = (0..size).filter(|&u| !ax.unit_active(&refs, u)).collect();
            assert_eq!(dormant.len(), size - active_now);
            let keys: Vec<f64> = dormant.iter().map(|&u| -score(axis, u)).collect();
            let mut want: Vec<usize> = sorted_by(&keys).into_iter().take(k).map(|j| dormant[j]).collect();
            want.sort_unstable();
            let idx = s.axis_index(axis).unwrap();
            assert_eq!(got[idx], want, "trial {trial} axis {axis}");
            assert_eq!(short[idx], k - want.len());
        }
        // No entry of a previously fully active block changes.
        for id in before.layer_ids() {
            let (a, b) = (before.layer(id).unwrap(), m.layer(id).unwrap());
            let (rs, cs) = (active_rows(a), active_cols(a));
            for &r in &rs {
                for &c in &cs {
                    assert_eq!(a.mask().get(r, c), b.mask().get(r, c));
                    assert_eq!(a.weight()[(r, c)], b.weight()[(r, c)]);
                }
            }
            assert!(b.active_weights() >= a.active_weights());
        }
    }
}
