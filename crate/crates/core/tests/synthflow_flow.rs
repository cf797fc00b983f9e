use std::path::{Path, PathBuf};

use lhsynth_core::growprune::ActiveSets;
use lhsynth_core::hlstm::LmModel;
use lhsynth_core::numkit::SeededRng;
use lhsynth_core::synthflow::{
    cell_dims, decode_checkpoint, encode_checkpoint, load_flow_checkpoint, make_seed, run_flow, Flow, FlowCheckpoint,
    FlowConfig, FlowReport, Phase, CHECKPOINT_FILE,
};
use lhsynth_core::Error;

fn tiny_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn tiny() -> FlowConfig {
    FlowConfig::load(&tiny_path()).unwrap()
}

fn steps(r: &FlowReport) -> Vec<&str> {
    r.rows.iter().map(|row| row.step.as_str()).collect()
}

/// Every dormant weight is exactly zero.
fn masks_hold(m: &LmModel) -> bool {
    m.layer_ids().into_iter().all(|id| {
        let l = m.layer(id).unwrap();
        (0..l.out_dim()).all(|r| (0..l.in_dim()).all(|c| l.mask().get(r, c) || l.weight()[(r, c)] == 0.0))
    })
}

/// Active row/column sets agree with a brute-force scan of the mask.
fn active_sets_hold(m: &LmModel) -> bool {
    m.layer_ids().into_iter().all(|id| {
        let l = m.layer(id).unwrap();
        let s = ActiveSets::of(l);
        let rows: Vec<usize> = (0..l.out_dim()).filter(|&r| (0..l.in_dim()).any(|c| l.mask().get(r, c))).collect();
        let cols: Vec<usize> = (0..l.in_dim()).filter(|&c| (0..l.out_dim()).any(|r| l.mask().get(r, c))).collect();
        s.rows == rows && s.cols == cols
    })
}

#[test]
fn seed_has_exact_active_count_per_cell_layer() {
    let mut cfg = tiny();
    for s in [0.0, 0.3, 0.5, 0.9] {
        cfg.seed_sparsity = s;
        let m = make_seed(&cfg, 20, &mut SeededRng::new(11)).unwrap();
        for id in m.cell_layer_ids() {
            let l = m.layer(id).unwrap();
            let n = l.out_dim() * l.in_dim();
            assert_eq!(l.active_weights(), ((1.0 - s) * n as f64).ceil() as usize, "{} at s={s}", id.label());
        }
        assert_eq!(m.head().active_weights(), m.head().out_dim() * m.head().in_dim());
        assert!(masks_hold(&m));
    }
    let a = make_seed(&cfg, 20, &mut SeededRng::new(11)).unwrap();
    let b = make_seed(&cfg, 20, &mut SeededRng::new(11)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn param_count_matches_mask_scan() {
    let cfg = tiny();
    let m = make_seed(&cfg, 20, &mut SeededRng::new(5)).unwrap();
    let pc = m.param_count();
    let mut cell_active = 0;
    let mut cell_total = 0;
    for id in m.cell_layer_ids() {
        let l = m.layer(id).unwrap();
        let mut live_rows = 0;
        for r in 0..l.out_dim() {
            let k = (0..l.in_dim()).filter(|&c| l.mask().get(r, c)).count();
            cell_active += k;
            live_rows += usize::from(k > 0);
        }
        cell_active += live_rows;
        cell_total += l.out_dim() * (l.in_dim() + 1);
    }
    assert_eq!(pc.cell_active, cell_active);
    assert_eq!(pc.cell_total, cell_total);
    assert_eq!(pc.head_total, 20 * (cfg.model.d_s + 1));
    assert_eq!(pc.embedding_total, 20 * cfg.model.d_x);
}

#[test]
fn full_flow_respects_phase_invariants() {
    let dir = tempfile::tempdir().unwrap();
    let mut flow = Flow::new(tiny(), None, Some(dir.path())).unwrap();
    let map = flow.map().unwrap().clone();
    let mut seen = Vec::new();
    while flow.phase() != Phase::Done {
        let before = flow.phase();
        let after = flow.advance().unwrap();
        assert!(masks_hold(flow.model()), "dormant weight nonzero after {before:?}");
        assert!(active_sets_hold(flow.model()), "active sets drifted after {before:?}");
        if after != before {
            seen.push(before);
        }
    }
    assert_eq!(seen, [Phase::Baseline, Phase::Wg, Phase::Rcp, Phase::Rcg, Phase::Wp]);

    let r = flow.report().clone();
    assert!(r.complete);
    assert_eq!(steps(&r), ["baseline", "wg", "rcp", "rcg", "wp"]);
    let threshold = r.threshold_ppl.unwrap();
    let seed = r.seed.as_ref().unwrap();
    let row = |s: &str| r.row(s).unwrap();
    assert!(row("wg").cell_active_params >= seed.cell_active_params);
    assert!(row("rcp").cell_active_params <= row("wg").cell_active_params);
    assert!(row("rcg").cell_active_params >= row("rcp").cell_active_params);
    assert!(row("wp").active_params <= row("rcg").active_params);
    assert!(row("rcp").valid_ppl <= threshold);
    assert!(row("wp").valid_ppl <= threshold);

    let rcg = r.rcg.as_ref().unwrap();
    for cell in &rcg.cells {
        let expect = |d: usize| {
            let n = map.nearest_lhp(d).unwrap();
            if n.found {
                n.dim
            } else {
                d
            }
        };
        assert_eq!(cell.grown.d_s, expect(cell.pruned.d_s));
        assert_eq!(cell.grown.d_h, expect(cell.pruned.d_h));
        assert_eq!(cell.target_d_s, cell.grown.d_s);
    }
    assert!(rcg.latency_after_ns <= rcg.latency_before_ns);

    let on_disk = FlowReport::load(dir.path()).unwrap();
    assert_eq!(on_disk.to_csv(), r.to_csv());
    assert!(dir.path().join("masks/manifest.json").exists());
    assert!(dir.path().join("report.csv").exists());
}

#[test]
fn cpu_mode_skips_row_column_steps() {
    let mut cfg = tiny();
    cfg.cpu_mode = true;
    cfg.latency.sweep = None;
    let r = run_flow(cfg, None, None).unwrap();
    assert_eq!(steps(&r), ["baseline", "wg", "wp"]);
    assert!(r.rcg.is_none());
}

#[test]
fn missing_profile_outside_cpu_mode_is_a_config_error() {
    let mut cfg = tiny();
    cfg.latency.sweep = None;
    assert!(matches!(Flow::new(cfg, None, None), Err(Error::Config(_))));
}

#[test]
fn same_seed_gives_bitwise_identical_reports() {
    let a = run_flow(tiny(), None, None).unwrap();
    let b = run_flow(tiny(), None, None).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn resume_mid_prune_matches_uninterrupted_run() {
    let whole = tempfile::tempdir().unwrap();
    let mut full = Flow::new(tiny(), None, Some(whole.path())).unwrap();
    let expected = full.run().unwrap();
    let expected_model = full.model().clone();

    let split = tempfile::tempdir().unwrap();
    let mut first = Flow::new(tiny(), None, Some(split.path())).unwrap();
    while !(first.phase() == Phase::Rcp && first.state().step >= 1) {
        assert_ne!(first.advance().unwrap(), Phase::Done, "never stopped inside rcp");
    }
    drop(first);
    let mut resumed = Flow::resume(&split.path().join(CHECKPOINT_FILE), None).unwrap();
    assert_eq!(resumed.phase(), Phase::Rcp);
    let got = resumed.run().unwrap();
    assert_eq!(got.to_csv(), expected.to_csv());
    assert_eq!(resumed.model(), &expected_model);
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut flow = Flow::new(tiny(), None, Some(dir.path())).unwrap();
    flow.advance().unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    assert!(load_flow_checkpoint(&path).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    let at = bytes.len() - 10;
    bytes[at] ^= 0x01;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_flow_checkpoint(&path), Err(Error::Integrity(_))));
    assert!(matches!(Flow::resume(&path, None), Err(Error::Integrity(_))));

    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(load_flow_checkpoint(&path), Err(Error::Integrity(_))));
}

#[test]
fn checkpoint_encoding_round_trips() {
    let flow = Flow::new(tiny(), None, None).unwrap();
    let ckpt = flow.checkpoint();
    let text = encode_checkpoint(&ckpt).unwrap();
    let back: FlowCheckpoint = decode_checkpoint(&text).unwrap();
    assert_eq!(back.model, ckpt.model);
    assert_eq!(back.config, ckpt.config);
}

#[test]
fn threshold_below_reach_prunes_nothing() {
    let mut cfg = tiny();
    cfg.growprune.accuracy_threshold = Some(1.0);
    let r = run_flow(cfg, None, None).unwrap();
    assert_eq!(r.row("rcp").unwrap().dims, r.row("wg").unwrap().dims);
    assert_eq!(r.row("rcp").unwrap().active_params, r.row("wg").unwrap().active_params);
    assert_eq!(r.row("wp").unwrap().active_params, r.row("rcg").unwrap().active_params);
}

#[test]
fn zero_growth_and_zero_prune_ratios_leave_masks_alone() {
    let mut cfg = tiny();
    cfg.growprune.g_w = 0.0;
    cfg.growprune.p_w = 0.0;
    let r = run_flow(cfg, None, None).unwrap();
    let seed = r.seed.as_ref().unwrap();
    assert_eq!(r.row("wg").unwrap().cell_active_params, seed.cell_active_params);
    assert_eq!(r.row("wp").unwrap().active_params, r.row("rcg").unwrap().active_params);
}

#[test]
fn growth_epochs_only_raise_density() {
    let mut flow = Flow::new(tiny(), None, None).unwrap();
    flow.advance().unwrap();
    let mut last = flow.model().param_count().cell_active;
    while flow.phase() == Phase::Wg {
        flow.advance().unwrap();
        let now = flow.model().param_count().cell_active;
        assert!(now >= last);
        last = now;
    }
    let dims = cell_dims(flow.model()).unwrap();
    assert_eq!(dims.len(), 1);
}
