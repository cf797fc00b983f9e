use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{FlowConfig, LatencyMode, ProfileSource, SweepBackend};
use super::latency::{exact_stats, native_model_latency, virtual_model_latency, LatencyTable};
use super::report::{
    cell_dims, format_dims, write_mask_snapshot, FlowReport, LhpSummary, RcgCell, RcgSummary, ReportRow,
    SeedSummary,
};
use crate::error::{Error, Result};
use crate::growprune::{
    cell_requests, propagate_dead_neurons, weight_grow, weight_prune, ActiveDims, CellStructure, HalvingSchedule,
    PruneMode, Request, Verdict,
};
use crate::hlstm::{
    batchify, gradient_pass, perplexity, train_epoch, Corpus, GradAccumulator, LayerId, LmModel, LrState, Vocab,
    Window,
};
use crate::latlab::{
    detect_lhps, parse_grid, sweep, HysteresisMap, LatencyProfile, NativeBackend, SampleStats, SyntheticBackend,
};
use crate::numkit::{ceil_count, Mask, MaskedLinear, RngState, SeededRng};

/// Flow steps in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Baseline,
    Wg,
    Rcp,
    Rcg,
    Wp,
    Done,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Baseline => "baseline",
            Phase::Wg => "wg",
            Phase::Rcp => "rcp",
            Phase::Rcg => "rcg",
            Phase::Wp => "wp",
            Phase::Done => "done",
        }
    }
}

/// One evaluated epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub phase: Phase,
    pub iteration: usize,
    pub train_ppl: f64,
    pub valid_ppl: f64,
    pub active_params: usize,
    pub lr: f64,
}

/// Everything besides the model and RNG needed to continue a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub phase: Phase,
    /// Epochs (growth phase) or iterations (prune phases) done in `phase`.
    pub step: usize,
    pub epochs: usize,
    pub lr: LrState,
    pub threshold_ppl: Option<f64>,
    /// Validation perplexity of the current model, once known.
    pub valid_ppl: Option<f64>,
    pub schedule: Option<HalvingSchedule>,
    pub history: Vec<HistoryEntry>,
    pub report: FlowReport,
}

/// Serialized flow: configuration, data vocabulary, state, model, RNG and
/// the latency profile the flow was steered by.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub config: FlowConfig,
    pub vocab: Vocab,
    pub profile: Option<LatencyProfile>,
    pub state: FlowState,
    pub model: LmModel,
    pub rng: RngState,
}

pub const CHECKPOINT_FILE: &str = "flow.ckpt";

/// Fan-in-scaled init with exactly `⌈(1−s)·size⌉` randomly chosen active
/// entries in every cell layer; the output head stays dense.
pub fn make_seed(cfg: &FlowConfig, vocab: usize, rng: &mut SeededRng) -> Result<LmModel> {
    let mut model = LmModel::zeros(&cfg.model_spec(vocab))?;
    model.init_uniform(rng);
    for id in model.cell_layer_ids() {
        let layer = model.layer_mut(id).expect("listed layer exists");
        let (rows, cols) = (layer.out_dim(), layer.in_dim());
        let k = ceil_count(1.0 - cfg.seed_sparsity, rows * cols);
        let mut on = vec![false; rows * cols];
        for i in rng.sample_indices(rows * cols, k) {
            on[i] = true;
        }
        layer.set_mask(Mask::from_fn(rows, cols, |r, c| on[r * cols + c]))?;
        layer.apply_mask();
    }
    Ok(model)
}

/// Measures or loads the profile a configuration asks for.
pub fn acquire_profile(cfg: &FlowConfig, source: &ProfileSource) -> Result<LatencyProfile> {
    match source {
        ProfileSource::File(p) => LatencyProfile::load(p),
        ProfileSource::Sweep => {
            let s = cfg
                .latency
                .sweep
                .as_ref()
                .ok_or_else(|| Error::config("sweep requested but no [latency.sweep] table given"))?;
            let grid = parse_grid(&s.grid)?;
            let profile = match s.backend {
                SweepBackend::Synthetic => {
                    let curve = cfg.latency.curve.ok_or_else(|| Error::config("synthetic sweep needs [latency.curve]"))?;
                    let mut b = SyntheticBackend::new(curve)?;
                    sweep(&mut b, &grid, s.batch, s.measure, "virtual".into())?
                }
                SweepBackend::Native => {
                    let mut b = NativeBackend::new(cfg.seed);
                    sweep(&mut b, &grid, s.batch, s.measure, unix_timestamp())?
                }
            };
            Ok(profile)
        }
    }
}

pub fn unix_timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("unix:{secs}")
}

/// The hardware-guided grow-and-prune flow as a resumable state machine.
pub struct Flow {
    cfg: FlowConfig,
    vocab: Vocab,
    train: Vec<Window>,
    valid: Vec<Window>,
    profile: Option<LatencyProfile>,
    map: Option<HysteresisMap>,
    table: Option<LatencyTable>,
    model: LmModel,
    rng: SeededRng,
    state: FlowState,
    out_dir: Option<PathBuf>,
}

fn windows(corpus: &Corpus, cfg: &FlowConfig) -> Result<(Vec<Window>, Vec<Window>)> {
    let train = batchify(&corpus.train, cfg.train.batch, cfg.train.seq_len)?;
    let valid = batchify(&corpus.valid, cfg.data.eval_batch, cfg.train.seq_len)?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Input("corpus too small for the configured batch and sequence length".into()));
    }
    Ok((train, valid))
}

impl Flow {
    /// Starts a new flow. `profile` overrides the configured source; without
    /// either, the flow only runs in CPU mode with a latency curve.
    pub fn new(cfg: FlowConfig, profile: Option<LatencyProfile>, out_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let corpus = Corpus::load(&cfg.data.corpus, cfg.data.split, cfg.data.max_vocab)?;
        let profile = match (profile, cfg.profile_source()) {
            (Some(p), _) => Some(p),
            (None, Some(src)) => Some(acquire_profile(&cfg, &src)?),
            (None, None) => None,
        };
        if profile.is_none() && !cfg.cpu_mode {
            return Err(Error::config(
                "row/column growth needs a latency profile: give a profile file or a sweep",
            ));
        }
        let root = SeededRng::new(cfg.seed);
        let mut seed_rng = root.fork(2);
        let model = make_seed(&cfg, corpus.vocab.len(), &mut seed_rng)?;
        let state = FlowState {
            phase: Phase::Baseline,
            step: 0,
            epochs: 0,
            lr: LrState::new(cfg.train.lr),
            threshold_ppl: None,
            valid_ppl: None,
            schedule: None,
            history: Vec::new(),
            report: FlowReport {
                complete: false,
                cpu_mode: cfg.cpu_mode,
                threshold_ppl: None,
                seed: None,
                rows: Vec::new(),
                rcg: None,
                lhp: None,
                error: None,
            },
        };
        Self::assemble(cfg, corpus, profile, model, root.fork(3), state, out_dir)
    }

    fn assemble(
        cfg: FlowConfig,
        corpus: Corpus,
        profile: Option<LatencyProfile>,
        model: LmModel,
        rng: SeededRng,
        mut state: FlowState,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        let (train, valid) = windows(&corpus, &cfg)?;
        let map = match &profile {
            Some(p) => Some(detect_lhps(p, cfg.latency.rule)?),
            None => None,
        };
        if let (Some(m), Some(p)) = (&map, &profile) {
            state.report.lhp = Some(LhpSummary {
                rule: m.rule,
                hardware_id: p.hardware_id.clone(),
                grid_points: m.grid.len(),
                lhp_count: m.lhps.len(),
                redundancy: m.redundancy,
            });
        }
        let table = match (&profile, cfg.latency.curve) {
            (Some(p), _) => Some(LatencyTable::from_profile(p)),
            (None, Some(c)) => Some(LatencyTable::Curve(c)),
            (None, None) => None,
        };
        if table.is_none() && cfg.latency.mode == LatencyMode::Virtual {
            return Err(Error::config("virtual latency needs a profile or a [latency.curve]"));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            cfg,
            vocab: corpus.vocab,
            train,
            valid,
            profile,
            map,
            table,
            model,
            rng,
            state,
            out_dir: out_dir.map(Path::to_path_buf),
        })
    }

    /// Continues from a checkpoint; outputs go next to it unless `out_dir`
    /// says otherwise.
    pub fn resume(path: &Path, out_dir: Option<&Path>) -> Result<Self> {
        let ckpt: FlowCheckpoint = load_checkpoint(path)?;
        let text = std::fs::read_to_string(&ckpt.config.data.corpus)?;
        let corpus = Corpus::with_vocab(&text, ckpt.vocab, ckpt.config.data.split)?;
        let rng = SeededRng::from_state(&ckpt.rng).ok_or_else(|| Error::Integrity("bad RNG state".into()))?;
        let dir = out_dir.map(Path::to_path_buf).or_else(|| path.parent().map(Path::to_path_buf));
        Self::assemble(ckpt.config, corpus, ckpt.profile, ckpt.model, rng, ckpt.state, dir.as_deref())
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn state(&self) -> &FlowState {
        &self.state
    }

    pub fn model(&self) -> &LmModel {
        &self.model
    }

    pub fn map(&self) -> Option<&HysteresisMap> {
        self.map.as_ref()
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn report(&self) -> &FlowReport {
        &self.state.report
    }

    pub fn checkpoint(&self) -> FlowCheckpoint {
        FlowCheckpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            profile: self.profile.clone(),
            state: self.state.clone(),
            model: self.model.clone(),
            rng: self.rng.state(),
        }
    }

    /// Runs one unit of work (the baseline, one growth epoch, one prune
    /// iteration, or the growth step), then checkpoints.
    pub fn advance(&mut self) -> Result<Phase> {
        match self.state.phase {
            Phase::Baseline => self.run_baseline()?,
            Phase::Wg => self.wg_epoch()?,
            Phase::Rcp => self.rcp_iteration()?,
            Phase::Rcg => self.rcg_step()?,
            Phase::Wp => self.wp_iteration()?,
            Phase::Done => return Ok(Phase::Done),
        }
        self.persist()?;
        Ok(self.state.phase)
    }

    /// Advances to completion. On failure the written report is marked
    /// incomplete and carries the error.
    pub fn run(&mut self) -> Result<FlowReport> {
        while self.state.phase != Phase::Done {
            if let Err(e) = self.advance() {
                self.state.report.complete = false;
                self.state.report.error = Some(e.to_string());
                if let Some(dir) = &self.out_dir {
                    self.state.report.write(dir)?;
                }
                return Err(e);
            }
        }
        Ok(self.state.report.clone())
    }

    fn persist(&mut self) -> Result<()> {
        self.state.report.complete = self.state.phase == Phase::Done;
        self.state.report.error = None;
        if let Some(dir) = &self.out_dir {
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &self.checkpoint())?;
            self.state.report.write(dir)?;
        }
        Ok(())
    }

    fn evaluate(&self, model: &LmModel) -> Result<f64> {
        let ppl = perplexity(model.evaluate(&self.valid)?);
        if !ppl.is_finite() {
            return Err(Error::non_finite("validation perplexity"));
        }
        Ok(ppl)
    }

    pub fn model_latency(&self, model: &LmModel) -> Result<SampleStats> {
        let l = &self.cfg.latency;
        match l.mode {
            LatencyMode::Virtual => {
                let table = self.table.as_ref().expect("checked at construction");
                Ok(exact_stats(
                    virtual_model_latency(model, table, l.seq_len)?,
                    l.measure.measured_runs,
                ))
            }
            LatencyMode::Native => native_model_latency(
                model,
                l.batch,
                l.seq_len,
                l.measure.warmup_runs,
                l.measure.measured_runs,
                self.cfg.seed,
            ),
        }
    }

    fn make_row(&self, step: &str, model: &LmModel, ppl: f64, epochs: usize) -> Result<ReportRow> {
        let pc = model.param_count();
        Ok(ReportRow {
            step: step.to_string(),
            dims: format_dims(model)?,
            total_params: pc.total(),
            active_params: pc.active(),
            cell_active_params: pc.cell_active,
            valid_ppl: ppl,
            latency: self.model_latency(model)?,
            epochs,
        })
    }

    fn train_one(&mut self, bridging: Option<&mut GradAccumulator>) -> Result<f64> {
        let nll = train_epoch(&mut self.model, &self.train, &self.cfg.train, self.state.lr.lr, &mut self.rng, bridging)?;
        self.state.epochs += 1;
        Ok(perplexity(nll))
    }

    fn record(&mut self, train_ppl: f64, valid_ppl: f64) {
        let entry = HistoryEntry {
            phase: self.state.phase,
            iteration: self.state.step,
            train_ppl,
            valid_ppl,
            active_params: self.model.param_count().active(),
            lr: self.state.lr.lr,
        };
        debug!(
            "{} #{}: train ppl {:.3}, valid ppl {:.3}, active {}",
            entry.phase.label(),
            entry.iteration,
            train_ppl,
            valid_ppl,
            entry.active_params
        );
        self.state.history.push(entry);
    }

    /// Closes the current phase with a report row and moves to `next`.
    fn close_phase(&mut self, next: Phase) -> Result<()> {
        let phase = self.state.phase;
        let ppl = match self.state.valid_ppl {
            Some(p) => p,
            None => {
                let p = self.evaluate(&self.model)?;
                self.state.valid_ppl = Some(p);
                p
            }
        };
        let row = self.make_row(phase.label(), &self.model, ppl, self.state.epochs)?;
        info!(
            "{} done: dims {}, active params {}, valid ppl {:.3}, latency {:.0} ns",
            phase.label(),
            row.dims,
            row.active_params,
            ppl,
            row.latency.median_ns
        );
        self.state.report.rows.push(row);
        if let Some(dir) = &self.out_dir {
            write_mask_snapshot(dir, phase.label(), &self.model)?;
        }
        self.state.phase = next;
        self.state.step = 0;
        self.state.schedule = None;
        Ok(())
    }

    fn run_baseline(&mut self) -> Result<()> {
        let mut rng = SeededRng::new(self.cfg.seed).fork(1);
        let mut model = LmModel::zeros(&self.cfg.baseline_spec(self.vocab.len()))?;
        model.init_uniform(&mut rng);
        let mut lr = LrState::new(self.cfg.train.lr);
        let mut best = f64::INFINITY;
        for epoch in 0..self.cfg.baseline.epochs {
            let train = perplexity(train_epoch(&mut model, &self.train, &self.cfg.train, lr.lr, &mut rng, None)?);
            let ppl = self.evaluate(&model)?;
            debug!("baseline epoch {epoch}: train ppl {train:.3}, valid ppl {ppl:.3}");
            lr.observe(ppl, &self.cfg.train);
            best = best.min(ppl);
        }
        if self.cfg.baseline.epochs == 0 {
            best = self.evaluate(&model)?;
        }
        let threshold = self.cfg.growprune.accuracy_threshold.unwrap_or(best);
        self.state.threshold_ppl = Some(threshold);
        self.state.report.threshold_ppl = Some(threshold);
        let row = self.make_row("baseline", &model, best, self.cfg.baseline.epochs)?;
        info!("baseline: {} params, valid ppl {best:.3}, threshold {threshold:.3}", row.total_params);
        self.state.report.rows.push(row);
        let pc = self.model.param_count();
        self.state.report.seed = Some(SeedSummary {
            total_params: pc.total(),
            active_params: pc.active(),
            cell_active_params: pc.cell_active,
        });
        if let Some(dir) = &self.out_dir {
            write_mask_snapshot(dir, "seed", &self.model)?;
        }
        self.state.phase = Phase::Wg;
        self.state.step = 0;
        Ok(())
    }

    fn wg_epoch(&mut self) -> Result<()> {
        let p = self.cfg.phases;
        if self.state.step < p.wg_epochs {
            let grow = self.state.step < p.wg_grow_epochs && self.cfg.growprune.g_w > 0.0;
            let lr = self.state.lr.lr;
            let mut acc = grow.then(|| GradAccumulator::new(&self.model, p.bridging));
            let train = self.train_one(acc.as_mut())?;
            if let Some(acc) = acc {
                let mut woken = 0;
                for (id, g) in acc.average() {
                    let layer = self.model.layer_mut(id).expect("listed layer exists");
                    woken += weight_grow(layer, &g, self.cfg.growprune.g_w, lr)?;
                }
                debug!("wg epoch {}: woke {woken} connections", self.state.step);
            }
            let ppl = self.evaluate(&self.model)?;
            self.state.lr.observe(ppl, &self.cfg.train);
            self.state.valid_ppl = Some(ppl);
            self.record(train, ppl);
            self.state.step += 1;
        }
        if self.state.step >= p.wg_epochs {
            let next = if self.cfg.cpu_mode { Phase::Wp } else { Phase::Rcp };
            self.close_phase(next)?;
        }
        Ok(())
    }

    fn threshold(&self) -> f64 {
        self.state.threshold_ppl.expect("baseline sets the threshold")
    }

    /// Retrains for up to `retrain_patience` epochs, stopping as soon as the
    /// threshold is met. Returns the last validation perplexity.
    fn retrain(&mut self) -> Result<f64> {
        let mut ppl = f64::INFINITY;
        for _ in 0..self.cfg.growprune.retrain_patience {
            let train = self.train_one(None)?;
            ppl = self.evaluate(&self.model)?;
            self.record(train, ppl);
            if ppl <= self.threshold() {
                break;
            }
        }
        Ok(ppl)
    }

    /// Starts a prune phase's schedule, or returns false when the current
    /// model already misses the threshold (nothing may be pruned).
    fn open_schedule(&mut self, ratios: Vec<f64>, single_allowed: bool) -> Result<bool> {
        if self.state.schedule.is_some() {
            return Ok(true);
        }
        let ppl = match self.state.valid_ppl {
            Some(p) => p,
            None => self.evaluate(&self.model)?,
        };
        self.state.valid_ppl = Some(ppl);
        if ppl > self.threshold() {
            info!(
                "{}: valid ppl {ppl:.3} already above threshold {:.3}; nothing pruned",
                self.state.phase.label(),
                self.threshold()
            );
            return Ok(false);
        }
        self.state.schedule = Some(HalvingSchedule::new(ratios, self.cfg.growprune.halving_floor, single_allowed));
        Ok(true)
    }

    /// Shared tail of a prune iteration: judge, keep or restore, count.
    fn settle(&mut self, snapshot: LmModel, ppl: f64) {
        let threshold = self.threshold();
        let schedule = self.state.schedule.as_mut().expect("schedule open");
        match schedule.observe(ppl, threshold) {
            Verdict::Accept => self.state.valid_ppl = Some(ppl),
            Verdict::Revert | Verdict::RevertAndStop => self.model = snapshot,
        }
        self.state.step += 1;
    }

    fn prune_phase_over(&self, cap: usize) -> bool {
        self.state.schedule.as_ref().map_or(true, HalvingSchedule::is_done) || self.state.step >= cap
    }

    fn rcp_iteration(&mut self) -> Result<()> {
        let gp = self.cfg.growprune;
        let cap = self.cfg.phases.rcp_max_iterations;
        if !self.open_schedule(vec![gp.p_r, gp.p_c], true)? || self.prune_phase_over(cap) {
            return self.close_phase(Phase::Rcg);
        }
        let schedule = self.state.schedule.clone().expect("schedule open");
        let (dh, ds) = match schedule.mode {
            PruneMode::Fraction => (Request::Ratio(schedule.ratios[0]), Request::Ratio(schedule.ratios[1])),
            PruneMode::Single => (Request::Count(1), Request::Count(1)),
            PruneMode::Done => unreachable!("checked above"),
        };
        let dx = if gp.prune_input_columns { ds } else { Request::Count(0) };
        let snapshot = self.model.clone();
        for cell in 0..self.model.cells().len() {
            let s = CellStructure::of(&self.model, cell)?;
            let requests = cell_requests(&s, dh, ds, dx);
            match s.prune(&mut self.model, &requests) {
                Ok(_) => {}
                Err(Error::Degenerate(why)) => {
                    info!("rcp: stopping, {why}");
                    self.model = snapshot;
                    self.state.schedule.as_mut().expect("schedule open").finish();
                    self.state.step += 1;
                    return self.close_phase(Phase::Rcg);
                }
                Err(e) => return Err(e),
            }
        }
        propagate_dead_neurons(&mut self.model);
        let ppl = self.retrain()?;
        debug!("rcp iteration {}: {:?} → dims {}, ppl {ppl:.3}", self.state.step, schedule.mode, format_dims(&self.model)?);
        self.settle(snapshot, ppl);
        if self.prune_phase_over(cap) {
            self.close_phase(Phase::Rcg)?;
        }
        Ok(())
    }

    /// LHP target for an axis currently `current` wide out of `size`.
    fn lhp_target(&self, current: usize, size: usize) -> (usize, bool) {
        let Some(map) = &self.map else { return (current, false) };
        match map.nearest_lhp(current) {
            Ok(n) if n.found && n.dim <= size => (n.dim, true),
            _ => (current, false),
        }
    }

    fn rcg_step(&mut self) -> Result<()> {
        let before_dims = cell_dims(&self.model)?;
        let mut plans = Vec::new();
        let mut any = false;
        for (cell, d) in before_dims.iter().enumerate() {
            let dims = self.model.cells()[cell].dims();
            let (t_s, f_s) = self.lhp_target(d.d_s, dims.d_s);
            let (t_h, f_h) = if dims.hidden_depth > 0 { self.lhp_target(d.d_h, dims.d_h) } else { (0, true) };
            any |= t_s > d.d_s || t_h > d.d_h;
            plans.push((t_s, t_h, f_s && f_h));
        }
        let ppl_before = match self.state.valid_ppl {
            Some(p) => p,
            None => self.evaluate(&self.model)?,
        };
        let latency_before = self.model_latency(&self.model)?.median_ns;
        if any {
            let grads = gradient_pass(&mut self.model, &self.train, self.cfg.phases.bridging)?.average();
            let masks_before: Vec<(LayerId, Mask)> = self
                .model
                .layer_ids()
                .into_iter()
                .map(|id| (id, self.model.layer(id).expect("listed layer exists").mask().clone()))
                .collect();
            for (cell, (d, &(t_s, t_h, _))) in before_dims.iter().zip(&plans).enumerate() {
                let s = CellStructure::of(&self.model, cell)?;
                let requests = cell_requests(
                    &s,
                    Request::Count(t_h.saturating_sub(d.d_h)),
                    Request::Count(t_s - d.d_s),
                    Request::Count(0),
                );
                s.grow(&mut self.model, &grads, &requests, self.state.lr.lr)?;
            }
            self.jitter_grown(&masks_before);
        }
        let after_dims = cell_dims(&self.model)?;
        for (cell, (a, &(t_s, t_h, _))) in after_dims.iter().zip(&plans).enumerate() {
            let deep = self.model.cells()[cell].dims().hidden_depth > 0;
            if a.d_s != t_s || (deep && a.d_h != t_h) {
                return Err(Error::contract(format!(
                    "cell {cell} grew to {}/{} instead of {t_s}/{t_h}",
                    a.d_s, a.d_h
                )));
            }
        }
        let latency_after = self.model_latency(&self.model)?.median_ns;
        let mut ppl = ppl_before;
        if any {
            for _ in 0..self.cfg.phases.rcg_epochs {
                let train = self.train_one(None)?;
                ppl = self.evaluate(&self.model)?;
                self.record(train, ppl);
            }
            if self.cfg.phases.rcg_epochs == 0 {
                ppl = self.evaluate(&self.model)?;
            }
        }
        self.state.valid_ppl = Some(ppl);
        let cells = before_dims
            .iter()
            .zip(&after_dims)
            .zip(&plans)
            .map(|((b, a), &(t_s, t_h, found))| RcgCell {
                pruned: *b,
                target_d_s: t_s,
                target_d_h: t_h,
                found,
                grown: *a,
            })
            .collect();
        self.state.report.rcg = Some(RcgSummary {
            cells,
            latency_before_ns: latency_before,
            latency_after_ns: latency_after,
            valid_ppl_before: ppl_before,
            valid_ppl_after: ppl,
        });
        self.close_phase(Phase::Wp)
    }

    /// Adds `U(±jitter/√fan_in)` to entries that growth just woke. A fully
    /// removed unit has an identically zero bridging gradient, so without
    /// this its grown weights could never leave zero.
    fn jitter_grown(&mut self, before: &[(LayerId, Mask)]) {
        let j = self.cfg.phases.grow_jitter;
        if j == 0.0 {
            return;
        }
        for (id, old) in before {
            let layer = self.model.layer_mut(*id).expect("listed layer exists");
            let bound = j / (layer.in_dim() as f64).sqrt();
            for r in 0..layer.out_dim() {
                for c in 0..layer.in_dim() {
                    if layer.mask().get(r, c) && !old.get(r, c) {
                        let w = layer.weight()[(r, c)] + self.rng.uniform(-bound, bound);
                        layer.activate(r, c, w);
                    }
                }
            }
        }
    }

    fn wp_iteration(&mut self) -> Result<()> {
        let p_w = self.cfg.growprune.p_w;
        let cap = self.cfg.phases.wp_max_iterations;
        if !self.open_schedule(vec![p_w], false)? || self.prune_phase_over(cap) {
            return self.finish_wp();
        }
        let ratio = self.state.schedule.as_ref().expect("schedule open").ratios[0];
        let snapshot = self.model.clone();
        let mut pruned = 0;
        for id in self.model.layer_ids() {
            let layer = self.model.layer_mut(id).expect("listed layer exists");
            let active = layer.active_weights();
            // Never empty a layer outright.
            if ceil_count(ratio, active) < active {
                let before = layer.clone();
                pruned += weight_prune(layer, ratio)?;
                pruned -= keep_lines_alive(layer, &before);
            }
        }
        propagate_dead_neurons(&mut self.model);
        let ppl = self.retrain()?;
        debug!("wp iteration {}: ratio {ratio} pruned {pruned}, ppl {ppl:.3}", self.state.step);
        self.settle(snapshot, ppl);
        if self.prune_phase_over(cap) {
            self.finish_wp()?;
        }
        Ok(())
    }

    fn finish_wp(&mut self) -> Result<()> {
        for id in self.model.layer_ids() {
            self.model.layer_mut(id).expect("listed layer exists").apply_mask();
        }
        self.close_phase(Phase::Done)
    }

    /// Active dims of every cell.
    pub fn active_dims(&self) -> Result<Vec<ActiveDims>> {
        cell_dims(&self.model)
    }
}

/// Re-activates the largest-magnitude pruned entry of every row and column
/// that weight pruning just emptied, so the structure chosen by row/column
/// growth survives. Returns how many entries came back.
fn keep_lines_alive(layer: &mut MaskedLinear, before: &MaskedLinear) -> usize {
    let mut restored = 0;
    let mut revive = |layer: &mut MaskedLinear, cells: Vec<(usize, usize)>| {
        let best = cells
            .into_iter()
            .filter(|&(r, c)| before.mask().get(r, c))
            .fold(None, |best: Option<(usize, usize)>, (r, c)| match best {
                Some((br, bc)) if before.weight()[(br, bc)].abs() >= before.weight()[(r, c)].abs() => best,
                _ => Some((r, c)),
            });
        if let Some((r, c)) = best {
            layer.activate(r, c, before.weight()[(r, c)]);
            restored += 1;
        }
    };
    let (rows, cols) = (layer.out_dim(), layer.in_dim());
    for r in 0..rows {
        if before.mask().row_active(r) && !layer.mask().row_active(r) {
            revive(layer, (0..cols).map(|c| (r, c)).collect());
            layer.bias_mut()[r] = before.bias()[r];
        }
    }
    for c in 0..cols {
        if before.mask().col_active(c) && !layer.mask().col_active(c) {
            revive(layer, (0..rows).map(|r| (r, c)).collect());
        }
    }
    restored
}

/// Runs a whole flow, writing checkpoints and reports to `out_dir` if given.
pub fn run_flow(cfg: FlowConfig, profile: Option<LatencyProfile>, out_dir: Option<&Path>) -> Result<FlowReport> {
    Flow::new(cfg, profile, out_dir)?.run()
}

/// Validation perplexity of a checkpointed model on a corpus split the way
/// the flow splits it.
pub fn evaluate_checkpoint(ckpt: &FlowCheckpoint, corpus_text: &str, split: EvalSplit) -> Result<f64> {
    let corpus = Corpus::with_vocab(corpus_text, ckpt.vocab.clone(), ckpt.config.data.split)?;
    let tokens = match split {
        EvalSplit::Train => &corpus.train,
        EvalSplit::Valid => &corpus.valid,
        EvalSplit::Test => &corpus.test,
    };
    let windows = batchify(tokens, ckpt.config.data.eval_batch, ckpt.config.train.seq_len)?;
    Ok(perplexity(ckpt.model.evaluate(&windows)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Valid,
    Test,
}

pub fn load_flow_checkpoint(path: &Path) -> Result<FlowCheckpoint> {
    load_checkpoint(path)
}

/// Forward-latency statistics of a checkpointed model under its own latency
/// settings, with batch and run count overridable.
pub fn bench_checkpoint(ckpt: &FlowCheckpoint, batch: Option<usize>, runs: Option<usize>) -> Result<SampleStats> {
    let l = &ckpt.config.latency;
    let runs = runs.unwrap_or(l.measure.measured_runs);
    match l.mode {
        LatencyMode::Virtual => {
            let table = match (&ckpt.profile, l.curve) {
                (Some(p), _) => LatencyTable::from_profile(p),
                (None, Some(c)) => LatencyTable::Curve(c),
                (None, None) => return Err(Error::config("checkpoint has no latency table")),
            };
            Ok(exact_stats(virtual_model_latency(&ckpt.model, &table, l.seq_len)?, runs))
        }
        LatencyMode::Native => native_model_latency(
            &ckpt.model,
            batch.unwrap_or(l.batch),
            l.seq_len,
            l.measure.warmup_runs,
            runs,
            ckpt.config.seed,
        ),
    }
}
