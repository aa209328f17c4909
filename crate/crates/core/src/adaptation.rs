//! Dual-branch adaptation with periodic merging, base pretraining, and the
//! three-phase supervised schedule for the dense head.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_features, ExtractorSpec, FeatureMap};
use crate::error::{Error, Result};
use crate::io::HistoryRecord;
use crate::metrics::{evaluate_stacks, MetricReport};
use crate::model::{DenseTrfModel, Trainable};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParameterSet;
use crate::slot::{PermutationConfig, PositionGrid};
use crate::synthdata::Sample;

/// A sample with its frozen backbone features computed once.
#[derive(Debug, Clone)]
pub struct FeatureSample {
    pub id: String,
    pub features: FeatureMap,
    pub label: Option<Array3<u8>>,
    /// Index of the domain the sample came from, for batch scheduling.
    pub domain: usize,
}

pub fn featurize(samples: &[Sample], extractor: &ExtractorSpec, domain: usize) -> Result<Vec<FeatureSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(FeatureSample {
                id: s.id.clone(),
                features: extract_features(&s.image, extractor)?,
                label: s.label.clone(),
                domain,
            })
        })
        .collect()
}

/// Elementwise `weight · a + (1 − weight) · b`.
pub fn merge_weighted(a: &ParameterSet, b: &ParameterSet, weight: f64) -> Result<ParameterSet> {
    a.check_compatible(b)?;
    let mut out = a.clone();
    for (idx, (_, t)) in out.iter_mut().enumerate() {
        for (o, &v) in t.data_mut().iter_mut().zip(b.tensor(idx).data()) {
            *o = weight * *o + (1.0 - weight) * v;
        }
    }
    Ok(out)
}

/// Elementwise mean of two compatible sets.
pub fn merge_parameters(base: &ParameterSet, target: &ParameterSet) -> Result<ParameterSet> {
    base.check_compatible(target)?;
    let mut out = base.clone();
    for (idx, (_, t)) in out.iter_mut().enumerate() {
        for (o, &v) in t.data_mut().iter_mut().zip(target.tensor(idx).data()) {
            *o = (*o + v) / 2.0;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchRole {
    Base,
    Target,
}

impl BranchRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            BranchRole::Base => "base",
            BranchRole::Target => "target",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BranchState {
    pub role: BranchRole,
    pub params: ParameterSet,
    pub optimizer: AdamW,
    pub steps_done: usize,
}

impl BranchState {
    pub fn new(role: BranchRole, params: ParameterSet) -> Self {
        let optimizer = AdamW::new(&params);
        Self {
            role,
            params,
            optimizer,
            steps_done: 0,
        }
    }
}

/// Replaces both branches' parameters with copies of `merged` and clears
/// their optimizer moments.
pub fn broadcast(merged: &ParameterSet, base: &mut BranchState, target: &mut BranchState) -> Result<()> {
    base.params.assign_from(merged)?;
    target.params.assign_from(merged)?;
    base.optimizer.reset();
    target.optimizer.reset();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundConfig {
    pub steps_per_round: usize,
    pub total_rounds: usize,
    pub base_lr: f64,
    pub target_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Decoder position permutation for the base branch.
    pub permutation: PermutationConfig,
    /// Run the two branches on separate threads. Results do not depend on it.
    pub concurrent: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            steps_per_round: 200,
            total_rounds: 10,
            base_lr: 4e-4,
            target_lr: 1e-4,
            weight_decay: 1e-5,
            batch_size: 4,
            permutation: PermutationConfig::default(),
            concurrent: true,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr < 0.0 || self.target_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub base_losses: Vec<f64>,
    pub target_losses: Vec<f64>,
    /// `‖Θ_base − Θ_target‖` after each step pair, starting with the value at
    /// round start.
    pub drift: Vec<f64>,
    pub drift_before_merge: f64,
}

/// Order-sensitive mix of several seeds into one.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3u64, |acc, &p| {
        let mut z = acc ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Splits a pool by domain tag, keeping tag order.
fn by_domain(pool: &[FeatureSample]) -> Vec<Vec<&FeatureSample>> {
    let mut tags: Vec<usize> = pool.iter().map(|s| s.domain).collect();
    tags.sort_unstable();
    tags.dedup();
    tags.iter()
        .map(|&t| pool.iter().filter(|s| s.domain == t).collect())
        .collect()
}

/// One reconstruction step on a batch drawn from `domains[step % len]`.
/// Returns the batch-mean loss.
#[allow(clippy::too_many_arguments)]
fn recon_step(
    model: &DenseTrfModel,
    branch: &mut BranchState,
    domains: &[Vec<&FeatureSample>],
    permutation: &PermutationConfig,
    opt: &AdamWConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let pool = &domains[branch.steps_done % domains.len()];
    let mut grads = branch.params.zeros_like();
    let mut total = 0.0;
    for _ in 0..batch_size {
        let s = pool[rng.gen_range(0..pool.len())];
        let grid = PositionGrid::sinusoidal(s.features.height(), s.features.width());
        let positions = permutation.sample(grid, rng);
        total += model.recon_step(&branch.params, Some(&mut grads), &s.features, &positions, rng.gen())?;
    }
    grads.scale(1.0 / batch_size as f64);
    branch.optimizer.step(&mut branch.params, &grads, opt, |_| true)?;
    branch.steps_done += 1;
    Ok(total / batch_size as f64)
}

fn run_branch(
    model: &DenseTrfModel,
    branch: &mut BranchState,
    pool: &[FeatureSample],
    cfg: &RoundConfig,
    seed: u64,
    round: usize,
) -> Result<Vec<(ParameterSet, f64)>> {
    let (permutation, lr) = match branch.role {
        BranchRole::Base => (cfg.permutation, cfg.base_lr),
        BranchRole::Target => (PermutationConfig::disabled(), cfg.target_lr),
    };
    let opt = AdamWConfig::new(lr, cfg.weight_decay);
    let domains = by_domain(pool);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, round as u64, branch.role as u64]));
    let mut out = Vec::with_capacity(cfg.steps_per_round);
    for _ in 0..cfg.steps_per_round {
        let loss = recon_step(model, branch, &domains, &permutation, &opt, cfg.batch_size, &mut rng)
            .map_err(|e| annotate(e, branch.role, round, branch.steps_done))?;
        out.push((branch.params.clone(), loss));
    }
    Ok(out)
}

fn annotate(e: Error, role: BranchRole, round: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} ({} branch, round {round}, step {step})", role.as_str())),
        other => other,
    }
}

/// Trains both branches for one round, then merges and broadcasts. History
/// gets one record per branch and step plus a `merge` record.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptation_round(
    model: &DenseTrfModel,
    base: &mut BranchState,
    target: &mut BranchState,
    base_pool: &[FeatureSample],
    target_pool: &[FeatureSample],
    cfg: &RoundConfig,
    round: usize,
    seed: u64,
    history: &mut Vec<HistoryRecord>,
) -> Result<RoundReport> {
    cfg.validate()?;
    if base_pool.is_empty() || target_pool.is_empty() {
        return Err(Error::Empty("adaptation pools must be non-empty".into()));
    }
    base.params.check_compatible(&target.params)?;
    let start_drift = base.params.l2_distance(&target.params)?;

    let (base_trace, target_trace) = if cfg.concurrent {
        std::thread::scope(|scope| {
            let handle = scope.spawn(|| run_branch(model, base, base_pool, cfg, seed, round));
            let t = run_branch(model, target, target_pool, cfg, seed, round);
            (handle.join().expect("base branch thread panicked"), t)
        })
    } else {
        (
            run_branch(model, base, base_pool, cfg, seed, round),
            run_branch(model, target, target_pool, cfg, seed, round),
        )
    };
    let (base_trace, target_trace) = (base_trace?, target_trace?);

    let mut report = RoundReport {
        round,
        base_losses: Vec::new(),
        target_losses: Vec::new(),
        drift: vec![start_drift],
        drift_before_merge: start_drift,
    };
    history.push(drift_record(round, 0, "drift", start_drift));
    for (step, ((bp, bl), (tp, tl))) in base_trace.iter().zip(&target_trace).enumerate() {
        let drift = bp.l2_distance(tp)?;
        report.base_losses.push(*bl);
        report.target_losses.push(*tl);
        report.drift.push(drift);
        history.push(recon_record(round, step + 1, "base", *bl, drift));
        history.push(recon_record(round, step + 1, "target", *tl, drift));
    }
    report.drift_before_merge = base.params.l2_distance(&target.params)?;

    let merged = merge_parameters(&base.params, &target.params)?;
    broadcast(&merged, base, target)?;
    history.push(drift_record(round, cfg.steps_per_round, "merge", report.drift_before_merge));
    log::info!(
        "round {round}: base {:.5} target {:.5} drift {:.4e}",
        report.base_losses.last().copied().unwrap_or(f64::NAN),
        report.target_losses.last().copied().unwrap_or(f64::NAN),
        report.drift_before_merge
    );
    Ok(report)
}

fn recon_record(round: usize, step: usize, branch: &str, loss: f64, drift: f64) -> HistoryRecord {
    HistoryRecord {
        round,
        step,
        branch: branch.to_string(),
        loss_recon: Some(loss),
        loss_bce: None,
        loss_total: Some(loss),
        param_drift: Some(drift),
    }
}

fn drift_record(round: usize, step: usize, branch: &str, drift: f64) -> HistoryRecord {
    HistoryRecord {
        round,
        step,
        branch: branch.to_string(),
        loss_recon: None,
        loss_bce: None,
        loss_total: None,
        param_drift: Some(drift),
    }
}

/// Runs `cfg.total_rounds` rounds starting from `theta` and returns the
/// final merged parameters.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    model: &DenseTrfModel,
    theta: &ParameterSet,
    base_pool: &[FeatureSample],
    target_pool: &[FeatureSample],
    cfg: &RoundConfig,
    seed: u64,
    history: &mut Vec<HistoryRecord>,
) -> Result<(ParameterSet, Vec<RoundReport>)> {
    let mut base = BranchState::new(BranchRole::Base, theta.clone());
    let mut target = BranchState::new(BranchRole::Target, theta.clone());
    let mut reports = Vec::with_capacity(cfg.total_rounds);
    for round in 0..cfg.total_rounds {
        reports.push(run_adaptation_round(
            model,
            &mut base,
            &mut target,
            base_pool,
            target_pool,
            cfg,
            round,
            seed,
            history,
        )?);
    }
    Ok((base.params, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub permutation: PermutationConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 4e-4,
            weight_decay: 1e-5,
            batch_size: 4,
            permutation: PermutationConfig::default(),
        }
    }
}

/// Reconstruction pretraining of `theta` on an unlabeled pool, round-robin
/// over its domains.
pub fn pretrain_base(
    model: &DenseTrfModel,
    theta: ParameterSet,
    pool: &[FeatureSample],
    cfg: &PretrainConfig,
    seed: u64,
    history: &mut Vec<HistoryRecord>,
) -> Result<ParameterSet> {
    if pool.is_empty() {
        return Err(Error::Empty("pretraining pool".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut branch = BranchState::new(BranchRole::Base, theta);
    let start = branch.params.clone();
    let domains = by_domain(pool);
    let opt = AdamWConfig::new(cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5052_4554]));
    for step in 0..cfg.steps {
        let loss = recon_step(model, &mut branch, &domains, &cfg.permutation, &opt, cfg.batch_size, &mut rng)
            .map_err(|e| annotate(e, BranchRole::Base, 0, step))?;
        let drift = branch.params.l2_distance(&start)?;
        history.push(recon_record(0, step + 1, "pretrain", loss, drift));
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: recon {loss:.5}");
        }
    }
    Ok(branch.params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseSchedule {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub phase3_iters: usize,
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        Self {
            phase1_iters: 1000,
            phase2_iters: 3000,
            phase3_iters: 1000,
        }
    }
}

impl PhaseSchedule {
    pub fn total(&self) -> usize {
        self.phase1_iters + self.phase2_iters + self.phase3_iters
    }

    /// Phase (1, 2 or 3) of zero-based iteration `iter`.
    pub fn phase_of(&self, iter: usize) -> usize {
        if iter < self.phase1_iters {
            1
        } else if iter < self.phase1_iters + self.phase2_iters {
            2
        } else {
            3
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTrainConfig {
    pub head_lr: f64,
    pub theta_lr: f64,
    pub theta_weight_decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
    /// Validation DICE is computed every this many iterations (0 disables).
    pub eval_every: usize,
    /// Stop when validation DICE has not improved for this many evaluations.
    pub patience: Option<usize>,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            head_lr: 1e-4,
            theta_lr: 1e-4,
            theta_weight_decay: 1e-5,
            lambda: crate::head::DEFAULT_LAMBDA,
            batch_size: 4,
            eval_every: 500,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub phase: usize,
    pub bce: f64,
    pub recon: f64,
    pub lambda: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrainReport {
    pub iterations: Vec<IterationLog>,
    /// `(iteration, validation DICE)` pairs.
    pub validation: Vec<(usize, f64)>,
    pub stopped_early: Option<usize>,
}

/// Mean DICE of thresholded predictions against labels.
pub fn evaluate_pool(
    model: &DenseTrfModel,
    theta: &ParameterSet,
    head: &ParameterSet,
    pool: &[FeatureSample],
    seed: u64,
) -> Result<MetricReport> {
    let mut preds = Vec::with_capacity(pool.len());
    for (i, s) in pool.iter().enumerate() {
        if s.label.is_none() {
            return Err(Error::Empty(format!("sample {} has no label", s.id)));
        }
        let pass = model.forward(theta, head, &s.features, mix_seed(&[seed, i as u64]))?;
        preds.push(pass.prediction.threshold());
    }
    evaluate_stacks(
        preds
            .iter()
            .zip(pool)
            .map(|(p, s)| (p.view(), s.label.as_ref().expect("checked above").view())),
    )
}

/// Three-phase supervised training. `recon_in_history` controls whether the
/// reconstruction term is written to `history`.
#[allow(clippy::too_many_arguments)]
pub fn train_dense_head(
    model: &DenseTrfModel,
    theta: &mut ParameterSet,
    head: &mut ParameterSet,
    labeled: &[FeatureSample],
    validation: Option<&[FeatureSample]>,
    schedule: &PhaseSchedule,
    cfg: &HeadTrainConfig,
    seed: u64,
    history: &mut Vec<HistoryRecord>,
    recon_in_history: bool,
) -> Result<HeadTrainReport> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled pool".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    model.check_theta(theta)?;
    model.check_head(head)?;
    for s in labeled {
        if s.label.is_none() {
            return Err(Error::Empty(format!("labeled sample {} has no label", s.id)));
        }
    }
    let head_opt_cfg = AdamWConfig::new(cfg.head_lr, 0.0);
    let theta_opt_cfg = AdamWConfig::new(cfg.theta_lr, cfg.theta_weight_decay);
    let mut head_opt = AdamW::new(head);
    let mut theta_opt = AdamW::new(theta);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x4845_4144]));
    let mut report = HeadTrainReport {
        iterations: Vec::with_capacity(schedule.total()),
        validation: Vec::new(),
        stopped_early: None,
    };
    let mut best = f64::NEG_INFINITY;
    let mut since_best = 0usize;

    let validate = |theta: &ParameterSet, head: &ParameterSet, iter: usize, report: &mut HeadTrainReport| -> Result<f64> {
        let dice = match validation {
            Some(v) if !v.is_empty() => evaluate_pool(model, theta, head, v, seed)?.dice,
            _ => return Ok(f64::NAN),
        };
        report.validation.push((iter, dice));
        Ok(dice)
    };

    for iter in 0..schedule.total() {
        if cfg.eval_every > 0 && iter % cfg.eval_every == 0 {
            let dice = validate(theta, head, iter, &mut report)?;
            if dice > best {
                best = dice;
                since_best = 0;
            } else if dice.is_finite() {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best > p) {
                    report.stopped_early = Some(iter);
                    break;
                }
            }
        }
        let phase = schedule.phase_of(iter);
        let (trainable, lambda) = match phase {
            1 => (Trainable { theta: false, head: true }, cfg.lambda),
            2 => (Trainable { theta: true, head: true }, cfg.lambda),
            _ => (Trainable { theta: true, head: true }, 0.0),
        };
        let mut g_theta = theta.zeros_like();
        let mut g_head = head.zeros_like();
        let (mut bce, mut recon, mut total) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let s = &labeled[rng.gen_range(0..labeled.len())];
            let label = s.label.as_ref().expect("checked above");
            let loss = model.joint_step(
                theta,
                head,
                Some((&mut g_theta, &mut g_head)),
                trainable,
                &s.features,
                label.view(),
                lambda,
                rng.gen(),
            )?;
            bce += loss.bce;
            recon += loss.recon;
            total += loss.total;
        }
        let b = cfg.batch_size as f64;
        let (bce, recon, total) = (bce / b, recon / b, total / b);
        g_head.scale(1.0 / b);
        head_opt.step(head, &g_head, &head_opt_cfg, |_| true)?;
        if trainable.theta {
            g_theta.scale(1.0 / b);
            theta_opt.step(theta, &g_theta, &theta_opt_cfg, |_| true)?;
        }
        report.iterations.push(IterationLog {
            iter,
            phase,
            bce,
            recon,
            lambda,
            total,
        });
        history.push(HistoryRecord {
            round: phase,
            step: iter + 1,
            branch: "head".into(),
            loss_recon: recon_in_history.then_some(recon),
            loss_bce: Some(bce),
            loss_total: Some(if recon_in_history { total } else { bce }),
            param_drift: None,
        });
        if iter % 200 == 0 {
            log::debug!("head iter {iter} (phase {phase}): bce {bce:.5} recon {recon:.5}");
        }
    }
    if report.stopped_early.is_none() && cfg.eval_every > 0 {
        validate(theta, head, schedule.total(), &mut report)?;
    }
    Ok(report)
}
