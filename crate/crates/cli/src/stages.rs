//! The individual pipeline stages. Each reads its prerequisites from the
//! per-seed directories and writes checkpoints and history next to them.

use std::fs;
use std::path::{Path, PathBuf};

use densetrf::adaptation::{self, evaluate_pool, mix_seed, RoundReport};
use densetrf::io::{
    load_checkpoint, read_csv, save_checkpoint, save_prediction, save_slot_masks, summary_path, write_csv,
    CheckpointMeta, HistoryRecord, ResultRow, SummaryRow,
};
use densetrf::metrics::{aggregate_runs, MetricReport};
use densetrf::model::DenseTrfModel;
use densetrf::params::ParameterSet;
use densetrf::pipeline::{pretrained_theta, train_variant_head, AblationVariant, DataConfig, FeaturePools};
use densetrf::synthdata::{
    class_texture_statistics, generate_domain, make_shift_benchmark, mean_blob_eccentricity, BenchmarkBundle,
    DomainSpec, Manifest, MANIFEST_FILE,
};
use densetrf::Error;
use serde::{Deserialize, Serialize};

use crate::{create_dir, for_each_seed, plots, CliError, CliResult, Context};

pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const ADAPTED_CHECKPOINT: &str = "adapted.ckpt";
pub const THETA_CHECKPOINT: &str = "theta.ckpt";
pub const HEAD_CHECKPOINT: &str = "head.ckpt";
pub const PRETRAIN_HISTORY: &str = "history_pretrain.csv";
pub const ADAPT_HISTORY: &str = "history_adapt.csv";
pub const HEAD_HISTORY: &str = "history_head.csv";

/// Samples per domain used for the benchmark validity check.
pub const VALIDITY_SAMPLES: usize = 200;
const MIN_BLOB_AREA: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateOutcome {
    Generated,
    Verified,
}

/// Texture should match across domains while blob shape should not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub samples_per_domain: usize,
    /// Relative L2 gap of mean texture statistics, per class including background.
    pub texture_gaps: Vec<f64>,
    pub eccentricity_source: f64,
    pub eccentricity_target: f64,
    pub eccentricity_gap: f64,
    pub passed: bool,
}

pub fn benchmark_validity(source: &DomainSpec, target: &DomainSpec, n: usize, patch_size: usize) -> CliResult<ValidityReport> {
    let s = generate_domain(source, n, 1.0)?;
    let t = generate_domain(target, n, 1.0)?;
    let stats_s = class_texture_statistics(&s, patch_size)?;
    let stats_t = class_texture_statistics(&t, patch_size)?;
    let texture_gaps: Vec<f64> = stats_s
        .iter()
        .zip(&stats_t)
        .map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) => (a - b).mapv(|v| v * v).sum().sqrt() / a.mapv(|v| v * v).sum().sqrt(),
            _ => f64::NAN,
        })
        .collect();
    let es = mean_blob_eccentricity(&s, MIN_BLOB_AREA)?;
    let et = mean_blob_eccentricity(&t, MIN_BLOB_AREA)?;
    let eccentricity_gap = (et - es).abs() / es;
    Ok(ValidityReport {
        samples_per_domain: n,
        passed: texture_gaps.iter().all(|g| *g < 0.10) && eccentricity_gap > 0.25,
        texture_gaps,
        eccentricity_source: es,
        eccentricity_target: et,
        eccentricity_gap,
    })
}

pub fn data_dir(ctx: &Context) -> PathBuf {
    ctx.out.join("data")
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Writes the synthetic benchmark, or verifies an existing copy generated
/// from the same specs.
pub fn generate(ctx: &Context) -> CliResult<GenerateOutcome> {
    let DataConfig::Synthetic { source, target, sizes } = &ctx.config.data else {
        return Err(Error::Config("generate needs a synthetic data config".into()).into());
    };
    let root = data_dir(ctx);
    let manifest_path = root.join(MANIFEST_FILE);
    let bundle = make_shift_benchmark(source, target, *sizes)?;
    if manifest_path.exists() {
        let existing = Manifest::read(&manifest_path)?;
        if existing == bundle.manifest && !ctx.overwrite {
            let loaded = BenchmarkBundle::read(&root)?;
            let counts = [
                loaded.source_labeled.len(),
                loaded.source_unlabeled.len(),
                loaded.target_unlabeled.len(),
                loaded.target_test.len(),
                loaded.source_test.len(),
            ];
            let expected = [
                bundle.source_labeled.len(),
                bundle.source_unlabeled.len(),
                bundle.target_unlabeled.len(),
                bundle.target_test.len(),
                bundle.source_test.len(),
            ];
            if counts != expected {
                return Err(Error::Config(format!(
                    "{} is incomplete ({counts:?} samples, manifest lists {expected:?}); rerun with --overwrite",
                    root.display()
                ))
                .into());
            }
            log::info!("dataset at {} matches the manifest; nothing to do", root.display());
            return Ok(GenerateOutcome::Verified);
        }
        ctx.check_writable(&root)?;
    } else if root.exists() && fs::read_dir(&root).map(|mut d| d.next().is_some()).unwrap_or(false) {
        ctx.check_writable(&root)?;
    }
    if root.exists() {
        fs::remove_dir_all(&root).map_err(|e| CliError::io(format!("removing {}", root.display()), e))?;
    }
    bundle.write(&root)?;
    let report = benchmark_validity(source, target, VALIDITY_SAMPLES, ctx.config.extractor.patch_size)?;
    log::info!(
        "benchmark check: texture gaps {:?}, eccentricity {:.3} vs {:.3} ({})",
        report.texture_gaps,
        report.eccentricity_source,
        report.eccentricity_target,
        if report.passed { "pass" } else { "FAIL" }
    );
    let text = format!(
        "config_hash = \"{}\"\n{}",
        ctx.hash,
        toml::to_string_pretty(&report).expect("report serializes")
    );
    write_text(&root.join("validity.toml"), &text)?;
    Ok(GenerateOutcome::Generated)
}

pub fn load_pools(ctx: &Context) -> CliResult<FeaturePools> {
    let cfg = &ctx.config;
    let bundle = cfg.load_data()?;
    Ok(FeaturePools::new(&bundle, &cfg.extractor, cfg.validation_samples)?)
}

fn meta(ctx: &Context, kind: &str, seed: u64, round: Option<usize>, phase: Option<usize>) -> CheckpointMeta {
    CheckpointMeta {
        kind: kind.into(),
        round,
        phase,
        seed,
        config_hash: ctx.hash.clone(),
    }
}

/// Loads an upstream checkpoint, warning when it came from another config.
pub fn load_stage_checkpoint(ctx: &Context, path: &Path) -> CliResult<ParameterSet> {
    let (params, meta) = load_checkpoint(path)?;
    match meta {
        Some(m) if m.config_hash != ctx.hash => log::warn!(
            "{} was produced by config {} (current {}); continuing",
            path.display(),
            &m.config_hash[..m.config_hash.len().min(12)],
            ctx.short_hash()
        ),
        None => log::warn!("{} has no metadata sidecar", path.display()),
        _ => {}
    }
    Ok(params)
}

pub fn pretrain_base(ctx: &Context) -> CliResult<()> {
    let pools = load_pools(ctx)?;
    let model = DenseTrfModel::new(ctx.config.model.clone());
    for_each_seed(ctx, |seed| {
        let dir = ctx.seed_dir(seed);
        let ckpt = dir.join(BASE_CHECKPOINT);
        ctx.check_writable(&ckpt)?;
        let mut history = Vec::new();
        let theta = pretrained_theta(&ctx.config, &model, &pools, seed, &mut history)?;
        save_checkpoint(&ckpt, &theta, &meta(ctx, "base", seed, None, None))?;
        write_csv(&dir.join(PRETRAIN_HISTORY), &history)?;
        log::info!("seed {seed}: base checkpoint at {}", ckpt.display());
        Ok(())
    })
    .map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub base_loss_mean: f64,
    pub target_loss_mean: f64,
    pub drift_before_merge: f64,
}

impl From<&RoundReport> for RoundRow {
    fn from(r: &RoundReport) -> Self {
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self {
            round: r.round,
            base_loss_mean: mean(&r.base_losses),
            target_loss_mean: mean(&r.target_losses),
            drift_before_merge: r.drift_before_merge,
        }
    }
}

pub fn adapt(ctx: &Context) -> CliResult<()> {
    let pools = load_pools(ctx)?;
    let model = DenseTrfModel::new(ctx.config.model.clone());
    let base_pool = pools.base_pool();
    for_each_seed(ctx, |seed| {
        let dir = ctx.seed_dir(seed);
        let theta = load_stage_checkpoint(ctx, &dir.join(BASE_CHECKPOINT))?;
        model.check_theta(&theta)?;
        let ckpt = dir.join(ADAPTED_CHECKPOINT);
        ctx.check_writable(&ckpt)?;
        let mut history = Vec::new();
        let (merged, reports) = adaptation::adapt(
            &model,
            &theta,
            &base_pool,
            &pools.target_unlabeled,
            &ctx.config.round,
            seed,
            &mut history,
        )?;
        let rounds = ctx.config.round.total_rounds;
        save_checkpoint(&ckpt, &merged, &meta(ctx, "adapted", seed, Some(rounds), None))?;
        write_csv(&dir.join(ADAPT_HISTORY), &history)?;
        let rows: Vec<RoundRow> = reports.iter().map(RoundRow::from).collect();
        write_csv(&dir.join("rounds.csv"), &rows)?;
        log::info!("seed {seed}: adapted checkpoint at {}", ckpt.display());
        Ok(())
    })
    .map(|_| ())
}

/// Where the variant's Θ comes from before head training.
pub fn variant_input(variant: AblationVariant) -> Option<&'static str> {
    match variant {
        AblationVariant::Full | AblationVariant::NoConcat => Some(ADAPTED_CHECKPOINT),
        AblationVariant::SaNoAdapt => Some(BASE_CHECKPOINT),
        AblationVariant::NoSa => None,
    }
}

pub fn variant_dir(ctx: &Context, seed: u64, variant: AblationVariant) -> PathBuf {
    ctx.seed_dir(seed).join(variant.as_str())
}

pub fn train_head(ctx: &Context) -> CliResult<()> {
    let pools = load_pools(ctx)?;
    let variant = ctx.config.variant;
    let model = DenseTrfModel::new(variant.model_config(&ctx.config.model));
    for_each_seed(ctx, |seed| {
        let mut theta = match variant_input(variant) {
            Some(name) => load_stage_checkpoint(ctx, &ctx.seed_dir(seed).join(name))?,
            None => model.init_theta(seed),
        };
        let dir = variant_dir(ctx, seed, variant);
        ctx.check_writable(&dir.join(HEAD_CHECKPOINT))?;
        let mut history = Vec::new();
        let (head, report) = train_variant_head(&ctx.config, &pools, variant, seed, &mut theta, &mut history)?;
        save_checkpoint(&dir.join(THETA_CHECKPOINT), &theta, &meta(ctx, "theta", seed, None, Some(3)))?;
        save_checkpoint(&dir.join(HEAD_CHECKPOINT), &head, &meta(ctx, "head", seed, None, Some(3)))?;
        write_csv(&dir.join(HEAD_HISTORY), &history)?;
        let validation: Vec<ValidationRow> = report
            .validation
            .iter()
            .map(|&(iter, dice)| ValidationRow { iter, dice })
            .collect();
        write_csv(&dir.join("validation.csv"), &validation)?;
        log::info!("seed {seed}: {} head trained", variant.as_str());
        Ok(())
    })
    .map(|_| ())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub iter: usize,
    pub dice: f64,
}

/// Per-class rows plus a `mean` row for one evaluated run.
pub fn result_rows(dataset: &str, variant: AblationVariant, seed: u64, report: &MetricReport) -> Vec<ResultRow> {
    let row = |class: String, dice, iou, hd| ResultRow {
        dataset: dataset.into(),
        variant: variant.as_str().into(),
        seed,
        class,
        dice,
        iou,
        hd,
    };
    report
        .per_class
        .iter()
        .enumerate()
        .map(|(c, m)| row(format!("class_{}", c + 1), m.dice, m.iou, m.hd))
        .chain(std::iter::once(row("mean".into(), report.dice, report.iou, report.hd)))
        .collect()
}

pub fn summary_row(dataset: &str, variant: AblationVariant, reports: &[MetricReport]) -> CliResult<SummaryRow> {
    let s = aggregate_runs(reports)?;
    Ok(SummaryRow {
        dataset: dataset.into(),
        variant: variant.as_str().into(),
        runs: s.dice.n,
        dice_mean: s.dice.mean,
        dice_std: s.dice.std,
        iou_mean: s.iou.mean,
        iou_std: s.iou.std,
        hd_mean: s.hd.map(|h| h.mean),
        hd_std: s.hd.map(|h| h.std),
        hd_excluded: s.hd_excluded,
    })
}

/// Writes the results CSV and its summary beside it.
pub fn write_results(path: &Path, rows: &[ResultRow], summary: &[SummaryRow]) -> CliResult<()> {
    write_csv(path, rows)?;
    write_csv(&summary_path(path), summary)?;
    Ok(())
}

/// Loss curves from whichever history files exist in `dirs`.
pub fn plot_histories(path: &Path, title: &str, files: &[PathBuf]) -> CliResult<bool> {
    let mut series = Vec::new();
    let mut offset = 0.0;
    for file in files.iter().filter(|f| f.exists()) {
        let records: Vec<HistoryRecord> = read_csv(file)?;
        series.extend(history_series(&records, offset));
        offset += records.iter().filter(|r| r.loss_total.is_some()).count() as f64;
    }
    if series.is_empty() {
        return Ok(false);
    }
    plots::line_chart(path, title, "step", &series)?;
    Ok(true)
}

/// Recon loss per branch and total loss of head training, on a common step axis.
pub fn history_series(records: &[HistoryRecord], offset: f64) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let mut x = offset;
    for r in records {
        let (name, value) = match r.branch.as_str() {
            "head" => ("head total".to_string(), r.loss_total),
            "drift" | "merge" => continue,
            b => (format!("{b} recon"), r.loss_recon),
        };
        let Some(v) = value else { continue };
        x += 1.0;
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((x, v)),
            None => out.push((name, vec![(x, v)])),
        }
    }
    for (_, pts) in &mut out {
        *pts = plots::downsample(pts, 300);
    }
    out
}

pub fn evaluate(ctx: &Context, export: usize) -> CliResult<()> {
    let pools = load_pools(ctx)?;
    let variant = ctx.config.variant;
    let model = DenseTrfModel::new(variant.model_config(&ctx.config.model));
    let results_path = ctx.out.join(format!("results_{}.csv", variant.as_str()));
    ctx.check_writable(&results_path)?;
    let runs = for_each_seed(ctx, |seed| {
        let dir = variant_dir(ctx, seed, variant);
        let theta = load_stage_checkpoint(ctx, &dir.join(THETA_CHECKPOINT))?;
        let head = load_stage_checkpoint(ctx, &dir.join(HEAD_CHECKPOINT))?;
        model.check_theta(&theta)?;
        model.check_head(&head)?;
        let target = evaluate_pool(&model, &theta, &head, &pools.target_test, seed)?;
        let source = evaluate_pool(&model, &theta, &head, &pools.source_test, seed)?;
        for (i, s) in pools.target_test.iter().enumerate().take(export) {
            let pass = model.forward(&theta, &head, &s.features, mix_seed(&[seed, i as u64]))?;
            save_prediction(&dir.join("predictions"), &s.id, &pass.prediction)?;
            create_dir(&dir.join("slots"))?;
            save_slot_masks(&dir.join("slots"), &s.id, &pass.decode, s.features.patch_size())?;
        }
        let seed_dir = ctx.seed_dir(seed);
        let files = [
            seed_dir.join(PRETRAIN_HISTORY),
            seed_dir.join(ADAPT_HISTORY),
            dir.join(HEAD_HISTORY),
        ];
        let plot = ctx
            .out
            .join("plots")
            .join(format!("loss_{}_seed{seed}.svg", variant.as_str()));
        let title = format!("{} seed {seed} (config {})", variant.as_str(), ctx.short_hash());
        plot_histories(&plot, &title, &files)?;
        Ok((seed, target, source))
    })?;

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (name, pick) in [("target", 0usize), ("source", 1)] {
        let reports: Vec<MetricReport> = runs
            .iter()
            .map(|(_, t, s)| if pick == 0 { t.clone() } else { s.clone() })
            .collect();
        for ((seed, _, _), r) in runs.iter().zip(&reports) {
            rows.extend(result_rows(name, variant, *seed, r));
        }
        summary.push(summary_row(name, variant, &reports)?);
    }
    write_results(&results_path, &rows, &summary)?;
    let bars: Vec<(String, Vec<(f64, f64)>)> = summary
        .iter()
        .map(|s| (s.dataset.clone(), vec![(s.dice_mean, s.dice_std), (s.iou_mean, s.iou_std)]))
        .collect();
    plots::grouped_bars(
        &ctx.out.join("plots").join(format!("metrics_{}.svg", variant.as_str())),
        &format!("{} test metrics (config {})", variant.as_str(), ctx.short_hash()),
        &["DICE".into(), "IoU".into()],
        &bars,
    )?;
    for s in &summary {
        log::info!(
            "{} {}: DICE {:.4} ± {:.4} over {} run(s)",
            s.variant,
            s.dataset,
            s.dice_mean,
            s.dice_std,
            s.runs
        );
    }
    Ok(())
}
