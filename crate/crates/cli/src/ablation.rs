//! Four-variant comparison over all seeds, the comparison table and the
//! ordering checks.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use densetrf::io::{write_csv, ResultRow, SummaryRow};
use densetrf::metrics::MetricReport;
use densetrf::model::DenseTrfModel;
use densetrf::pipeline::{pretrained_theta, run_variant, AblationVariant};
use serde::{Deserialize, Serialize};

use crate::stages::{load_pools, plot_histories, result_rows, summary_row, write_results};
use crate::{for_each_seed, plots, CliError, CliResult, Context};

/// Metrics of one variant on one seed.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: AblationVariant,
    pub seed: u64,
    pub target: MetricReport,
    pub source: MetricReport,
}

/// One line of the comparison table (target test set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub reference: bool,
    pub runs: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub results: Vec<VariantResult>,
    pub table: Vec<TableRow>,
    pub checks: Vec<Check>,
    pub dir: PathBuf,
}

fn mean_dice(results: &[VariantResult], variant: AblationVariant) -> Option<f64> {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.target.dice)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Directional ordering of the variants plus the source/target gap of the
/// source-only model.
pub fn ordering_checks(results: &[VariantResult]) -> Vec<Check> {
    use AblationVariant::*;
    let full = mean_dice(results, Full);
    let compare = |name: &str, other: AblationVariant, strict: bool| {
        let (passed, detail) = match (full, mean_dice(results, other)) {
            (Some(f), Some(o)) => (
                if strict { f > o } else { f >= o },
                format!("full {f:.4} {} {} {o:.4}", if strict { ">" } else { ">=" }, other.as_str()),
            ),
            _ => (false, "variant missing".into()),
        };
        Check {
            name: name.into(),
            passed,
            detail,
        }
    };
    let baseline: Vec<&VariantResult> = results.iter().filter(|r| r.variant == SaNoAdapt).collect();
    let gap = Check {
        name: "domain gap of the source-only model".into(),
        passed: !baseline.is_empty() && baseline.iter().all(|r| r.source.dice > r.target.dice),
        detail: baseline
            .iter()
            .map(|r| format!("seed {}: {:.4} > {:.4}", r.seed, r.source.dice, r.target.dice))
            .collect::<Vec<_>>()
            .join(", "),
    };
    vec![
        compare("adaptation helps", SaNoAdapt, true),
        compare("concatenation helps", NoConcat, false),
        compare("slot attention helps", NoSa, false),
        gap,
    ]
}

pub fn comparison_table(results: &[VariantResult]) -> CliResult<Vec<TableRow>> {
    AblationVariant::ALL
        .iter()
        .filter_map(|&v| {
            let reports: Vec<MetricReport> = results
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| r.target.clone())
                .collect();
            (!reports.is_empty()).then(|| {
                summary_row("target", v, &reports).map(|s| TableRow {
                    variant: v.as_str().into(),
                    reference: v == AblationVariant::Full,
                    runs: s.runs,
                    dice_mean: s.dice_mean,
                    dice_std: s.dice_std,
                    hd_mean: s.hd_mean,
                    hd_std: s.hd_std,
                })
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.3}"))
}

pub fn render_report(ctx: &Context, outcome: &AblationOutcome) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Ablation report\n\nconfig hash `{}`\n", ctx.hash);
    let _ = writeln!(s, "Target test set, mean ± std over seeds.\n");
    let _ = writeln!(s, "| variant | DICE | HD (px) | runs |\n|---|---|---|---|");
    for r in &outcome.table {
        let name = if r.reference { format!("**{}** (reference)", r.variant) } else { r.variant.clone() };
        let _ = writeln!(
            s,
            "| {name} | {:.4} ± {:.4} | {} ± {} | {} |",
            r.dice_mean,
            r.dice_std,
            fmt_opt(r.hd_mean),
            fmt_opt(r.hd_std),
            r.runs
        );
    }
    let seeds = &ctx.config.seeds;
    let _ = writeln!(s, "\nPer-seed target DICE:\n");
    let _ = writeln!(
        s,
        "| variant | {} |\n|---|{}",
        seeds.iter().map(|x| format!("seed {x}")).collect::<Vec<_>>().join(" | "),
        "---|".repeat(seeds.len())
    );
    for v in AblationVariant::ALL {
        let cells: Vec<String> = seeds
            .iter()
            .map(|&seed| {
                outcome
                    .results
                    .iter()
                    .find(|r| r.variant == v && r.seed == seed)
                    .map_or("-".into(), |r| format!("{:.4}", r.target.dice))
            })
            .collect();
        let _ = writeln!(s, "| {} | {} |", v.as_str(), cells.join(" | "));
    }
    let _ = writeln!(s, "\n## Checks\n");
    for c in &outcome.checks {
        let _ = writeln!(s, "- [{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    s
}

pub fn ablate(ctx: &Context) -> CliResult<AblationOutcome> {
    let dir = ctx.out.join("ablation");
    let table_path = dir.join("table.csv");
    ctx.check_writable(&table_path)?;
    let pools = load_pools(ctx)?;
    let cfg = &ctx.config;
    let per_seed = for_each_seed(ctx, |seed| {
        let model = DenseTrfModel::new(cfg.model.clone());
        let mut pre_history = Vec::new();
        let pretrained = pretrained_theta(cfg, &model, &pools, seed, &mut pre_history)?;
        write_csv(&dir.join("history").join(format!("pretrain_seed{seed}.csv")), &pre_history)?;
        let mut out = Vec::new();
        for variant in AblationVariant::ALL {
            let run = run_variant(cfg, &pools, variant, seed, Some(&pretrained)).inspect_err(|_| {
                log::error!("variant {} seed {seed} failed", variant.as_str());
            })?;
            write_csv(
                &dir.join("history").join(format!("{}_seed{seed}.csv", variant.as_str())),
                &run.history,
            )?;
            log::info!(
                "seed {seed} {:<12} target DICE {:.4} source DICE {:.4}",
                variant.as_str(),
                run.target_test.dice,
                run.source_test.dice
            );
            out.push(VariantResult {
                variant,
                seed,
                target: run.target_test,
                source: run.source_test,
            });
        }
        Ok(out)
    })?;
    let results: Vec<VariantResult> = per_seed.into_iter().flatten().collect();

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut summary: Vec<SummaryRow> = Vec::new();
    for dataset in ["target", "source"] {
        for v in AblationVariant::ALL {
            let reports: Vec<MetricReport> = results
                .iter()
                .filter(|r| r.variant == v)
                .map(|r| {
                    let rep = if dataset == "target" { &r.target } else { &r.source };
                    rows.extend(result_rows(dataset, v, r.seed, rep));
                    rep.clone()
                })
                .collect();
            summary.push(summary_row(dataset, v, &reports)?);
        }
    }
    write_results(&dir.join("results.csv"), &rows, &summary)?;
    let table = comparison_table(&results)?;
    write_csv(&table_path, &table)?;
    let checks = ordering_checks(&results);
    let outcome = AblationOutcome {
        results,
        table,
        checks,
        dir: dir.clone(),
    };
    let report = render_report(ctx, &outcome);
    let report_path = dir.join("report.md");
    fs::write(&report_path, &report).map_err(|e| CliError::io(format!("writing {}", report_path.display()), e))?;

    let groups: Vec<String> = AblationVariant::ALL.iter().map(|v| v.as_str().to_string()).collect();
    let bars: Vec<(String, Vec<(f64, f64)>)> = ["target", "source"]
        .iter()
        .map(|d| {
            let vals = summary
                .iter()
                .filter(|s| s.dataset == *d)
                .map(|s| (s.dice_mean, s.dice_std))
                .collect();
            (format!("{d} DICE"), vals)
        })
        .collect();
    plots::grouped_bars(
        &dir.join("ablation_dice.svg"),
        &format!("DICE by variant (config {})", ctx.short_hash()),
        &groups,
        &bars,
    )?;
    if let Some(&seed) = cfg.seeds.first() {
        let files = [
            dir.join("history").join(format!("pretrain_seed{seed}.csv")),
            dir.join("history").join(format!("full_seed{seed}.csv")),
        ];
        plot_histories(
            &dir.join(format!("loss_full_seed{seed}.svg")),
            &format!("full, seed {seed} (config {})", ctx.short_hash()),
            &files,
        )?;
    }
    for c in &outcome.checks {
        log::info!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use densetrf::metrics::ClassMetrics;

    fn report(dice: f64) -> MetricReport {
        MetricReport::from_classes(vec![ClassMetrics {
            dice,
            iou: dice,
            hd: Some(1.0),
            hd_undefined: 0,
        }])
    }

    fn results(values: &[(AblationVariant, f64, f64)]) -> Vec<VariantResult> {
        values
            .iter()
            .enumerate()
            .map(|(i, &(variant, t, s))| VariantResult {
                variant,
                seed: i as u64,
                target: report(t),
                source: report(s),
            })
            .collect()
    }

    #[test]
    fn checks_follow_the_means() {
        use AblationVariant::*;
        let r = results(&[(Full, 0.6, 0.9), (SaNoAdapt, 0.5, 0.9), (NoConcat, 0.6, 0.9), (NoSa, 0.7, 0.9)]);
        let c = ordering_checks(&r);
        assert_eq!(c.iter().map(|c| c.passed).collect::<Vec<_>>(), [true, true, false, true]);
        let tied = results(&[(Full, 0.5, 0.9), (SaNoAdapt, 0.5, 0.4)]);
        let c = ordering_checks(&tied);
        assert!(!c[0].passed, "adaptation check is strict");
        assert!(!c[1].passed, "missing variant fails");
        assert!(!c[3].passed);
    }

    #[test]
    fn table_has_every_variant_and_marks_the_reference() {
        use AblationVariant::*;
        let r = results(&[(Full, 0.6, 0.9), (SaNoAdapt, 0.5, 0.9), (NoConcat, 0.6, 0.9), (NoSa, 0.7, 0.9)]);
        let t = comparison_table(&r).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.iter().filter(|r| r.reference).map(|r| r.variant.as_str()).collect::<Vec<_>>(), ["full"]);
        assert!(t.iter().all(|r| r.hd_mean == Some(1.0)));
    }
}
