//! `feddle diag`: re-derive analysis summaries from stored metrics.

use std::path::Path;

use feddle_core::analysis::{self, MetricsLine, MetricsRecord};

use crate::errors::{CliError, CliResult};
use crate::io::read_to_string;
use crate::manifest::RunManifest;

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

pub fn cmd_diag(dir: &Path) -> CliResult<()> {
    let manifest: RunManifest =
        serde_json::from_str(&read_to_string(&dir.join("manifest.json"))?)
            .map_err(|e| CliError::Parse(format!("{}: bad manifest: {e}", dir.display())))?;
    println!(
        "run {} ({}), alpha {}, sigma {}",
        dir.display(),
        manifest.config.run.aggregator.name(),
        manifest.config.partition.alpha,
        manifest.config.delay.sigma
    );

    for &seed in &manifest.seeds {
        let metrics_path = dir.join(format!("seed_{seed}")).join("metrics.jsonl");
        let lines = analysis::metrics_from_jsonl(&read_to_string(&metrics_path)?)
            .map_err(|e| CliError::Parse(format!("{}: {e}", metrics_path.display())))?;
        let rounds: Vec<&MetricsRecord> = lines
            .iter()
            .filter_map(|line| match line {
                MetricsLine::Round(r) => Some(r),
                MetricsLine::Summary(_) => None,
            })
            .collect();

        let recomputed = analysis::final_metric(&analysis::accuracy_series(&lines))
            .map_err(|e| CliError::Invariant(e.to_string()))?;
        let stored = lines.iter().find_map(|line| match line {
            MetricsLine::Summary(s) => s.final_metric,
            MetricsLine::Round(_) => None,
        });
        let agreement = match stored {
            Some(s) if (s - recomputed).abs() < 1e-12 => "consistent",
            Some(_) => "MISMATCH",
            None => "missing in summary",
        };

        let searches: Vec<&MetricsRecord> =
            rounds.iter().copied().filter(|r| r.search.is_some()).collect();
        let negative_rounds = searches
            .iter()
            .filter(|r| r.coefficients.is_some_and(|c| c.fraction_negative > 0.0))
            .count();
        let negative_share = if searches.is_empty() {
            None
        } else {
            Some(negative_rounds as f64 / searches.len() as f64)
        };
        let mean_id_ood = mean_of(rounds.iter().filter_map(|r| r.id_ood_cosine));
        let mean_inner = mean_of(rounds.iter().filter_map(|r| r.alignment_inner));
        let mean_min_alignment =
            mean_of(rounds.iter().filter_map(|r| r.update_alignment.map(|a| a.min)));
        let mean_lag1 = mean_of(rounds.iter().filter_map(|r| {
            r.lag_cosines
                .as_ref()
                .and_then(|ls| ls.iter().find(|l| l.lag == 1).map(|l| l.cosine))
        }));
        let max_staleness = rounds
            .iter()
            .filter_map(|r| r.staleness.map(|s| s.max))
            .max();

        println!("seed {seed}:");
        println!("  final accuracy (recomputed) {recomputed:.4} [{agreement}]");
        println!(
            "  searches {} | rounds with negative coefficients {}",
            searches.len(),
            fmt_opt(negative_share)
        );
        println!(
            "  mean id/ood cosine {} | mean alignment inner product {}",
            fmt_opt(mean_id_ood),
            fmt_opt(mean_inner)
        );
        println!(
            "  mean min update-alignment {} | mean lag-1 true-update cosine {}",
            fmt_opt(mean_min_alignment),
            fmt_opt(mean_lag1)
        );
        println!(
            "  max staleness {}",
            max_staleness.map_or_else(|| "-".to_string(), |v| v.to_string())
        );
    }
    Ok(())
}
