//! `feddle run`: execute one experiment per seed and write metrics, atlas
//! snapshots, a manifest, and a summary.

use std::path::Path;

use feddle_core::analysis::{metrics_to_jsonl, MetricsLine};
use feddle_core::{run_experiment, CoreError, ExperimentConfig};
use serde::{Deserialize, Serialize};

use crate::config::load_config;
use crate::errors::{CliError, CliResult};
use crate::io::write_atomic;
use crate::manifest::{config_hash, RunManifest};

/// Aggregate of one output directory (one config, several seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDirSummary {
    pub aggregator: String,
    pub alpha: f64,
    pub sigma: f64,
    pub seeds: Vec<u64>,
    pub final_metrics: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn map_core(err: CoreError) -> CliError {
    match err {
        CoreError::InvalidConfig(msg) => CliError::Invariant(msg),
        other => CliError::Runtime(other.to_string()),
    }
}

pub fn parse_seed_list(text: &str) -> CliResult<Vec<u64>> {
    let seeds: Result<Vec<u64>, _> = text
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect();
    let seeds = seeds.map_err(|e| CliError::Usage(format!("bad seed list {text:?}: {e}")))?;
    if seeds.is_empty() {
        return Err(CliError::Usage("seed list is empty".into()));
    }
    Ok(seeds)
}

pub fn cmd_run(
    config_path: &Path,
    overrides: &[String],
    seeds: Option<&str>,
    out_dir: &Path,
    workers: usize,
) -> CliResult<()> {
    let config = load_config(config_path, overrides)?;
    let seeds = match seeds {
        Some(text) => parse_seed_list(text)?,
        None => vec![config.run.master_seed],
    };

    let manifest = RunManifest {
        config_path: config_path.display().to_string(),
        config_hash: config_hash(&config)?,
        config: config.clone(),
        output_dir: out_dir.display().to_string(),
        seeds: seeds.clone(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Io(format!("cannot serialize manifest: {e}")))?;
    write_atomic(&out_dir.join("manifest.json"), manifest_json.as_bytes())?;

    let mut final_metrics = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut seeded: ExperimentConfig = config.clone();
        seeded.run.master_seed = seed;
        let output = run_experiment(&seeded, workers).map_err(map_core)?;

        let seed_dir = out_dir.join(format!("seed_{seed}"));
        write_atomic(
            &seed_dir.join("metrics.jsonl"),
            metrics_to_jsonl(&output.metrics).as_bytes(),
        )?;
        if let Some(snapshot) = &output.atlas_snapshot {
            let mut atlas_jsonl = String::new();
            for record in snapshot {
                atlas_jsonl.push_str(
                    &serde_json::to_string(record)
                        .map_err(|e| CliError::Io(format!("cannot serialize atlas: {e}")))?,
                );
                atlas_jsonl.push('\n');
            }
            write_atomic(&seed_dir.join("atlas.jsonl"), atlas_jsonl.as_bytes())?;
        }

        let final_metric = output
            .metrics
            .iter()
            .find_map(|line| match line {
                MetricsLine::Summary(s) => s.final_metric,
                MetricsLine::Round(_) => None,
            })
            .ok_or_else(|| CliError::Runtime("run produced no evaluations".into()))?;
        println!(
            "{} seed {seed}: final accuracy {final_metric:.4}",
            seeded.run.aggregator.name()
        );
        final_metrics.push(final_metric);
    }

    let (mean, std) = mean_and_std(&final_metrics);
    let summary = RunDirSummary {
        aggregator: config.run.aggregator.name().to_string(),
        alpha: config.partition.alpha,
        sigma: config.delay.sigma,
        seeds,
        final_metrics,
        mean,
        std,
    };
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::Io(format!("cannot serialize summary: {e}")))?;
    write_atomic(&out_dir.join("summary.json"), summary_json.as_bytes())?;
    println!(
        "{}: mean {mean:.4} +/- {std:.4} over {} seed(s)",
        summary.aggregator,
        summary.final_metrics.len()
    );
    Ok(())
}
