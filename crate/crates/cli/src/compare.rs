//! `feddle compare`: merge completed runs into one table of final accuracy
//! per method per (heterogeneity, delay) setting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use feddle_core::analysis::{self, MetricsLine};
use toml::Value;

use crate::errors::{CliError, CliResult};
use crate::io::{read_to_string, write_atomic};
use crate::manifest::RunManifest;
use crate::run::mean_and_std;

/// Config keys allowed to differ between compared runs: the method itself,
/// the seed, and the two axes of the comparison table.
const EXEMPT_KEYS: &[&str] = &[
    "run.aggregator",
    "run.master_seed",
    "partition.alpha",
    "delay.sigma",
    "server_data.kind",
];

struct LoadedRun {
    dir: PathBuf,
    manifest: RunManifest,
    finals: Vec<f64>,
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, String>) {
    match value {
        Value::Table(table) => {
            for (key, inner) in table {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                flatten(&path, inner, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn comparable_settings(run: &LoadedRun) -> CliResult<BTreeMap<String, String>> {
    let table = toml::Table::try_from(&run.manifest.config)
        .map_err(|e| CliError::Parse(format!("cannot resolve config: {e}")))?;
    let mut flat = BTreeMap::new();
    flatten("", &Value::Table(table), &mut flat);
    for key in EXEMPT_KEYS {
        flat.remove(*key);
    }
    Ok(flat)
}

fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    let manifest: RunManifest =
        serde_json::from_str(&read_to_string(&dir.join("manifest.json"))?)
            .map_err(|e| CliError::Parse(format!("{}: bad manifest: {e}", dir.display())))?;
    let mut finals = Vec::new();
    for &seed in &manifest.seeds {
        let metrics_path = dir.join(format!("seed_{seed}")).join("metrics.jsonl");
        let lines = analysis::metrics_from_jsonl(&read_to_string(&metrics_path)?)
            .map_err(|e| CliError::Parse(format!("{}: {e}", metrics_path.display())))?;
        let final_metric = lines
            .iter()
            .find_map(|line| match line {
                MetricsLine::Summary(s) => s.final_metric,
                MetricsLine::Round(_) => None,
            })
            .ok_or_else(|| {
                CliError::Invariant(format!(
                    "{}: run has no final metric",
                    metrics_path.display()
                ))
            })?;
        finals.push(final_metric);
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        finals,
    })
}

pub fn cmd_compare(dirs: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    if dirs.len() < 2 {
        return Err(CliError::Usage(
            "compare needs at least two run directories".into(),
        ));
    }
    let runs: Vec<LoadedRun> = dirs.iter().map(|d| load_run(d)).collect::<CliResult<_>>()?;

    // Everything outside the comparison axes must agree across runs.
    let reference = comparable_settings(&runs[0])?;
    for run in &runs[1..] {
        let settings = comparable_settings(run)?;
        let mut mismatched: Vec<String> = Vec::new();
        for (key, value) in &reference {
            if settings.get(key) != Some(value) {
                mismatched.push(key.clone());
            }
        }
        for key in settings.keys() {
            if !reference.contains_key(key) {
                mismatched.push(key.clone());
            }
        }
        if !mismatched.is_empty() {
            mismatched.sort();
            mismatched.dedup();
            return Err(CliError::Invariant(format!(
                "{} and {} differ on: {}",
                runs[0].dir.display(),
                run.dir.display(),
                mismatched.join(", ")
            )));
        }
    }

    // Pool seeds per (method, alpha, sigma) cell.
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut settings: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for run in &runs {
        let method = run.manifest.config.run.aggregator.name().to_string();
        let setting = format!(
            "Dir({}), sigma {}",
            run.manifest.config.partition.alpha, run.manifest.config.delay.sigma
        );
        if !settings.contains(&setting) {
            settings.push(setting.clone());
        }
        if !methods.contains(&method) {
            methods.push(method.clone());
        }
        cells
            .entry((method, setting))
            .or_default()
            .extend_from_slice(&run.finals);
    }
    settings.sort();

    let mut table = String::new();
    table.push_str(&format!("{:<12}", "method"));
    for setting in &settings {
        table.push_str(&format!(" | {setting:>22}"));
    }
    table.push('\n');
    let mut csv = String::from("method,alpha,sigma,mean,std,n\n");
    for method in &methods {
        table.push_str(&format!("{method:<12}"));
        for setting in &settings {
            match cells.get(&(method.clone(), setting.clone())) {
                Some(values) => {
                    let (mean, std) = mean_and_std(values);
                    table.push_str(&format!(
                        " | {:>22}",
                        format!("{mean:.4} +/- {std:.4} ({})", values.len())
                    ));
                    let (alpha, sigma) = setting
                        .trim_start_matches("Dir(")
                        .split_once("), sigma ")
                        .map(|(a, s)| (a.to_string(), s.to_string()))
                        .expect("setting format");
                    csv.push_str(&format!(
                        "{method},{alpha},{sigma},{mean},{std},{}\n",
                        values.len()
                    ));
                }
                None => table.push_str(&format!(" | {:>22}", "-")),
            }
        }
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = out {
        write_atomic(path, csv.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
