//! The `run`, `compare` and `selftest` verbs.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fedsim_core::checks::{self, Check};
use fedsim_core::engine::run_with;

use crate::config::{load_data, ExperimentConfig};
use crate::error::{Error, Result};
use crate::exec::ThreadPool;
use crate::output::{
    accuracy_at, now_rfc3339, read_rounds, rounds_to_target, tool_version, write_json, Manifest, RoundsWriter,
    Summary, MANIFEST_FILE, ROUNDS_FILE, SUMMARY_FILE,
};

/// A config file plus the command-line adjustments applied to it.
#[derive(Debug, Clone)]
pub struct ConfigSource {
    pub path: PathBuf,
    pub config: ExperimentConfig,
}

impl ConfigSource {
    pub fn load(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::load(path)?.with_overrides(overrides)?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        Ok(ConfigSource { path: path.to_path_buf(), config })
    }

    fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    /// File stem, used to label runs in comparisons.
    pub fn label(&self) -> String {
        self.path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Write { path: dir.to_path_buf(), source })
}

/// Runs one experiment and writes its outputs into `out`.
pub fn run_experiment(source: &ConfigSource, out: &Path, pool: &ThreadPool) -> Result<Summary> {
    let started_at = now_rfc3339();
    let cfg = &source.config;
    let data = load_data(cfg, source.base_dir())?;
    let run_cfg = cfg.run_config(&data);
    run_cfg.validate()?;
    create_dir(out)?;

    let mut writer = RoundsWriter::create(&out.join(ROUNDS_FILE))?;
    let outcome = run_with(&run_cfg, &data.train, &data.test, pool, &mut writer)?;
    drop(writer);

    let rows = read_rounds(&out.join(ROUNDS_FILE))?;
    let summary =
        Summary::new(cfg.algorithm.name(), cfg.rounds, &rows, &cfg.targets, &cfg.checkpoints, outcome.max_momentum_residual);
    write_json(&out.join(SUMMARY_FILE), &summary)?;

    let manifest = Manifest {
        config_hash: cfg.hash(),
        started_at,
        finished_at: now_rfc3339(),
        tool_version: tool_version(),
        output_paths: [ROUNDS_FILE, SUMMARY_FILE, MANIFEST_FILE].map(String::from).to_vec(),
        config: serde_json::to_value(cfg).expect("config serializes to JSON"),
        labels: data.labels.as_ref(),
        normalization: data.normalization.as_ref(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(summary)
}

/// Runs every config and writes `comparison.csv` plus one
/// `curve-<label>.csv` per run. Each run's own outputs go to
/// `runs/<label>/`.
pub fn compare(sources: &[ConfigSource], out: &Path, pool: &ThreadPool) -> Result<Vec<Summary>> {
    let first = sources.first().ok_or_else(|| Error::Config("compare needs at least one --config".into()))?;
    let key = first.config.comparison_key();
    for s in &sources[1..] {
        if s.config.comparison_key() != key {
            return Err(Error::Config(format!(
                "{} and {} differ in seed, data, partition, clients, participation, rounds, model, targets or checkpoints",
                first.path.display(),
                s.path.display()
            )));
        }
    }
    let labels = unique_labels(sources);
    create_dir(out)?;
    let cfg = &first.config;
    let checkpoints = if cfg.checkpoints.is_empty() { vec![cfg.rounds] } else { cfg.checkpoints.clone() };

    let table_path = out.join("comparison.csv");
    let mut table = csv::Writer::from_path(&table_path).map_err(write_err(&table_path))?;
    let mut header = vec!["label".to_string(), "algorithm".to_string()];
    header.extend(checkpoints.iter().map(|c| format!("acc@{c}")));
    header.extend(cfg.targets.iter().map(|t| format!("rounds@{t}")));
    table.write_record(&header).map_err(write_err(&table_path))?;

    let mut summaries = Vec::new();
    for (source, label) in sources.iter().zip(&labels) {
        let run_dir = out.join("runs").join(label);
        let summary = run_experiment(source, &run_dir, pool)?;
        let rows = read_rounds(&run_dir.join(ROUNDS_FILE))?;

        let curve_path = out.join(format!("curve-{label}.csv"));
        let mut curve = csv::Writer::from_path(&curve_path).map_err(write_err(&curve_path))?;
        curve.write_record(["round", "ema_accuracy"]).map_err(write_err(&curve_path))?;
        for r in &rows {
            curve.write_record([r.round.to_string(), r.ema_accuracy.to_string()]).map_err(write_err(&curve_path))?;
        }
        curve.flush().map_err(|source| Error::Write { path: curve_path.clone(), source })?;

        let mut record = vec![label.clone(), source.config.algorithm.name().to_string()];
        record.extend(checkpoints.iter().map(|&c| accuracy_at(&rows, c).map_or(String::new(), |a| a.to_string())));
        record.extend(cfg.targets.iter().map(|&t| rounds_to_target(&rows, t, cfg.rounds).to_string()));
        table.write_record(&record).map_err(write_err(&table_path))?;
        summaries.push(summary);
    }
    table.flush().map_err(|source| Error::Write { path: table_path, source })?;
    Ok(summaries)
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Write { path: path.to_path_buf(), source: e.into() }
}

fn unique_labels(sources: &[ConfigSource]) -> Vec<String> {
    let mut seen = HashSet::new();
    sources
        .iter()
        .map(|s| {
            let base = s.label();
            let mut label = base.clone();
            let mut n = 2;
            while !seen.insert(label.clone()) {
                label = format!("{base}-{n}");
                n += 1;
            }
            label
        })
        .collect()
}

/// Runs the invariant suite, printing one line per check. Returns the
/// failed checks.
pub fn selftest(out: &mut impl Write) -> std::io::Result<Vec<Check>> {
    let results = checks::run_all();
    for c in &results {
        writeln!(out, "{} {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
    }
    let failed: Vec<Check> = results.into_iter().filter(|c| !c.passed).collect();
    if failed.is_empty() {
        writeln!(out, "all checks passed")?;
    } else {
        let names: Vec<&str> = failed.iter().map(|c| c.name.as_str()).collect();
        writeln!(out, "{} check(s) failed: {}", failed.len(), names.join(", "))?;
    }
    Ok(failed)
}
