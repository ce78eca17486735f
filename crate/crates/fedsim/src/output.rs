//! Run outputs: `rounds.csv`, `summary.json` and `manifest.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedsim_core::{RoundObserver, RoundRecord, RoundsToTarget};
use serde::{Deserialize, Serialize};

use crate::csv_data::{LabelMap, Normalization};
use crate::error::{Error, Result};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// One line of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub ema_accuracy: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

impl From<&RoundRecord> for RoundRow {
    fn from(r: &RoundRecord) -> Self {
        RoundRow {
            round: r.round,
            train_loss: r.train_loss,
            test_accuracy: r.test_accuracy,
            ema_accuracy: r.ema_accuracy,
            bytes_down: r.bytes_down,
            bytes_up: r.bytes_up,
        }
    }
}

/// Streams records to `rounds.csv`, flushing after every row so that an
/// aborted run leaves the rounds it finished on disk.
pub struct RoundsWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
    started: Instant,
}

impl RoundsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|source| Error::Write { path: path.to_path_buf(), source })?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer
            .write_record(["round", "train_loss", "test_accuracy", "ema_accuracy", "bytes_down", "bytes_up"])
            .and_then(|_| writer.flush().map_err(Into::into))
            .map_err(|e| Error::Write { path: path.to_path_buf(), source: e.into() })?;
        Ok(RoundsWriter { path: path.to_path_buf(), writer, started: Instant::now() })
    }
}

impl RoundObserver for RoundsWriter {
    fn elapsed_ms(&mut self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn on_round(&mut self, record: &RoundRecord) -> fedsim_core::Result<()> {
        let row = RoundRow::from(record);
        let r = self.writer.serialize(&row).map_err(std::io::Error::from).and_then(|_| self.writer.flush());
        r.map_err(|e| fedsim_core::Error::Observer(format!("{}: {e}", self.path.display())))
    }
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Read { path: path.to_path_buf(), source: e.into() })?;
    reader
        .deserialize()
        .collect::<Result<Vec<RoundRow>, _>>()
        .map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })
}

/// Round at which the smoothed accuracy first reaches `target`, searching
/// the evaluated rounds of a run of `rounds` rounds.
pub fn rounds_to_target(rows: &[RoundRow], target: f64, rounds: usize) -> RoundsToTarget {
    rows.iter()
        .find(|r| r.round <= rounds && r.ema_accuracy >= target)
        .map_or(RoundsToTarget::Saturated(rounds), |r| RoundsToTarget::Reached(r.round))
}

/// Smoothed accuracy at the last evaluated round not after `round`.
pub fn accuracy_at(rows: &[RoundRow], round: usize) -> Option<f64> {
    rows.iter().take_while(|r| r.round <= round).last().map(|r| r.ema_accuracy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: f64,
    pub reached: bool,
    /// Round reached, or the round budget when not reached.
    pub rounds: usize,
    /// `"37"`, or `"100+"` when not reached within 100 rounds.
    pub display: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: usize,
    pub ema_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: String,
    pub rounds: usize,
    pub evaluated_rounds: usize,
    pub final_train_loss: f64,
    pub final_test_accuracy: f64,
    pub final_ema_accuracy: f64,
    pub total_bytes_down: u64,
    pub total_bytes_up: u64,
    pub rounds_to_target: Vec<TargetResult>,
    pub checkpoints: Vec<Checkpoint>,
    /// Largest relative momentum-identity residual (FedAGM only).
    pub max_momentum_residual: Option<f64>,
}

impl Summary {
    pub fn new(
        algorithm: &str,
        rounds: usize,
        rows: &[RoundRow],
        targets: &[f64],
        checkpoints: &[usize],
        max_momentum_residual: Option<f64>,
    ) -> Summary {
        let last = rows.last();
        Summary {
            algorithm: algorithm.to_string(),
            rounds,
            evaluated_rounds: rows.len(),
            final_train_loss: last.map_or(f64::NAN, |r| r.train_loss),
            final_test_accuracy: last.map_or(f64::NAN, |r| r.test_accuracy),
            final_ema_accuracy: last.map_or(f64::NAN, |r| r.ema_accuracy),
            total_bytes_down: rows.iter().map(|r| r.bytes_down).sum(),
            total_bytes_up: rows.iter().map(|r| r.bytes_up).sum(),
            rounds_to_target: targets
                .iter()
                .map(|&target| {
                    let r = rounds_to_target(rows, target, rounds);
                    TargetResult {
                        target,
                        reached: r.reached().is_some(),
                        rounds: r.rounds_or_limit(),
                        display: r.to_string(),
                    }
                })
                .collect(),
            checkpoints: checkpoints.iter().map(|&round| Checkpoint { round, ema_accuracy: accuracy_at(rows, round) }).collect(),
            max_momentum_residual,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub tool_version: String,
    /// File names relative to the output directory.
    pub output_paths: Vec<String>,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<&'a LabelMap>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<&'a Normalization>,
}

pub fn tool_version() -> String {
    format!("fedsim {}", env!("CARGO_PKG_VERSION"))
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()
    };
    write().map_err(|source| Error::Write { path: path.to_path_buf(), source })
}
