//! Structured run log: one JSON object per line, append-only, flushed
//! per event so an interrupted run still leaves a parseable prefix.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::env::StopReason;
use crate::space::LayerSpec;

pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Exploration,
    Exploitation,
}

/// One event in the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunRecord {
    Header {
        version: u32,
        started_unix_s: f64,
        config: Box<RunConfig>,
    },
    /// One generated layer: its action, reward, accuracy profile, and the
    /// head-averaged final-block attention row at the acting position.
    Step {
        episode: usize,
        rollout: usize,
        step: usize,
        phase: Phase,
        layer: LayerSpec,
        arch_digest: String,
        action: [f64; 4],
        reward: f64,
        overall_accuracy: f64,
        batch_accuracies: Vec<f64>,
        attention: Vec<f64>,
        stop: Option<StopReason>,
        t_s: f64,
    },
    /// A completed candidate model.
    Model {
        episode: usize,
        rollout: usize,
        phase: Phase,
        arch_json: String,
        arch_digest: String,
        accuracy: f64,
        layers: usize,
        param_count: usize,
        t_s: f64,
    },
    Episode {
        episode: usize,
        phase: Phase,
        sigma: f64,
        mean_return: f64,
        best_accuracy: f64,
        t_s: f64,
    },
    Update {
        episode: usize,
        round: usize,
        critic_loss: f64,
        actor_loss: f64,
        t_s: f64,
    },
    Incident {
        episode: usize,
        rollout: usize,
        message: String,
        t_s: f64,
    },
}

impl RunRecord {
    pub fn t_s(&self) -> f64 {
        match self {
            RunRecord::Header { .. } => 0.0,
            RunRecord::Step { t_s, .. }
            | RunRecord::Model { t_s, .. }
            | RunRecord::Episode { t_s, .. }
            | RunRecord::Update { t_s, .. }
            | RunRecord::Incident { t_s, .. } => *t_s,
        }
    }
}

pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(LogWriter { out: BufWriter::new(File::create(path)?) })
    }

    pub fn append(&mut self, record: &RunRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(record).expect("record serialization");
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}

/// Reads a log back. A malformed final line (a write cut off mid-crash)
/// is dropped; malformed lines anywhere else are an error.
pub fn read_log(path: &Path) -> std::io::Result<Vec<RunRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
    let mut records = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => records.push(r),
            Err(e) if i == last => {
                eprintln!("run log: dropping truncated final line: {e}");
            }
            Err(e) => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("run log line {}: {e}", i + 1),
                ));
            }
        }
    }
    Ok(records)
}
