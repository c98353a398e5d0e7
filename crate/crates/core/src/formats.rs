//! On-disk formats: `art-sched/1` schedules, `art-theta/1` time-warp curves,
//! and CSV report helpers.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits, so files round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ArtError, Result};
use crate::schedule::{grid_from_theta, ThetaCurve, TimeGrid};

pub const SCHED_FORMAT: &str = "art-sched/1";
pub const THETA_FORMAT: &str = "art-theta/1";

/// Provenance attached to every artifact this crate writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
}

/// Hex SHA-256 of a serializable value's canonical JSON.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleFile {
    pub format: String,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "K")]
    pub steps: usize,
    pub tau: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

impl ScheduleFile {
    pub fn from_grid(grid: &TimeGrid, meta: Option<ArtifactMeta>) -> Self {
        Self {
            format: SCHED_FORMAT.into(),
            horizon: grid.horizon(),
            steps: grid.steps(),
            tau: grid.tau().to_vec(),
            meta,
        }
    }

    pub fn to_grid(&self) -> Result<TimeGrid> {
        if self.format != SCHED_FORMAT {
            return Err(ArtError::Format(format!("expected {SCHED_FORMAT}, found {}", self.format)));
        }
        if self.tau.len() != self.steps + 1 {
            return Err(ArtError::Format(format!(
                "K = {} but tau has {} entries",
                self.steps,
                self.tau.len()
            )));
        }
        TimeGrid::new(self.horizon, self.tau.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFile {
    pub format: String,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "K")]
    pub steps: usize,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
}

impl ThetaFile {
    pub fn from_curve(curve: &ThetaCurve, meta: Option<ArtifactMeta>) -> Self {
        Self {
            format: THETA_FORMAT.into(),
            horizon: curve.horizon(),
            steps: curve.steps(),
            theta: curve.theta().to_vec(),
            meta,
        }
    }

    /// The stored curve, renormalized to the time budget.
    pub fn to_curve(&self) -> Result<ThetaCurve> {
        if self.format != THETA_FORMAT {
            return Err(ArtError::Format(format!("expected {THETA_FORMAT}, found {}", self.format)));
        }
        if self.theta.len() != self.steps {
            return Err(ArtError::Format(format!(
                "K = {} but theta has {} entries",
                self.steps,
                self.theta.len()
            )));
        }
        ThetaCurve::normalized(self.horizon, self.theta.clone())
    }
}

/// Either grid-bearing file, as found on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum GridSource {
    Schedule(ScheduleFile),
    Theta(ThetaFile),
}

impl GridSource {
    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(SCHED_FORMAT) => Ok(Self::Schedule(serde_json::from_value(value)?)),
            Some(THETA_FORMAT) => Ok(Self::Theta(serde_json::from_value(value)?)),
            Some(other) => Err(ArtError::Format(format!("unknown format tag {other:?}"))),
            None => Err(ArtError::Format("missing format tag".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_grid(&self) -> Result<TimeGrid> {
        match self {
            Self::Schedule(s) => s.to_grid(),
            Self::Theta(t) => grid_from_theta(&t.to_curve()?),
        }
    }
}

/// Load a grid from either an `art-sched/1` or an `art-theta/1` file.
pub fn load_grid(path: &Path) -> Result<TimeGrid> {
    GridSource::load(path)?.to_grid()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Write a CSV with a header row, comma separators and LF line endings.
pub fn write_csv<W: Write>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_csv(fs::File::create(path)?, header, rows)
}
