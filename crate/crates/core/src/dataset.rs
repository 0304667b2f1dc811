//! Joint `(theta, x)` datasets and their CSV form.
//!
//! The CSV layout is one metadata comment line, a column header, then one row
//! per sample holding `theta ‖ x`. Values use Rust's shortest round-trip
//! formatting, so reading a file back reproduces every `f64` bit for bit.

use std::fmt::{self, Write as _};
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CanviError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSample {
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    Calibration,
    Test,
    Recalibration,
    Probe,
}

impl DatasetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRole::Train => "train",
            DatasetRole::Calibration => "calibration",
            DatasetRole::Test => "test",
            DatasetRole::Recalibration => "recalibration",
            DatasetRole::Probe => "probe",
        }
    }
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetRole {
    type Err = CanviError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DatasetRole::Train),
            "calibration" => Ok(DatasetRole::Calibration),
            "test" => Ok(DatasetRole::Test),
            "recalibration" => Ok(DatasetRole::Recalibration),
            "probe" => Ok(DatasetRole::Probe),
            other => Err(CanviError::Parse(format!("unknown dataset role '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointDataset {
    task: String,
    role: DatasetRole,
    seed: u64,
    stream_id: u64,
    theta_dim: usize,
    x_dim: usize,
    samples: Vec<JointSample>,
}

impl JointDataset {
    pub fn new(
        task: impl Into<String>,
        role: DatasetRole,
        seed: u64,
        stream_id: u64,
        theta_dim: usize,
        x_dim: usize,
        samples: Vec<JointSample>,
    ) -> Result<Self> {
        if let Some(bad) = samples
            .iter()
            .position(|s| s.theta.len() != theta_dim || s.x.len() != x_dim)
        {
            return Err(CanviError::argument(format!(
                "sample {bad} does not have dims ({theta_dim}, {x_dim})"
            )));
        }
        Ok(Self {
            task: task.into(),
            role,
            seed,
            stream_id,
            theta_dim,
            x_dim,
            samples,
        })
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_dim
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn samples(&self) -> &[JointSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Consecutive sub-datasets of `size` samples (the last may be shorter).
    pub fn batches(&self, size: usize) -> impl Iterator<Item = &[JointSample]> {
        self.samples.chunks(size.max(1))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# task={} seed={} stream_id={} role={} theta_dim={} x_dim={}",
            self.task, self.seed, self.stream_id, self.role, self.theta_dim, self.x_dim
        )
        .unwrap();
        let header: Vec<String> = (0..self.theta_dim)
            .map(|i| format!("theta_{i}"))
            .chain((0..self.x_dim).map(|i| format!("x_{i}")))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for s in &self.samples {
            let mut first = true;
            for v in s.theta.iter().chain(&s.x) {
                if !first {
                    out.push(',');
                }
                first = false;
                write!(out, "{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let meta = lines
            .next()
            .ok_or_else(|| CanviError::Parse("empty dataset file".into()))??;
        let meta = meta
            .strip_prefix("# ")
            .ok_or_else(|| CanviError::Parse("missing metadata line".into()))?;
        let mut task = None;
        let mut role = None;
        let mut seed = None;
        let mut stream_id = None;
        let mut theta_dim = None;
        let mut x_dim = None;
        for field in meta.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| CanviError::Parse(format!("bad metadata field '{field}'")))?;
            let int = |v: &str| {
                v.parse::<u64>()
                    .map_err(|e| CanviError::Parse(format!("{k}: {e}")))
            };
            match k {
                "task" => task = Some(v.to_string()),
                "role" => role = Some(v.parse::<DatasetRole>()?),
                "seed" => seed = Some(int(v)?),
                "stream_id" => stream_id = Some(int(v)?),
                "theta_dim" => theta_dim = Some(int(v)? as usize),
                "x_dim" => x_dim = Some(int(v)? as usize),
                _ => return Err(CanviError::Parse(format!("unknown metadata key '{k}'"))),
            }
        }
        let missing = |name: &str| CanviError::Parse(format!("metadata lacks {name}"));
        let theta_dim = theta_dim.ok_or_else(|| missing("theta_dim"))?;
        let x_dim = x_dim.ok_or_else(|| missing("x_dim"))?;
        lines
            .next()
            .ok_or_else(|| CanviError::Parse("missing column header".into()))??;

        let mut samples = Vec::new();
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let values: Vec<f64> = line
                .split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| CanviError::Parse(format!("row {row}: '{v}': {e}")))
                })
                .collect::<Result<_>>()?;
            if values.len() != theta_dim + x_dim {
                return Err(CanviError::Parse(format!(
                    "row {row} has {} values, expected {}",
                    values.len(),
                    theta_dim + x_dim
                )));
            }
            let (theta, x) = values.split_at(theta_dim);
            samples.push(JointSample {
                theta: theta.to_vec(),
                x: x.to_vec(),
            });
        }
        JointDataset::new(
            task.ok_or_else(|| missing("task"))?,
            role.ok_or_else(|| missing("role"))?,
            seed.ok_or_else(|| missing("seed"))?,
            stream_id.ok_or_else(|| missing("stream_id"))?,
            theta_dim,
            x_dim,
            samples,
        )
    }

    /// Hex SHA-256 of the canonical CSV encoding.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_csv_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
