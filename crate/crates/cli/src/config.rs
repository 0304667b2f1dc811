//! Experiment files.
//!
//! Precedence, highest first: command-line flags, the config file, then
//! built-in defaults. The output directory falls back to
//! `$CANVI_OUTPUT_ROOT/<command>` and then `canvi-out/<command>`.

use std::path::{Path, PathBuf};

use canvi_core::models::FaviSettings;
use canvi_core::pipeline::{CandidateSpec, CanviConfig, ConformalConfig, TaskConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUTPUT_ROOT_VAR: &str = "CANVI_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Also write the calibration, test and recalibration sets.
    #[serde(default)]
    pub save_datasets: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskConfig,
    #[serde(default)]
    pub candidates: Vec<CandidateSpec>,
    #[serde(default)]
    pub conformal: ConformalConfig,
    #[serde(default)]
    pub train: FaviSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fixes the output directory so the echo records where results went.
    pub fn resolve_output(&mut self, command: &str) {
        if self.output.dir.is_none() {
            let root = std::env::var_os(OUTPUT_ROOT_VAR)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("canvi-out"));
            self.output.dir = Some(root.join(command));
        }
    }

    pub fn output_dir(&self) -> &Path {
        self.output.dir.as_deref().expect("output directory resolved")
    }

    pub fn pipeline(&self) -> CanviConfig {
        CanviConfig {
            seed: self.seed,
            task: self.task.clone(),
            candidates: self.candidates.clone(),
            conformal: self.conformal.clone(),
            train: self.train.clone(),
        }
    }

    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[task]
name = "gaussian"

[[candidates]]
family = "linear_gaussian"
phi = 0.3
"#;

    #[test]
    fn defaults_are_filled_and_echoed() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.output.dir = Some("out".into());
        assert_eq!(cfg.conformal.alpha, 0.05);
        assert_eq!(cfg.train.steps, 5000);
        let echo = cfg.echo();
        for key in ["n_calibration", "hdr_draws", "checkpoint_every", "rho", "scale", "construction_seed", "alpha_grid"] {
            assert!(echo.contains(key), "{key} missing from\n{echo}");
        }
        assert_eq!(ExperimentConfig::parse(&echo).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("[task]", "[task]\nrhoo = 0.1");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = format!("{MINIMAL}\n[output]\nfolder = \"x\"\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }
}
