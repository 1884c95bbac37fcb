use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ifr_core::blocks::{HeadConfig, Strategy};
use ifr_core::data::DatasetSpec;
use ifr_core::gradcheck::GradCheckOptions;
use ifr_core::solver::SolverConfig;
use ifr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Default toy head width; matches the default dataset channels.
const TOY_CHANNELS: usize = 8;

fn default_head() -> HeadConfig {
    HeadConfig::toy(Strategy::ImplicitBroyden, 15)
}

fn default_data() -> DatasetSpec {
    DatasetSpec::new(1, 500)
}

/// One experiment: head, solver, schedule and data, read from strict JSON.
///
/// Inside `head`, `channels` defaults to `data.channels` and
/// `predictor_classes` to 1, so a toy head needs only its strategy and depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_head")]
    pub head: HeadConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_data")]
    pub data: DatasetSpec,
    /// A dataset container to train on instead of generating one from `data`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub grad_check: GradCheckOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            head: default_head(),
            solver: SolverConfig::default(),
            train: TrainConfig::default(),
            data: default_data(),
            dataset: None,
            output_dir: None,
            grad_check: GradCheckOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let root = value
            .as_object_mut()
            .ok_or_else(|| CliError::config("config must be a JSON object"))?;
        let channels = root
            .get("data")
            .and_then(|d| d.get("channels"))
            .and_then(Value::as_u64)
            .unwrap_or(TOY_CHANNELS as u64);
        if let Some(Value::Object(head)) = root.get_mut("head") {
            head.entry("channels").or_insert(channels.into());
            head.entry("predictor_classes").or_insert(1.into());
        }
        let cfg: Self = serde_json::from_value(value).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.head.predictor_classes != 1 {
            return Err(CliError::config(format!(
                "the synthetic task has one mask class, head.predictor_classes is {}",
                self.head.predictor_classes
            ))
            .into());
        }
        if self.dataset.is_none() && self.head.channels != self.data.channels {
            return Err(CliError::config(format!(
                "head.channels {} does not match data.channels {}",
                self.head.channels, self.data.channels
            ))
            .into());
        }
        Ok(())
    }
}

/// Where relative paths land.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub output_dir: PathBuf,
}

impl Workspace {
    /// `--output-dir` wins over the config's `output_dir`; the working
    /// directory is the fallback.
    pub fn new(flag: Option<&Path>, config: Option<&ExperimentConfig>) -> Self {
        let output_dir = flag
            .map(Path::to_path_buf)
            .or_else(|| config.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("."));
        Self { output_dir }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.output_dir.join(path)
        }
    }

    /// Creates the output directory if needed.
    pub fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating output directory {}", self.output_dir.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{exit_code, EXIT_CONFIG};

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn head_width_follows_data() {
        let cfg = ExperimentConfig::from_json(
            r#"{"head": {"strategy": "unrolled-shared", "depth_or_budget": 4},
                "data": {"seed": 3, "count": 40, "channels": 4}}"#,
        )
        .unwrap();
        assert_eq!(cfg.head.channels, 4);
        assert_eq!(cfg.head.predictor_classes, 1);
        assert_eq!(cfg.head.strategy, Strategy::UnrolledShared);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for text in [
            r#"{"heads": {}}"#,
            r#"{"train": {"lr": 0.1}}"#,
            r#"{"head": {"strategy": "implicit", "depth_or_budget": 15, "depth": 2}}"#,
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_CONFIG, "{text}: {err:#}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"data": {"seed": 0, "count": 0}}"#,
            r#"{"head": {"strategy": "implicit", "depth_or_budget": 15, "channels": 16}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            "[1, 2]",
            "{",
        ] {
            let err = ExperimentConfig::from_json(text).unwrap_err();
            assert_eq!(exit_code(&err), EXIT_CONFIG, "{text}: {err:#}");
        }
    }

    #[test]
    fn relative_paths_land_in_the_output_dir() {
        let cfg = ExperimentConfig {
            output_dir: Some("runs".into()),
            ..Default::default()
        };
        let ws = Workspace::new(None, Some(&cfg));
        assert_eq!(ws.resolve(Path::new("a.csv")), PathBuf::from("runs/a.csv"));
        assert_eq!(ws.resolve(Path::new("/tmp/a.csv")), PathBuf::from("/tmp/a.csv"));
        let ws = Workspace::new(Some(Path::new("flag")), Some(&cfg));
        assert_eq!(ws.resolve(Path::new("a.csv")), PathBuf::from("flag/a.csv"));
    }
}
