//! Experiment configuration: one TOML document with a section per stage,
//! every field defaulted, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coder::CoderBackend;
use crate::contrastive::{ModelConfig, Stage1Config};
use crate::error::{Error, Result};
use crate::evalkit::probe::ProbeConfig;
use crate::feature_codec::{CodecConfig, Stage2Config};
use crate::tasks::{FinetuneConfig, TaskKind};

/// Environment variable naming the cache directory for datasets and tables.
pub const CACHE_ENV: &str = "OMNI_ICM_CACHE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub coder: CoderBackend,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub codec: CodecConfig,
    pub stage2: Stage2Config,
    pub task: TaskConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            coder: CoderBackend::Reference,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            codec: CodecConfig::default(),
            stage2: Stage2Config::default(),
            task: TaskConfig::default(),
            finetune: FinetuneConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Run directories are created here.
    pub runs: PathBuf,
    /// Overridden by the environment variable when that is set.
    pub cache: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            runs: PathBuf::from("runs"),
            cache: None,
        }
    }
}

/// Where images come from: a manifest file, or generated shapes when unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub shapes_train: usize,
    pub shapes_val: usize,
    pub shapes_size: usize,
    pub shapes_classes: usize,
    pub shapes_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_manifest: None,
            val_manifest: None,
            shapes_train: 4096,
            shapes_val: 256,
            shapes_size: 64,
            shapes_classes: 6,
            shapes_seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Zero means: derive from the data (shape classes, plus background for segmentation).
    pub classes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            kind: TaskKind::LinearProbeClassification,
            classes: 0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub lambda_coef: Option<f64>,
    pub seed: Option<u64>,
    pub coder: Option<CoderBackend>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(a) = o.alpha {
            self.stage1.alpha = a;
        }
        if let Some(c) = o.lambda_coef {
            self.stage2.lambda_coef = c;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = o.coder {
            self.coder = c;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.stage1.alpha >= 0.0) {
            return bad("stage1.alpha must be nonnegative");
        }
        if !(self.stage1.tau > 0.0) {
            return bad("stage1.tau must be positive");
        }
        if self.stage1.queue_size == 0 || self.stage1.batch == 0 {
            return bad("stage1.queue_size and stage1.batch must be positive");
        }
        if !(self.stage2.lambda_coef > 0.0) {
            return bad("stage2.lambda_coef must be positive");
        }
        if self.stage2.lambda < 0.0 || self.stage2.lambda_stages.iter().any(|l| *l < 0.0) {
            return bad("stage2 lambdas must be nonnegative");
        }
        if self.data.shapes_size == 0 || !self.data.shapes_size.is_multiple_of(crate::data::PAD_MULTIPLE) {
            return bad("data.shapes_size must be a positive multiple of 32");
        }
        if self.data.shapes_classes == 0 {
            return bad("data.shapes_classes must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Cache directory: the environment variable, then `paths.cache`.
    pub fn cache_dir(&self) -> Option<PathBuf> {
        cache_dir_from_env().or_else(|| self.paths.cache.clone())
    }

    /// Task classes, filling in the data-derived default.
    pub fn task_classes(&self) -> usize {
        match (self.task.classes, self.task.kind) {
            (0, TaskKind::LinearProbeClassification) => self.data.shapes_classes,
            (0, TaskKind::ToySegmentation) => self.data.shapes_classes + 1,
            (n, _) => n,
        }
    }

    /// Creates `runs/<unix-seconds>-<hash>/` holding the resolved config.
    pub fn create_run_dir(&self, command: &str) -> Result<PathBuf> {
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let dir = self.paths.runs.join(format!("{secs}-{}-{command}", self.hash()));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }
}

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_hyperparameters() {
        let c = ExperimentConfig::default();
        assert_eq!(c.stage1.alpha, 0.1);
        assert_eq!(c.stage1.tau, 0.2);
        assert_eq!(c.stage1.momentum, 0.999);
        assert_eq!(c.stage2.lambda, 2048.0);
        assert_eq!(c.stage2.lambda_stages, [512.0, 256.0, 125.0]);
        assert_eq!(c.coder, CoderBackend::Reference);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = ExperimentConfig::from_toml("seed = 5\ncoder = \"accelerated\"\n[stage1]\nalpha = 0.0\n").unwrap();
        assert_eq!(p.seed, 5);
        assert_eq!(p.coder, CoderBackend::Accelerated);
        assert_eq!(p.stage1.alpha, 0.0);
        assert_eq!(p.stage1.tau, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sede = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[stage2]\nlamda = 1"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("coder = \"fast\""), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_and_change_the_hash() {
        let mut c = ExperimentConfig::default();
        let h = c.hash();
        c.apply(&Overrides {
            alpha: Some(0.0),
            lambda_coef: Some(4.0),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(c.stage1.alpha, 0.0);
        assert_eq!(c.stage2.lambda_coef, 4.0);
        assert_ne!(c.hash(), h);
        assert!(c
            .apply(&Overrides {
                lambda_coef: Some(-1.0),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn run_dir_holds_resolved_config() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::default();
        c.paths.runs = tmp.path().to_path_buf();
        let dir = c.create_run_dir("eval").unwrap();
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.contains(&c.hash()));
        let back = ExperimentConfig::load(Some(&dir.join("config.toml"))).unwrap();
        assert_eq!(back, c);
    }
}
