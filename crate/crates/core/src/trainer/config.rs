//! Experiment configuration: a TOML file with strict key checking plus
//! `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sgd::SgdConfig;
use crate::distill::{FeatureDistance, FeatureTransform, FeatureTransformSpec, KbmInit, LossWeights};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vanilla,
    Kd,
    Dml,
    Sokd,
    SokdFeature,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Kd => "kd",
            Mode::Dml => "dml",
            Mode::Sokd => "sokd",
            Mode::SokdFeature => "sokd_feature",
        }
    }

    pub fn needs_teacher_checkpoint(self) -> bool {
        matches!(self, Mode::Kd | Mode::Sokd | Mode::SokdFeature)
    }

    pub fn is_sokd(self) -> bool {
        matches!(self, Mode::Sokd | Mode::SokdFeature)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Blobs,
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Images (idx) or table (csv).
    pub path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub test_labels_path: Option<PathBuf>,
    pub label_column: String,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f32,
    /// Held-out share when no test file is given.
    pub test_fraction: f32,
    pub normalize: bool,
    /// Reserved; augmentation is not implemented.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Blobs,
            path: None,
            labels_path: None,
            test_path: None,
            test_labels_path: None,
            label_column: "label".into(),
            seed: None,
            classes: 4,
            dim: 8,
            per_class: 313,
            spread: 1.0,
            test_fraction: 0.2,
            normalize: true,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: Vec<String>,
    pub checkpoint: Option<PathBuf>,
}

/// Which KBM loss terms are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationMask {
    pub ce_kbm: bool,
    pub kl_kbm_t: bool,
    pub kl_kbm_s: bool,
}

impl Default for AblationMask {
    fn default() -> Self {
        AblationMask {
            ce_kbm: true,
            kl_kbm_t: true,
            kl_kbm_s: true,
        }
    }
}

impl AblationMask {
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.ce_kbm, "ce_kbm"), (self.kl_kbm_t, "kl_kbm_t"), (self.kl_kbm_s, "kl_kbm_s")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, w: &LossWeights) -> LossWeights {
        let keep = |on: bool, v: f32| if on { v } else { 0.0 };
        LossWeights {
            alpha1: keep(self.ce_kbm, w.alpha1),
            alpha2: keep(self.kl_kbm_t, w.alpha2),
            alpha3: keep(self.kl_kbm_s, w.alpha3),
            ..w.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub student: SgdConfig,
    /// KBM in semi-online modes, peer in DML, the teacher when pretraining.
    pub partner: SgdConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub transform: FeatureTransform,
    pub distance: FeatureDistance,
    pub kbm_tap: Option<String>,
    pub student_tap: Option<String>,
}

impl FeatureConfig {
    pub fn spec(&self) -> FeatureTransformSpec {
        FeatureTransformSpec {
            kind: self.transform,
            distance: self.distance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Imitation metrics every `every` epochs (the last epoch always); 0
    /// disables them.
    pub every: usize,
    pub teacher_tap: Option<String>,
    pub student_tap: Option<String>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            every: 1,
            teacher_tap: None,
            student_tap: None,
        }
    }
}

/// Axes swept by the `ablate` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationAxes {
    pub masks: Vec<AblationMask>,
    pub split_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub drop_last: bool,
    #[serde(default)]
    pub sequential_updates: bool,
    /// Teacher blocks kept frozen in semi-online modes; `L - 2` (at least 1)
    /// when absent.
    #[serde(default)]
    pub split_index: Option<usize>,
    #[serde(default)]
    pub kbm_init: KbmInit,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub teacher: NetworkConfig,
    pub student: NetworkConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub ablation: AblationMask,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub sweep: AblationAxes,
}

fn default_epochs() -> usize {
    30
}

fn default_batch_size() -> usize {
    64
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key.path=value` inside a TOML table; the value is read as TOML
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(path, "empty key in override path"));
    }
    let mut node = table;
    for (i, key) in keys[..keys.len() - 1].iter().enumerate() {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(keys[..=i].join("."), "is not a table"))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides and validates. Errors name the
    /// offending key path.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg = Self::parse(text, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// As [`Self::from_toml_str`] without the semantic checks.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            // unknown keys are reported against their parent; name the key itself
            let field = match msg.split('`').nth(1) {
                Some(key) if msg.starts_with("unknown field") && !path.ends_with(key) => {
                    if path == "." {
                        key.to_string()
                    } else {
                        format!("{path}.{key}")
                    }
                }
                _ => path,
            };
            Error::config(field, msg)
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let cfg = Self::load_unvalidated(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a file, resolving relative paths against its
    /// directory, but leaves validation to the caller.
    pub fn load_unvalidated(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Makes relative file paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.data.path);
        fix(&mut self.data.labels_path);
        fix(&mut self.data.test_path);
        fix(&mut self.data.test_labels_path);
        fix(&mut self.teacher.checkpoint);
        fix(&mut self.student.checkpoint);
    }

    /// Checks that do not need the dataset or checkpoints.
    pub fn validate(&self) -> Result<()> {
        self.validate_with(true)
    }

    /// As [`Self::validate`]; `need_checkpoint = false` accepts a teacher
    /// supplied in memory instead of by path.
    pub fn validate_with(&self, need_checkpoint: bool) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.student.layers.is_empty() {
            return Err(Error::config("student.layers", "no layers given"));
        }
        let has_ckpt = self.teacher.checkpoint.as_ref().is_some_and(|p| !p.as_os_str().is_empty());
        if need_checkpoint && self.mode.needs_teacher_checkpoint() && !has_ckpt {
            return Err(Error::config(
                "teacher.checkpoint",
                format!("mode `{}` needs a pretrained teacher", self.mode.name()),
            ));
        }
        if self.mode == Mode::Dml && self.teacher.layers.is_empty() {
            return Err(Error::config("teacher.layers", "dml needs a peer architecture"));
        }
        if self.split_index == Some(0) {
            return Err(Error::config("split_index", "must be at least 1"));
        }
        self.loss.validate().map_err(|e| Error::config("loss", e.to_string()))?;
        self.optim.student.validate().map_err(|e| Error::config("optim.student", e.to_string()))?;
        self.optim.partner.validate().map_err(|e| Error::config("optim.partner", e.to_string()))?;
        let d = &self.data;
        if d.augment {
            return Err(Error::config("data.augment", "augmentation is not supported"));
        }
        match d.kind {
            DataKind::Blobs => {
                if d.classes < 2 || d.dim < 2 || d.per_class < 2 || !d.spread.is_finite() || d.spread < 0.0 {
                    return Err(Error::config(
                        "data",
                        "blobs need classes >= 2, dim >= 2, per_class >= 2 and spread >= 0",
                    ));
                }
            }
            DataKind::Idx | DataKind::Csv => {
                let path = d.path.as_ref().ok_or_else(|| Error::config("data.path", "dataset path is required"))?;
                if path.as_os_str().is_empty() {
                    return Err(Error::config("data.path", "dataset path is empty"));
                }
                if d.kind == DataKind::Idx && d.labels_path.is_none() {
                    return Err(Error::config("data.labels_path", "idx data needs a label file"));
                }
                if d.test_path.is_none() && !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
                    return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
                }
            }
        }
        Ok(())
    }

    /// Vanilla run that trains the `[teacher]` architecture with the
    /// partner optimizer.
    pub fn pretrain_view(&self) -> ExperimentConfig {
        ExperimentConfig {
            mode: Mode::Vanilla,
            student: NetworkConfig {
                layers: self.teacher.layers.clone(),
                checkpoint: None,
            },
            teacher: NetworkConfig::default(),
            optim: OptimConfig {
                student: self.optim.partner.clone(),
                partner: self.optim.partner.clone(),
            },
            ..self.clone()
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Fully resolved configuration as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration always encodes")
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }
}
