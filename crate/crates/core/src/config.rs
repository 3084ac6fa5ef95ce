//! Experiment configuration: JSON file plus dotted-key overrides.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;

/// Which objective trains the student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SupervisedOnly,
    RegularKd,
    ClipTeacher,
    ClipEmbed,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::SupervisedOnly, Mode::RegularKd, Mode::ClipTeacher, Mode::ClipEmbed];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SupervisedOnly => "supervised-only",
            Mode::RegularKd => "regular-kd",
            Mode::ClipTeacher => "clip-teacher",
            Mode::ClipEmbed => "clip-embed",
        }
    }

    /// Modes that run the teacher during training.
    pub fn needs_teacher_model(self) -> bool {
        matches!(self, Mode::RegularKd | Mode::ClipTeacher)
    }

    /// Modes that train a projection from teacher to student embeddings.
    pub fn uses_projection(self) -> bool {
        matches!(self, Mode::ClipTeacher | Mode::ClipEmbed)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`, expected one of supervised-only, regular-kd, clip-teacher, clip-embed")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_val_per_class() -> usize {
    10
}
fn default_synthetic_size() -> usize {
    16
}

/// Where training and validation images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Generated class-separable images; validation uses `seed + 1`.
    Synthetic {
        num_classes: usize,
        per_class: usize,
        #[serde(default = "default_val_per_class")]
        val_per_class: usize,
        #[serde(default = "default_synthetic_size")]
        image_size: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Directory holding `train.bin` and `test.bin` in the CIFAR-100 binary layout.
    Cifar100 { dir: PathBuf },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { num_classes, .. } => *num_classes,
            DatasetSpec::Cifar100 { .. } => 100,
        }
    }
}

/// Student architecture; defaults to the base student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentSpec {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
}

impl Default for StudentSpec {
    fn default() -> Self {
        Self {
            layers: 6,
            embed_dim: 256,
            heads: 8,
            mlp_dim: 1024,
            patch_size: 4,
        }
    }
}

/// Teacher architecture and where its weights come from: a checkpoint file,
/// or a fresh initialization from `init_seed` when no checkpoint is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    #[serde(default = "default_alpha")]
    pub alpha1: f64,
    #[serde(default = "default_alpha")]
    pub alpha2: f64,
    #[serde(default = "default_one")]
    pub kl_temperature: f64,
    /// Fixed multiplier on the cosine-similarity logits.
    #[serde(default = "default_one")]
    pub clip_scale: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            alpha1: 0.5,
            alpha2: 0.5,
            kl_temperature: 1.0,
            clip_scale: 1.0,
        }
    }
}

impl LossSettings {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha1, self.alpha2)
    }
}

fn default_name() -> String {
    "run".into()
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_wd() -> f64 {
    0.1
}
fn default_student_size() -> usize {
    32
}
fn default_teacher_size() -> usize {
    224
}
fn default_cache_samples() -> usize {
    100
}

/// One training run, fully described.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub mode: Mode,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub student: StudentSpec,
    #[serde(default)]
    pub teacher: Option<TeacherSpec>,
    /// Embedding cache used by clip-embed training.
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    /// Samples per class averaged when precomputing a cache.
    #[serde(default = "default_cache_samples")]
    pub cache_samples_per_class: usize,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_student_size")]
    pub student_image_size: usize,
    #[serde(default = "default_teacher_size")]
    pub teacher_image_size: usize,
    #[serde(default)]
    pub precision: Precision,
}

impl ExperimentConfig {
    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    pub fn student_config(&self) -> ModelConfig {
        let s = &self.student;
        ModelConfig::new(
            s.layers,
            s.embed_dim,
            s.heads,
            s.mlp_dim,
            s.patch_size,
            self.student_image_size,
            self.num_classes(),
        )
    }

    pub fn teacher_config(&self) -> Option<ModelConfig> {
        self.teacher.as_ref().map(|t| {
            ModelConfig::new(
                t.layers,
                t.embed_dim,
                t.heads,
                t.mlp_dim,
                t.patch_size,
                self.teacher_image_size,
                self.num_classes(),
            )
        })
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        self.loss.weights()
    }

    /// Checks every cross-field invariant.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Validation(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Validation(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.loss.weights()?;
        if !(self.loss.kl_temperature > 0.0 && self.loss.kl_temperature.is_finite()) {
            return Err(Error::Validation("loss.kl_temperature must be positive".into()));
        }
        if !(self.loss.clip_scale > 0.0 && self.loss.clip_scale.is_finite()) {
            return Err(Error::Validation("loss.clip_scale must be positive".into()));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                num_classes,
                per_class,
                val_per_class,
                image_size,
                ..
            } => {
                if *num_classes == 0 || *per_class == 0 || *val_per_class == 0 || *image_size == 0 {
                    return Err(Error::Validation("synthetic dataset counts must be positive".into()));
                }
            }
            DatasetSpec::Cifar100 { .. } => {}
        }
        if self.cache_samples_per_class == 0 {
            return Err(Error::Validation("cache_samples_per_class must be at least 1".into()));
        }
        self.student_config()
            .validate()
            .map_err(|e| Error::Validation(format!("student: {e}")))?;
        if let Some(t) = self.teacher_config() {
            t.validate().map_err(|e| Error::Validation(format!("teacher: {e}")))?;
        }
        if self.mode.needs_teacher_model() && self.teacher.is_none() {
            return Err(Error::Validation(format!("mode {} requires a teacher", self.mode)));
        }
        if self.mode == Mode::ClipEmbed && self.cache_path.is_none() {
            return Err(Error::Validation("mode clip-embed requires cache_path".into()));
        }
        Ok(())
    }

    /// Provenance digest of the configured teacher: its architecture plus
    /// either the checkpoint file contents or the init seed. Computed without
    /// materializing the weights.
    pub fn teacher_digest(&self) -> Result<Option<[u8; 32]>> {
        let (Some(spec), Some(cfg)) = (&self.teacher, self.teacher_config()) else {
            return Ok(None);
        };
        let mut h = Sha256::new();
        h.update(b"edkd-teacher");
        h.update(serde_json::to_vec(&cfg).expect("config serializes"));
        match &spec.checkpoint {
            Some(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                h.update(b"checkpoint");
                h.update(Sha256::digest(&bytes));
            }
            None => {
                h.update(b"init");
                h.update(spec.init_seed.to_le_bytes());
            }
        }
        Ok(Some(h.finalize().into()))
    }
}

/// Splits `a.b.c=value`; the value is JSON when it parses, a string otherwise.
fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for seg in &path[..path.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set `{}`: `{seg}` is inside a non-object", path.join("."))))?;
        cur = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::Config(format!("cannot set `{}` on a non-object", path.join("."))))?
        .insert(path[path.len() - 1].clone(), value);
    Ok(())
}

/// Fills in the missing half of (alpha1, alpha2) so that they sum to 1.
fn complete_alphas(root: &mut Value) {
    let Some(loss) = root.get_mut("loss").and_then(Value::as_object_mut) else {
        return;
    };
    let a1 = loss.get("alpha1").and_then(Value::as_f64);
    let a2 = loss.get("alpha2").and_then(Value::as_f64);
    match (loss.contains_key("alpha1"), loss.contains_key("alpha2"), a1, a2) {
        (true, false, Some(a1), _) => {
            loss.insert("alpha2".into(), Value::from(1.0 - a1));
        }
        (false, true, _, Some(a2)) => {
            loss.insert("alpha1".into(), Value::from(1.0 - a2));
        }
        _ => {}
    }
}

/// Builds a validated config from a JSON value and override strings.
///
/// Overriding only one of `loss.alpha1` / `loss.alpha2` re-derives the other.
pub fn config_from_value(mut root: Value, overrides: &[String]) -> Result<ExperimentConfig> {
    if !root.is_object() {
        return Err(Error::Config("config root must be a JSON object".into()));
    }
    let mut touched = BTreeSet::new();
    for o in overrides {
        let (path, value) = parse_override(o)?;
        touched.insert(path.join("."));
        set_path(&mut root, &path, value)?;
    }
    if let Some(loss) = root.get_mut("loss").and_then(Value::as_object_mut) {
        match (touched.contains("loss.alpha1"), touched.contains("loss.alpha2")) {
            (true, false) => {
                loss.remove("alpha2");
            }
            (false, true) => {
                loss.remove("alpha1");
            }
            _ => {}
        }
    }
    complete_alphas(&mut root);

    let config: ExperimentConfig = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Error::Config(e.into_inner().to_string())
        } else {
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        }
    })?;
    config.validate()?;
    Ok(config)
}

/// Reads a JSON config file and applies `KEY=VALUE` overrides.
pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let root: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    config_from_value(root, overrides)
}
