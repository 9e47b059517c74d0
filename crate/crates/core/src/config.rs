//! Global configuration file: one TOML table per section, with dotted
//! `section.key=value` overrides applied on top.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::FfeConfig;
use crate::data::SyntheticSpec;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root for translation training and evaluation.
    pub root: String,
    /// Disjoint identity pool used to pretrain the face-feature extractor.
    pub pretrain_root: String,
    /// Subjects generated for the pretraining pool by `synth-data --pool`.
    pub pretrain_subjects: usize,
    pub pretrain_seed: u64,
    pub n_train_subjects: usize,
    pub n_test_subjects: usize,
    pub pairs_per_subject: usize,
    pub split_seed: u64,
    /// Generator settings for `synth-data`.
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: "data".into(),
            pretrain_root: "data-pretrain".into(),
            pretrain_subjects: 40,
            pretrain_seed: 1001,
            n_train_subjects: 16,
            n_test_subjects: 8,
            pairs_per_subject: 14,
            split_seed: 0,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ffe: FfeConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ffe.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        let r = self.train.resolution;
        if !r.is_multiple_of(4) {
            return Err(Error::Config(format!("train.resolution {r} must be divisible by 4")));
        }
        if self.discriminator.output_size(r).is_none_or(|s| s == 0) {
            return Err(Error::Config(format!(
                "train.resolution {r} is too small for the discriminator"
            )));
        }
        Ok(())
    }

    /// Applies one `section.key=value` override. The value is parsed as a TOML
    /// literal, falling back to a bare string; unknown keys are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        *slot = match (&*slot, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (toml::Value::String(_), other) if !other.is_str() => toml::Value::String(raw.to_string()),
            (_, v) => v,
        };
        *self = root
            .try_into()
            .map_err(|e| Error::Config(format!("override {key}: {e}")))?;
        Ok(())
    }

    pub fn apply_overrides<S: AsRef<str>>(&mut self, assignments: &[S]) -> Result<()> {
        assignments.iter().try_for_each(|a| self.apply_override(a.as_ref()))
    }

    /// every settable key with its default value, sorted by key.
    pub fn documented_keys() -> Vec<(String, String)> {
        let root = toml::Value::try_from(Config::default()).expect("default config serializes");
        let mut out = Vec::new();
        flatten("", &root, &mut out);
        out
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = Config::default();
        let text = c.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = Config::from_toml_str("[loss]\ngamma_pc = 0.0\n").unwrap();
        assert_eq!(c.loss.gamma_pc, 0.0);
        assert_eq!(c.loss.lambda_cyc, 1.0);
        assert_eq!(c.generator.translator_blocks, 6);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_toml_str("[loss]\ngama = 1.0\n").is_err());
        assert!(Config::from_toml_str("[optimizer]\nlr = 1.0\n").is_err());
        let mut c = Config::default();
        assert!(matches!(c.apply_override("train.nope=1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_override("train.epochs"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply_with_type_coercion() {
        let mut c = Config::default();
        c.apply_overrides(&[
            "train.epochs=3",
            "train.learning_rate=1",
            "generator.encoder=basic",
            "data.root=/tmp/x",
            "data.synthetic.seed=9",
            "discriminator.layer_channels=[8, 16]",
            "discriminator.strides=[2, 1, 1]",
        ])
        .unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.learning_rate, 1.0);
        assert_eq!(c.generator.encoder, crate::generator::EncoderKind::Basic);
        assert_eq!(c.data.root, "/tmp/x");
        assert_eq!(c.data.synthetic.seed, 9);
        assert_eq!(c.discriminator.layer_channels, vec![8, 16]);
        assert!(c.apply_override("train.epochs=lots").is_err());
    }

    #[test]
    fn documented_keys_cover_every_section() {
        let keys = Config::documented_keys();
        for section in ["ffe.", "generator.", "discriminator.", "loss.", "train.", "data."] {
            assert!(keys.iter().any(|(k, _)| k.starts_with(section)), "{section}");
        }
        assert!(keys.iter().any(|(k, _)| k == "loss.gamma_pc"));
    }
}
