//! JSON run configuration for the command-line tool.
//!
//! Every section is optional in the input file and filled with defaults.
//! Seeds of the training, population and campaign sections that are not
//! given explicitly are derived from the top-level `seed`, so one number
//! pins a whole pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::morpher::{BioMorphConfig, InversionConfig};
use crate::nets::{BiometricConfig, EmbedderTrainConfig, EncoderConfig, EncoderTrainConfig, PerceptualConfig};
use crate::rng;
use crate::stylegen::GeneratorConfig;
use crate::vulneval::{CampaignConfig, PopulationConfig};

/// Sections whose `seed` is derived from the top-level seed when absent.
const SEEDED_SECTIONS: [&str; 4] = ["embedder_training", "encoder_training", "population", "campaign"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub generator: GeneratorConfig,
    /// Mapped samples averaged into the mean latent.
    pub stats_samples: usize,
    pub perceptual: PerceptualConfig,
    pub biometric: BiometricConfig,
    pub encoder: EncoderConfig,
    pub embedder_training: EmbedderTrainConfig,
    pub encoder_training: EncoderTrainConfig,
    pub population: PopulationConfig,
    pub inversion: InversionConfig,
    pub bio_morph: BioMorphConfig,
    pub campaign: CampaignConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("morphbench-out"),
            generator: GeneratorConfig::default(),
            stats_samples: 2000,
            perceptual: PerceptualConfig::default(),
            biometric: BiometricConfig::default(),
            encoder: EncoderConfig::default(),
            embedder_training: EmbedderTrainConfig::default(),
            encoder_training: EncoderTrainConfig::default(),
            population: PopulationConfig::default(),
            inversion: InversionConfig::default(),
            bio_morph: BioMorphConfig::default(),
            campaign: CampaignConfig::default(),
        }
    }
}

/// Set `path` (dot-separated object keys) in `doc` to `value`, creating
/// intermediate objects.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad config key {path:?}")));
    }
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        if !cur.is_object() {
            return Err(Error::Config(format!("{path}: {k} is not an object")));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("{path}: parent is not an object"))),
    }
}

/// Parse an override of the form `key.path=value`; the value is read as
/// JSON and falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Resolve a config document: apply overrides, derive missing section
    /// seeds, expand defaults and validate.
    pub fn resolve(mut doc: Value, overrides: &[(String, Value)]) -> Result<Self> {
        if doc.is_null() {
            doc = Value::Object(Default::default());
        }
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for (k, v) in overrides {
            set_path(&mut doc, k, v.clone())?;
        }
        let seed = match doc.get("seed") {
            None => RunConfig::default().seed,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::Config(format!("seed must be a non-negative integer, got {v}")))?,
        };
        for section in SEEDED_SECTIONS {
            let derived = rng::derive(seed, section);
            let entry = doc
                .as_object_mut()
                .expect("checked")
                .entry(section)
                .or_insert_with(|| Value::Object(Default::default()));
            match entry.as_object_mut() {
                Some(obj) => {
                    obj.entry("seed").or_insert(Value::from(derived));
                }
                None => return Err(Error::Config(format!("{section} must be an object"))),
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Missing {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let doc: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(doc, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.inversion.validate()?;
        self.bio_morph.validate()?;
        self.embedder_training.validate()?;
        self.encoder_training.adam.validate()?;
        if self.stats_samples == 0 {
            return Err(Error::Config("stats_samples must be >= 1".into()));
        }
        let g = &self.generator;
        let nets_res = [
            ("perceptual", self.perceptual.resolution),
            ("biometric", self.biometric.resolution),
            ("encoder", self.encoder.resolution),
        ];
        for (name, r) in nets_res {
            if r != g.resolution {
                return Err(Error::Config(format!(
                    "{name}.resolution {r} differs from generator.resolution {}",
                    g.resolution
                )));
            }
        }
        if self.encoder.layers != g.layers || self.encoder.style_dim != g.style_dim {
            return Err(Error::Config("encoder layers/style_dim must match the generator".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Write `config.resolved.json` into `dir`.
    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved.json"), self.to_json()?)?;
        Ok(())
    }
}
