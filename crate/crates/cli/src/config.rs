//! The JSON configuration document: `{geometry, encodings, model, run, data}`.
//!
//! Every section is optional. Precedence is command-line flag, then file, then default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use usat::data::synth::SynthConfig;
use usat::encodings::{EncodingFlags, DEFAULT_OMEGA};
use usat::model::{DecoderConfig, EncoderConfig};
use usat::patch_embed::PoolMode;
use usat::training::RunConfig;
use usat::{GeometryConfig, ModelConfig, Preset, Result, UsatError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodingSection {
    pub superpos: bool,
    pub group: bool,
    pub sensor: bool,
    pub omega: f64,
}

impl Default for EncodingSection {
    fn default() -> Self {
        let flags = EncodingFlags::default();
        Self {
            superpos: flags.superpos,
            group: flags.group,
            sensor: flags.sensor,
            omega: DEFAULT_OMEGA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    /// Overrides the preset's encoder.
    pub encoder: Option<EncoderConfig>,
    /// Overrides the decoder derived from the encoder.
    pub decoder: Option<DecoderConfig>,
    pub pool: PoolMode,
    pub normalize_target: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Vitl,
            encoder: None,
            decoder: None,
            pool: PoolMode::Average,
            normalize_target: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_samples: usize,
    pub synth: SynthConfig,
    /// Worker threads for data preparation and per-sample passes (0 = all cores).
    pub workers: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_samples: 64,
            synth: SynthConfig::default(),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub geometry: GeometryConfig,
    pub encodings: EncodingSection,
    pub model: ModelSection,
    /// Partial [`RunConfig`]; keys override the defaults of the subcommand's mode.
    pub run: Map<String, Value>,
    pub data: DataSection,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            geometry: GeometryConfig::usatlas(),
            encodings: EncodingSection::default(),
            model: ModelSection::default(),
            run: Map::new(),
            data: DataSection::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config: Self = match path {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
                .map_err(|e| UsatError::Config(format!("{}: {e}", p.display())))?,
            None => Self::default(),
        };
        config.validate()?;
        Ok(config)
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.model_config(0)?.validate()?;
        self.run_config(RunConfig::pretrain())?.validate()?;
        self.run_config(RunConfig::finetune())?.validate()?;
        Ok(())
    }

    pub fn model_config(&self, n_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(self.model.preset, n_classes);
        if let Some(enc) = self.model.encoder {
            cfg.encoder = enc;
            cfg.decoder = DecoderConfig::for_encoder(&enc);
        }
        if let Some(dec) = self.model.decoder {
            cfg.decoder = dec;
        }
        cfg.flags = EncodingFlags {
            superpos: self.encodings.superpos,
            group: self.encodings.group,
            sensor: self.encodings.sensor,
        };
        cfg.omega = self.encodings.omega;
        cfg.pool = self.model.pool;
        cfg.normalize_target = self.model.normalize_target;
        Ok(cfg)
    }

    /// `defaults` overlaid with the file's `run` section.
    pub fn run_config(&self, defaults: RunConfig) -> Result<RunConfig> {
        let mut value = serde_json::to_value(defaults)?;
        let obj = value.as_object_mut().expect("struct serializes to an object");
        for (k, v) in &self.run {
            obj.insert(k.clone(), v.clone());
        }
        serde_json::from_value(value).map_err(|e| UsatError::Config(format!("run section: {e}")))
    }
}
