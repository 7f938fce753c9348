//! Checkpoint directories: `manifest.json` plus `params.bin` (little-endian f32
//! tensors concatenated in manifest order).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::encodings::GroupIndexMode;
use crate::error::{Result, UsatError};
use crate::geometry::{BandKey, GeometryConfig};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const CHECKPOINT_FORMAT: &str = "usat-checkpoint/1";
pub const TOKEN_ORDER_RULE: &str = "sensor_id, group_id, row-major patch index";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenOrder {
    pub rule: String,
    pub groups: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into `params.bin`, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

/// What produced the checkpoint and with which inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub stage: Stage,
    pub bands: Vec<BandKey>,
    pub group_index_mode: GroupIndexMode,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    pub token_order: TokenOrder,
    pub norm_stats: NormStats,
    pub classes: Vec<String>,
    pub run: RunInfo,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub norm_stats: NormStats,
    pub classes: Vec<String>,
    pub run: RunInfo,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.model.params.len());
        let mut offset = 0;
        let mut w = BufWriter::new(fs::File::create(dir.join("params.bin"))?);
        for (name, t) in self.model.params.iter() {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.iter() {
                let f = *v as f32;
                if !f.is_finite() {
                    return Err(UsatError::NonFinite(name.clone()));
                }
                w.write_all(&f.to_le_bytes())?;
            }
            offset += t.len();
        }
        w.flush()?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            geometry: self.model.geometry.clone(),
            model: self.model.config.clone(),
            token_order: TokenOrder {
                rule: TOKEN_ORDER_RULE.into(),
                groups: self.model.geometry.groups().iter().map(|g| g.id).collect(),
            },
            norm_stats: self.norm_stats.clone(),
            classes: self.classes.clone(),
            run: self.run.clone(),
            params: entries,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(UsatError::Format(format!(
                "unsupported checkpoint format {}",
                manifest.format
            )));
        }
        let expected: Vec<usize> = manifest.geometry.groups().iter().map(|g| g.id).collect();
        if manifest.token_order.groups != expected {
            return Err(UsatError::Format(format!(
                "token order {:?} does not match geometry {:?}",
                manifest.token_order.groups, expected
            )));
        }
        let bytes = fs::read(dir.join("params.bin"))?;
        let total: usize = manifest.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if bytes.len() != total * 4 {
            return Err(UsatError::Format(format!(
                "params.bin holds {} bytes, manifest describes {}",
                bytes.len(),
                total * 4
            )));
        }
        let mut params = ParamStore::new();
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > bytes.len() {
                return Err(UsatError::Format(format!("{} extends past params.bin", e.name)));
            }
            let values: Vec<f64> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| UsatError::Shape(err.to_string()))?;
            params.insert(e.name.clone(), t);
        }
        let model = Model::from_parts(manifest.model, manifest.geometry, params)?;
        Ok(Self {
            model,
            norm_stats: manifest.norm_stats,
            classes: manifest.classes,
            run: manifest.run,
        })
    }
}
