//! Directory-backed raster store: `manifest.json` plus one raster file per band.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::raster::{read_raster, write_raster, LoadedRecord, RasterHeader, RasterRecord, RecordBand};
use super::Sample;
use crate::error::{Result, UsatError};
use crate::geometry::BandKey;
use crate::patch_embed::BandRaster;

pub const STORE_FORMAT: &str = "usat-store/1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
}

/// Keyed by `sensor/band`.
pub type NormStats = BTreeMap<String, BandStats>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// Record ids, one per sensor.
    pub records: Vec<String>,
    pub labels: Vec<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreManifest {
    pub format: String,
    pub classes: Vec<String>,
    pub records: Vec<RasterRecord>,
    pub samples: Vec<SampleEntry>,
    pub norm_stats: NormStats,
}

/// Population mean and standard deviation by two passes.
pub fn band_stats<'a>(arrays: impl Iterator<Item = &'a Array2<f64>> + Clone) -> BandStats {
    let n: usize = arrays.clone().map(|a| a.len()).sum();
    if n == 0 {
        return BandStats { mean: 0.0, std: 1.0 };
    }
    let mean = arrays.clone().flat_map(|a| a.iter()).sum::<f64>() / n as f64;
    let var = arrays
        .flat_map(|a| a.iter())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    BandStats {
        mean,
        std: var.sqrt(),
    }
}

pub fn compute_norm_stats(samples: &[Sample]) -> NormStats {
    let mut keys: Vec<BandKey> = samples.iter().flat_map(|s| s.rasters.keys().cloned()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let arrays = samples.iter().filter_map(|s| s.rasters.get(&k)).map(|r| &r.pixels);
            (k.to_string(), band_stats(arrays))
        })
        .collect()
}

/// Samples held in memory with their class list and normalization statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub norm_stats: NormStats,
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Self {
        let norm_stats = compute_norm_stats(&samples);
        Self {
            classes,
            samples,
            norm_stats,
        }
    }

    /// Each band standardized by `stats` (typically the dataset's own).
    pub fn normalized_with(&self, stats: &NormStats) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for (key, r) in s.rasters.iter_mut() {
                    if let Some(st) = stats.get(&key.to_string()) {
                        let std = if st.std > 0.0 { st.std } else { 1.0 };
                        r.pixels.mapv_inplace(|v| (v - st.mean) / std);
                    }
                }
                s
            })
            .collect();
        Self {
            classes: self.classes.clone(),
            samples,
            norm_stats: stats.clone(),
        }
    }

    pub fn normalized(&self) -> Self {
        self.normalized_with(&self.norm_stats)
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Samples of one split, as an owned dataset sharing classes and stats.
    pub fn subset(&self, split: Split) -> Self {
        Self {
            classes: self.classes.clone(),
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
            norm_stats: self.norm_stats.clone(),
        }
    }
}

pub struct StoreWriter {
    dir: PathBuf,
    manifest: StoreManifest,
}

impl StoreWriter {
    pub fn create(dir: &Path, classes: Vec<String>) -> Result<Self> {
        fs::create_dir_all(dir.join("rasters"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: StoreManifest {
                format: STORE_FORMAT.into(),
                classes,
                records: vec![],
                samples: vec![],
                norm_stats: NormStats::new(),
            },
        })
    }

    /// Writes each band to `rasters/<record>_<band>.usras` and lists the record.
    pub fn add_record(&mut self, loaded: &LoadedRecord) -> Result<()> {
        let mut record = loaded.record.clone();
        if self.manifest.records.iter().any(|r| r.id == record.id) {
            return Err(UsatError::DuplicateId(format!("record {}", record.id)));
        }
        for band in record.bands.iter_mut() {
            let px = loaded
                .pixels
                .get(&band.name)
                .ok_or_else(|| UsatError::UnknownBand(format!("{}/{}", record.id, band.name)))?;
            let file = format!("rasters/{}_{}.usras", record.id, band.name);
            let header = RasterHeader {
                band: band.name.clone(),
                rows: px.nrows(),
                cols: px.ncols(),
                gsd: band.gsd,
                origin: record.origin_m,
                timestamp: record.timestamp,
            };
            write_raster(&self.dir.join(&file), &header, px.view())?;
            band.file = file;
        }
        self.manifest.records.push(record);
        Ok(())
    }

    pub fn add_sample(&mut self, entry: SampleEntry) -> Result<()> {
        for r in &entry.records {
            if !self.manifest.records.iter().any(|rec| rec.id == *r) {
                return Err(UsatError::Config(format!("sample {} names unknown record {r}", entry.id)));
            }
        }
        if entry.labels.len() != self.manifest.classes.len() {
            return Err(UsatError::Shape(format!(
                "sample {} has {} labels for {} classes",
                entry.id,
                entry.labels.len(),
                self.manifest.classes.len()
            )));
        }
        self.manifest.samples.push(entry);
        Ok(())
    }

    /// Computes normalization statistics from the written rasters and writes the manifest.
    pub fn finish(mut self) -> Result<Store> {
        let store = Store {
            dir: self.dir.clone(),
            manifest: self.manifest.clone(),
        };
        let samples = store.load_samples()?;
        self.manifest.norm_stats = compute_norm_stats(&samples);
        fs::write(
            self.dir.join(MANIFEST),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(Store {
            dir: self.dir,
            manifest: self.manifest,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
}

impl Store {
    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))?;
        let manifest: StoreManifest = serde_json::from_str(&text)?;
        if manifest.format != STORE_FORMAT {
            return Err(UsatError::Format(format!(
                "unsupported store format {}",
                manifest.format
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn record(&self, id: &str) -> Result<&RasterRecord> {
        self.manifest
            .records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| UsatError::Config(format!("unknown record {id}")))
    }

    pub fn load_record(&self, record: &RasterRecord) -> Result<LoadedRecord> {
        let mut pixels = IndexMap::new();
        for band in &record.bands {
            let (header, px) = read_raster(&self.dir.join(&band.file))?;
            if header.band != band.name {
                return Err(UsatError::Format(format!(
                    "{} holds band {}, manifest says {}",
                    band.file, header.band, band.name
                )));
            }
            pixels.insert(band.name.clone(), px);
        }
        Ok(LoadedRecord {
            record: record.clone(),
            pixels,
        })
    }

    pub fn load_sample(&self, entry: &SampleEntry) -> Result<Sample> {
        let mut rasters = IndexMap::new();
        let mut timestamps = BTreeMap::new();
        for rid in &entry.records {
            let rec = self.record(rid)?;
            let loaded = self.load_record(rec)?;
            timestamps.insert(rec.sensor.clone(), rec.timestamp);
            for band in &rec.bands {
                let px = loaded.pixels[&band.name].clone();
                rasters.insert(
                    BandKey::new(&rec.sensor, &band.name),
                    BandRaster::new(&band.name, px, band.gsd),
                );
            }
        }
        Ok(Sample {
            id: entry.id.clone(),
            rasters,
            labels: entry.labels.iter().map(|&l| l as f64).collect(),
            timestamps,
            split: entry.split,
        })
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.manifest
            .samples
            .iter()
            .map(|e| self.load_sample(e))
            .collect()
    }

    /// Every sample with the manifest's class list and statistics.
    pub fn load_dataset(&self) -> Result<Dataset> {
        Ok(Dataset {
            classes: self.manifest.classes.clone(),
            samples: self.load_samples()?,
            norm_stats: self.manifest.norm_stats.clone(),
        })
    }
}

/// Band record listing for a sensor's raster bands, without files.
pub fn record_bands(bands: &[(String, f64)]) -> Vec<RecordBand> {
    bands
        .iter()
        .map(|(name, gsd)| RecordBand {
            name: name.clone(),
            gsd: *gsd,
            file: String::new(),
        })
        .collect()
}
