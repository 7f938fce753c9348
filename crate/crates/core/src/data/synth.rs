//! Synthetic co-registered multi-sensor imagery with multi-label land cover.
//!
//! Each sample draws a K-class land-cover map on a 1 m grid from smooth
//! Gaussian blobs. Every band is a class-weighted mix of a per-(class, band)
//! reflectance table plus noise, and is then bilinearly resampled to its
//! native GSD. A class is labeled positive when it covers at least 1% of the
//! image.

use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::raster::{bilinear_resample, Annotation, AnnotationGeometry, LoadedRecord, RasterRecord};
use super::store::{record_bands, Dataset, SampleEntry, Split, Store, StoreWriter};
use super::Sample;
use crate::error::{Result, UsatError};
use crate::geometry::{BandKey, GeometryConfig};
use crate::patch_embed::BandRaster;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    /// Every `val_every`-th sample goes to the validation split (0 disables).
    pub val_every: usize,
    pub noise_std: f64,
    /// Minimum covered area fraction for a positive label.
    pub label_fraction: f64,
    /// Probability that a class appears in a sample.
    pub class_prob: f64,
    /// Seconds between the fine and coarse acquisitions.
    pub coarse_delay_s: i64,
    /// Softmax sharpness of class boundaries; larger is crisper.
    pub sharpness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            val_every: 4,
            noise_std: 0.01,
            label_fraction: 0.01,
            class_prob: 0.5,
            coarse_delay_s: 3600,
            sharpness: 3.0,
        }
    }
}

pub fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("class{i}")).collect()
}

/// One generated sample: a record per sensor plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub records: Vec<LoadedRecord>,
    pub labels: Vec<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub classes: Vec<String>,
    pub samples: Vec<SynthSample>,
}

struct Blob {
    cy: f64,
    cx: f64,
    inv_two_sigma2: f64,
    amp: f64,
}

pub fn synth_generate(seed: u64, n_samples: usize, geometry: &GeometryConfig, cfg: &SynthConfig) -> Result<SynthDataset> {
    geometry.validate()?;
    if cfg.n_classes == 0 {
        return Err(UsatError::Config("need at least one class".into()));
    }
    let base_gsd = geometry
        .groups()
        .iter()
        .map(|g| g.gsd)
        .fold(1.0f64, f64::min);
    let footprint = geometry.footprint.image_footprint_m;
    let side = (footprint / base_gsd).round() as usize;

    let bands: Vec<(BandKey, f64)> = geometry
        .all_bands()
        .keys()
        .iter()
        .map(|k| {
            let g = geometry.group_of(&k.sensor, &k.band).expect("configured band");
            (k.clone(), g.gsd)
        })
        .collect();
    let mut table_rng = ChaCha8Rng::seed_from_u64(seed);
    let reflectance: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| bands.iter().map(|_| table_rng.random_range(0.05..0.95)).collect())
        .collect();

    let classes = class_names(cfg.n_classes);
    let samples = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            render_sample(i, &mut rng, geometry, cfg, side, base_gsd, &bands, &reflectance, &classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset { classes, samples })
}

#[allow(clippy::too_many_arguments)]
fn render_sample(
    index: usize,
    rng: &mut ChaCha8Rng,
    geometry: &GeometryConfig,
    cfg: &SynthConfig,
    side: usize,
    base_gsd: f64,
    bands: &[(BandKey, f64)],
    reflectance: &[Vec<f64>],
    classes: &[String],
) -> Result<SynthSample> {
    let k = cfg.n_classes;
    let n = side as f64;
    let mut present: Vec<bool> = (0..k).map(|_| rng.random_bool(cfg.class_prob)).collect();
    if !present.iter().any(|p| *p) {
        present[rng.random_range(0..k)] = true;
    }
    let blobs: Vec<Vec<Blob>> = present
        .iter()
        .map(|&on| {
            if !on {
                return vec![];
            }
            let count = rng.random_range(1..=3);
            (0..count)
                .map(|_| {
                    let sigma = rng.random_range(n / 10.0..n / 4.0);
                    Blob {
                        cy: rng.random_range(0.0..n),
                        cx: rng.random_range(0.0..n),
                        inv_two_sigma2: 1.0 / (2.0 * sigma * sigma),
                        amp: rng.random_range(0.5..1.5),
                    }
                })
                .collect()
        })
        .collect();
    let sharpness = cfg.sharpness;

    let mut class_map = Array2::<usize>::zeros((side, side));
    let mut weights = vec![Array2::<f64>::zeros((side, side)); k];
    let mut field = vec![0.0; k];
    for r in 0..side {
        for c in 0..side {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            for (f, bs) in field.iter_mut().zip(&blobs) {
                *f = if bs.is_empty() {
                    f64::NEG_INFINITY
                } else {
                    bs.iter()
                        .map(|b| {
                            let d2 = (y - b.cy).powi(2) + (x - b.cx).powi(2);
                            b.amp * (-d2 * b.inv_two_sigma2).exp()
                        })
                        .sum()
                };
            }
            let (best, max) = field
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            class_map[[r, c]] = best;
            let z: f64 = field.iter().map(|v| ((v - max) * sharpness).exp()).sum();
            for (w, v) in weights.iter_mut().zip(&field) {
                w[[r, c]] = ((v - max) * sharpness).exp() / z;
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| UsatError::Config(e.to_string()))?;
    let mut rendered: IndexMap<BandKey, Array2<f64>> = IndexMap::new();
    for (bi, (key, gsd)) in bands.iter().enumerate() {
        let mut img = Array2::<f64>::zeros((side, side));
        for (w, refl) in weights.iter().zip(reflectance) {
            img.scaled_add(refl[bi], w);
        }
        img.mapv_inplace(|v| v + noise.sample(rng));
        rendered.insert(key.clone(), bilinear_resample(img.view(), base_gsd, *gsd)?);
    }

    let total = (side * side) as f64;
    let mut counts = vec![0usize; k];
    let mut first_pixel = vec![None; k];
    for ((r, c), &cls) in class_map.indexed_iter() {
        counts[cls] += 1;
        first_pixel[cls].get_or_insert((r, c));
    }
    let labels: Vec<u8> = counts
        .iter()
        .map(|&cnt| u8::from(cnt as f64 / total >= cfg.label_fraction))
        .collect();

    let footprint = geometry.footprint.image_footprint_m;
    let origin = ((index % 1000) as f64 * 2.0 * footprint, (index / 1000) as f64 * 2.0 * footprint);
    let annotations: Vec<Annotation> = (0..k)
        .filter(|&c| labels[c] == 1)
        .map(|c| {
            let (r, col) = first_pixel[c].expect("labeled class has pixels");
            Annotation {
                class: classes[c].clone(),
                geometry: AnnotationGeometry::Point {
                    x: origin.0 + (col as f64 + 0.5) * base_gsd,
                    y: origin.1 + (r as f64 + 0.5) * base_gsd,
                },
            }
        })
        .collect();

    let t0 = 1_600_000_000 + index as i64 * 86_400;
    let records = geometry
        .sensors
        .iter()
        .enumerate()
        .map(|(si, sensor)| {
            let sensor_bands: Vec<(String, f64)> = sensor
                .groups
                .iter()
                .flat_map(|g| g.band_names.iter().map(move |b| (b.clone(), g.gsd)))
                .collect();
            let pixels: IndexMap<String, Array2<f64>> = sensor_bands
                .iter()
                .map(|(b, _)| (b.clone(), rendered[&BandKey::new(&sensor.name, b)].clone()))
                .collect();
            LoadedRecord {
                record: RasterRecord {
                    id: format!("s{index:05}_{}", sensor.name),
                    sensor: sensor.name.clone(),
                    origin_m: origin,
                    footprint_m: footprint,
                    timestamp: t0 + si as i64 * cfg.coarse_delay_s,
                    bands: record_bands(&sensor_bands),
                    annotations: if si == 0 { annotations.clone() } else { vec![] },
                },
                pixels,
            }
        })
        .collect();

    let split = if cfg.val_every > 0 && index % cfg.val_every == cfg.val_every - 1 {
        Split::Val
    } else {
        Split::Train
    };
    Ok(SynthSample { records, labels, split })
}

impl SynthDataset {
    pub fn to_dataset(&self) -> Dataset {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rasters = IndexMap::new();
                let mut timestamps = std::collections::BTreeMap::new();
                for rec in &s.records {
                    timestamps.insert(rec.record.sensor.clone(), rec.record.timestamp);
                    for band in &rec.record.bands {
                        // f32 storage precision, matching what a store round-trip yields
                        let px = rec.pixels[&band.name].mapv(|v| v as f32 as f64);
                        rasters.insert(
                            BandKey::new(&rec.record.sensor, &band.name),
                            BandRaster::new(&band.name, px, band.gsd),
                        );
                    }
                }
                Sample {
                    id: format!("s{i:05}"),
                    rasters,
                    labels: s.labels.iter().map(|&l| l as f64).collect(),
                    timestamps,
                    split: s.split,
                }
            })
            .collect();
        Dataset::new(self.classes.clone(), samples)
    }

    pub fn write_store(&self, dir: &Path) -> Result<Store> {
        let mut writer = StoreWriter::create(dir, self.classes.clone())?;
        for (i, s) in self.samples.iter().enumerate() {
            for rec in &s.records {
                writer.add_record(rec)?;
            }
            writer.add_sample(SampleEntry {
                id: format!("s{i:05}"),
                records: s.records.iter().map(|r| r.record.id.clone()).collect(),
                labels: s.labels.clone(),
                split: s.split,
            })?;
        }
        writer.finish()
    }
}
