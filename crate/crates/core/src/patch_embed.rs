//! Per-band patchification, per-band linear projection and spectral group pooling.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Result, UsatError};
use crate::geometry::{BandKey, BandSubset, GeometryConfig};
use crate::nn::Linear;
use crate::params::ParamStore;

/// One band of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BandRaster {
    pub band_name: String,
    /// Row-major, square.
    pub pixels: Array2<f64>,
    pub gsd: f64,
    pub footprint_m: f64,
}

impl BandRaster {
    pub fn new(band_name: impl Into<String>, pixels: Array2<f64>, gsd: f64) -> Self {
        let footprint_m = pixels.nrows() as f64 * gsd;
        Self {
            band_name: band_name.into(),
            pixels,
            gsd,
            footprint_m,
        }
    }

    pub fn side(&self) -> usize {
        self.pixels.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Average,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub group_id: usize,
    pub sensor_id: usize,
    pub row: usize,
    pub col: usize,
}

/// Pooled tokens of one sample, in (sensor, group, row-major patch) order.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Array2<f64>,
    pub meta: Vec<TokenMeta>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.mask[i]).collect()
    }
}

/// Cuts a `p*s` square raster into `p^2` flattened `s x s` patches.
pub fn patchify(pixels: ArrayView2<f64>, p: usize, s: usize) -> Result<Array2<f64>> {
    let side = p * s;
    if pixels.nrows() != side || pixels.ncols() != side {
        return Err(UsatError::Shape(format!(
            "raster is {}x{}, expected {side}x{side} for {p} patches of {s} px",
            pixels.nrows(),
            pixels.ncols()
        )));
    }
    let mut out = Array2::zeros((p * p, s * s));
    for i in 0..p {
        for j in 0..p {
            let block = pixels.slice(s![i * s..(i + 1) * s, j * s..(j + 1) * s]);
            out.row_mut(i * p + j)
                .iter_mut()
                .zip(block.iter())
                .for_each(|(o, v)| *o = *v);
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: ArrayView2<f64>, p: usize, s: usize) -> Result<Array2<f64>> {
    if patches.nrows() != p * p || patches.ncols() != s * s {
        return Err(UsatError::Shape(format!(
            "patch matrix is {:?}, expected [{}, {}]",
            patches.dim(),
            p * p,
            s * s
        )));
    }
    let mut out = Array2::zeros((p * s, p * s));
    for i in 0..p {
        for j in 0..p {
            let row = patches.row(i * p + j);
            for (k, v) in row.iter().enumerate() {
                out[[i * s + k / s, j * s + k % s]] = *v;
            }
        }
    }
    Ok(out)
}

pub fn projection_prefix(key: &BandKey) -> String {
    format!("proj.{}.{}", key.sensor, key.band)
}

/// Per-band projection layers looked up in a parameter store.
pub struct PatchProjection<'a> {
    params: &'a ParamStore,
}

impl<'a> PatchProjection<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params }
    }

    pub fn layer(&self, key: &BandKey) -> Result<Linear> {
        let layer = Linear::new(&projection_prefix(key));
        if !self.params.contains(&layer.w) || !self.params.contains(&layer.b) {
            return Err(UsatError::UnknownBand(key.to_string()));
        }
        Ok(layer)
    }

    /// Affine map applied to every patch of `band`.
    pub fn project_band(&self, key: &BandKey, patches: ArrayView2<f64>) -> Result<Array2<f64>> {
        let layer = self.layer(key)?;
        let w = self.params.matrix(&layer.w);
        if w.nrows() != patches.ncols() {
            return Err(UsatError::Shape(format!(
                "{key}: projection expects {} values per patch, got {}",
                w.nrows(),
                patches.ncols()
            )));
        }
        Ok(layer.forward(self.params, patches))
    }
}

/// Elementwise mean or sum over the projected bands of one group.
pub fn group_pool(per_band: &[Array2<f64>], mode: PoolMode) -> Result<Array2<f64>> {
    let first = per_band.first().ok_or(UsatError::EmptyGroup)?;
    let mut acc = first.clone();
    for e in &per_band[1..] {
        if e.dim() != acc.dim() {
            return Err(UsatError::Shape(format!(
                "cannot pool {:?} with {:?}",
                e.dim(),
                acc.dim()
            )));
        }
        acc += e;
    }
    if mode == PoolMode::Average {
        acc /= per_band.len() as f64;
    }
    Ok(acc)
}

/// Inputs kept for the backward pass through the patch projections.
pub struct EmbedCache {
    /// Per active group: token span start, band count and each band's patches.
    groups: Vec<(usize, usize, Vec<(BandKey, Array2<f64>)>)>,
    mode: PoolMode,
}

pub fn embed_sample(
    sample: &Sample,
    subset: &BandSubset,
    config: &GeometryConfig,
    params: &ParamStore,
    mode: PoolMode,
) -> Result<TokenBatch> {
    embed_sample_cached(sample, subset, config, params, mode).map(|(b, _)| b)
}

pub fn embed_sample_cached(
    sample: &Sample,
    subset: &BandSubset,
    config: &GeometryConfig,
    params: &ParamStore,
    mode: PoolMode,
) -> Result<(TokenBatch, EmbedCache)> {
    if subset.is_empty() {
        return Err(UsatError::EmptySubset);
    }
    let projection = PatchProjection::new(params);
    let mut token_blocks = Vec::new();
    let mut meta = Vec::new();
    let mut cache_groups = Vec::new();
    for g in config.active_groups(subset) {
        let sensor = &config
            .sensor_by_id(g.sensor_id)
            .ok_or_else(|| UsatError::Config(format!("group {} has no sensor", g.id)))?
            .name;
        let mut embeddings = Vec::new();
        let mut patches_kept = Vec::new();
        for band in &g.band_names {
            if !subset.contains(sensor, band) {
                continue;
            }
            let key = BandKey::new(sensor, band);
            let raster = sample
                .rasters
                .get(&key)
                .ok_or_else(|| UsatError::UnknownBand(format!("{key} missing from sample {}", sample.id)))?;
            let patches = patchify(raster.pixels.view(), g.patch_count, g.patch_size)?;
            embeddings.push(projection.project_band(&key, patches.view())?);
            patches_kept.push((key, patches));
        }
        let start = meta.len();
        let pooled = group_pool(&embeddings, mode)?;
        for i in 0..g.patch_count {
            for j in 0..g.patch_count {
                meta.push(TokenMeta {
                    group_id: g.id,
                    sensor_id: g.sensor_id,
                    row: i,
                    col: j,
                });
            }
        }
        cache_groups.push((start, embeddings.len(), patches_kept));
        token_blocks.push(pooled);
    }
    let views: Vec<_> = token_blocks.iter().map(|t| t.view()).collect();
    let tokens = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| UsatError::Shape(e.to_string()))?;
    let mask = vec![false; meta.len()];
    Ok((
        TokenBatch { tokens, meta, mask },
        EmbedCache {
            groups: cache_groups,
            mode,
        },
    ))
}

/// Accumulates projection gradients given the gradient w.r.t. the pooled tokens.
pub fn embed_backward(cache: &EmbedCache, dtokens: ArrayView2<f64>, grads: &mut ParamStore) {
    for (start, k, bands) in &cache.groups {
        let n = bands.first().map(|(_, p)| p.nrows()).unwrap_or(0);
        let mut dpooled = dtokens.slice(s![*start..*start + n, ..]).to_owned();
        if cache.mode == PoolMode::Average {
            dpooled /= *k as f64;
        }
        for (key, patches) in bands {
            let layer = Linear::new(&projection_prefix(key));
            layer.backward_params(patches.view(), dpooled.view(), grads);
        }
    }
}
