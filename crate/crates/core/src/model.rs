//! USat encoder, MAE decoder with per-group reconstruction heads, masked MSE
//! loss and the multi-label classification head.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encodings::{compose, EncodingFlags, EncodingParams, GroupIndexMode, DEFAULT_OMEGA};
use crate::error::{Result, UsatError};
use crate::geometry::{BandKey, BandSubset, GeometryConfig};
use crate::nn::{Linear, Transformer, TransformerCache};
use crate::params::ParamStore;
use crate::patch_embed::{
    embed_backward, embed_sample_cached, patchify, projection_prefix, unpatchify, PoolMode, TokenBatch,
    TokenMeta,
};

pub const TARGET_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
}

impl EncoderConfig {
    pub fn vitl() -> Self {
        Self {
            depth: 24,
            d_model: 1024,
            n_heads: 16,
            mlp_ratio: 4.0,
        }
    }

    pub fn tiny() -> Self {
        Self {
            depth: 2,
            d_model: 64,
            n_heads: 4,
            mlp_ratio: 4.0,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.d_model as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub d_dec: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
}

impl DecoderConfig {
    /// 8 layers at half the encoder width.
    pub fn for_encoder(enc: &EncoderConfig) -> Self {
        Self {
            depth: 8,
            d_dec: enc.d_model / 2,
            n_heads: (enc.n_heads / 2).max(1),
            mlp_ratio: enc.mlp_ratio,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.d_dec as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Vitl,
}

impl std::str::FromStr for Preset {
    type Err = UsatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "vitl" => Ok(Self::Vitl),
            other => Err(UsatError::Config(format!("unknown preset {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub flags: EncodingFlags,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub pool: PoolMode,
    #[serde(default = "default_true")]
    pub normalize_target: bool,
    pub n_classes: usize,
}

fn default_omega() -> f64 {
    DEFAULT_OMEGA
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn preset(preset: Preset, n_classes: usize) -> Self {
        let encoder = match preset {
            Preset::Tiny => EncoderConfig::tiny(),
            Preset::Vitl => EncoderConfig::vitl(),
        };
        Self {
            decoder: DecoderConfig::for_encoder(&encoder),
            encoder,
            flags: EncodingFlags::default(),
            omega: DEFAULT_OMEGA,
            pool: PoolMode::Average,
            normalize_target: true,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let d = &self.decoder;
        if e.d_model == 0 || e.n_heads == 0 || e.d_model % e.n_heads != 0 {
            return Err(UsatError::Config(format!(
                "encoder width {} not divisible by {} heads",
                e.d_model, e.n_heads
            )));
        }
        if d.d_dec == 0 || d.n_heads == 0 || d.d_dec % d.n_heads != 0 {
            return Err(UsatError::Config(format!(
                "decoder width {} not divisible by {} heads",
                d.d_dec, d.n_heads
            )));
        }
        if !(e.mlp_ratio > 0.0 && d.mlp_ratio > 0.0) {
            return Err(UsatError::Config("mlp ratio must be positive".into()));
        }
        self.encoder_encoding_params()?;
        self.decoder_encoding_params()?;
        Ok(())
    }

    pub fn encoder_encoding_params(&self) -> Result<EncodingParams> {
        EncodingParams::allocate(self.encoder.d_model, self.flags, self.omega)
    }

    pub fn decoder_encoding_params(&self) -> Result<EncodingParams> {
        EncodingParams::allocate(self.decoder.d_dec, self.flags, self.omega)
    }
}

/// Composed encodings for one band subset, at encoder and decoder widths.
#[derive(Debug, Clone)]
pub struct Encodings {
    pub encoder: Array2<f64>,
    pub decoder: Array2<f64>,
}

/// Per-group reconstruction targets and the head columns they correspond to.
#[derive(Debug, Clone)]
pub struct GroupTarget {
    pub group_id: usize,
    pub start: usize,
    pub values: Array2<f64>,
    pub columns: Vec<usize>,
}

/// True and predicted images of one group, in the units of the input pixels.
#[derive(Debug, Clone)]
pub struct GroupReconstruction {
    pub group_id: usize,
    pub bands: Vec<String>,
    pub truth: Vec<Array2<f64>>,
    pub pred: Vec<Array2<f64>>,
    /// Row-major over the group's patch grid.
    pub masked: Vec<bool>,
}

#[derive(Clone)]
struct Layers {
    encoder: Transformer,
    decoder: Transformer,
    dec_embed: Linear,
    heads: BTreeMap<usize, Linear>,
    cls: Linear,
}

pub const MASK_TOKEN: &str = "dec.mask_token";

impl Layers {
    fn new(cfg: &ModelConfig, geometry: &GeometryConfig) -> Self {
        Self {
            encoder: Transformer::new("enc", cfg.encoder.depth, cfg.encoder.n_heads),
            decoder: Transformer::new("dec", cfg.decoder.depth, cfg.decoder.n_heads),
            dec_embed: Linear::new("dec.embed"),
            heads: geometry
                .groups()
                .iter()
                .map(|g| (g.id, Linear::new(&format!("dec.head.{}", g.id))))
                .collect(),
            cls: Linear::new("cls"),
        }
    }
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub geometry: GeometryConfig,
    pub params: ParamStore,
    layers: Layers,
}

struct EncodeCache {
    visible: Vec<usize>,
    transformer: TransformerCache,
}

struct DecodeCache {
    latents: Array2<f64>,
    visible: Vec<usize>,
    masked: Vec<usize>,
    transformer: TransformerCache,
    hidden: Array2<f64>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, geometry: GeometryConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        geometry.validate()?;
        let layers = Layers::new(&config, &geometry);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.encoder.d_model;
        let dd = config.decoder.d_dec;
        for g in geometry.groups() {
            let sensor = &geometry.sensor_by_id(g.sensor_id).expect("validated").name;
            let s2 = g.patch_size * g.patch_size;
            for band in &g.band_names {
                let prefix = projection_prefix(&BandKey::new(sensor, band));
                let bound = 1.0 / (s2 as f64).sqrt();
                p.uniform(format!("{prefix}.w"), &[s2, d], bound, &mut rng);
                p.zeros(format!("{prefix}.b"), &[d]);
            }
        }
        layers.encoder.init(&mut p, d, config.encoder.hidden(), &mut rng);
        layers.dec_embed.init(&mut p, d, dd, &mut rng);
        p.uniform(MASK_TOKEN, &[dd], 0.02, &mut rng);
        layers.decoder.init(&mut p, dd, config.decoder.hidden(), &mut rng);
        for g in geometry.groups() {
            let out = g.band_names.len() * g.patch_size * g.patch_size;
            layers.heads[&g.id].init(&mut p, dd, out, &mut rng);
        }
        layers.cls.init(&mut p, d, config.n_classes, &mut rng);
        Ok(Self {
            config,
            geometry,
            params: p,
            layers,
        })
    }

    /// Rebuilds a model around existing parameters, checking every shape.
    pub fn from_parts(config: ModelConfig, geometry: GeometryConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), geometry.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(UsatError::Shape(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(UsatError::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    t.shape(),
                    got.shape()
                )));
            }
        }
        Ok(Self {
            params,
            ..reference
        })
    }

    /// Biases, norm parameters and the mask token.
    pub fn is_decay_exempt(name: &str) -> bool {
        name.ends_with(".b") || name.ends_with(".gamma") || name.ends_with(".beta") || name == MASK_TOKEN
    }

    pub fn is_pretrain_only(name: &str) -> bool {
        name.starts_with("dec.")
    }

    pub fn encodings(&self, subset: &BandSubset, mode: GroupIndexMode) -> Result<Encodings> {
        let ep = self.config.encoder_encoding_params()?.with_mode(mode);
        let dp = self.config.decoder_encoding_params()?.with_mode(mode);
        Ok(Encodings {
            encoder: compose(&self.geometry, subset, &ep, self.config.flags)?,
            decoder: compose(&self.geometry, subset, &dp, self.config.flags)?,
        })
    }

    pub fn embed(&self, sample: &Sample, subset: &BandSubset) -> Result<TokenBatch> {
        Ok(embed_sample_cached(sample, subset, &self.geometry, &self.params, self.config.pool)?.0)
    }

    fn encode_cached(
        &self,
        batch: &TokenBatch,
        encodings: ArrayView2<f64>,
        visible_only: bool,
    ) -> Result<(Array2<f64>, EncodeCache)> {
        if encodings.dim() != batch.tokens.dim() {
            return Err(UsatError::Shape(format!(
                "encodings {:?} do not match tokens {:?}",
                encodings.dim(),
                batch.tokens.dim()
            )));
        }
        let visible: Vec<usize> = if visible_only {
            batch.visible_indices()
        } else {
            (0..batch.len()).collect()
        };
        if visible.is_empty() {
            return Err(UsatError::Shape("no visible tokens".into()));
        }
        let x = &batch.tokens + &encodings;
        let xv = x.select(Axis(0), &visible);
        let (out, transformer) = self.layers.encoder.forward(&self.params, xv.view());
        Ok((out, EncodeCache { visible, transformer }))
    }

    /// Tokens plus encodings through the encoder; only unmasked tokens when `visible_only`.
    pub fn encode(&self, batch: &TokenBatch, encodings: ArrayView2<f64>, visible_only: bool) -> Result<Array2<f64>> {
        Ok(self.encode_cached(batch, encodings, visible_only)?.0)
    }

    fn decode_cached(
        &self,
        latents: ArrayView2<f64>,
        meta: &[TokenMeta],
        mask: &[bool],
        encodings: ArrayView2<f64>,
    ) -> Result<(BTreeMap<usize, Array2<f64>>, DecodeCache)> {
        let visible: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        let masked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        if latents.nrows() != visible.len() || meta.len() != mask.len() {
            return Err(UsatError::Shape(format!(
                "{} latents for {} visible tokens",
                latents.nrows(),
                visible.len()
            )));
        }
        let dd = self.config.decoder.d_dec;
        if encodings.dim() != (mask.len(), dd) {
            return Err(UsatError::Shape(format!(
                "decoder encodings {:?}, expected {:?}",
                encodings.dim(),
                (mask.len(), dd)
            )));
        }
        let y = self.layers.dec_embed.forward(&self.params, latents);
        let mut full = encodings.to_owned();
        let token = self.params.vector(MASK_TOKEN);
        for &i in &masked {
            let mut row = full.row_mut(i);
            row += &token;
        }
        for (k, &i) in visible.iter().enumerate() {
            let mut row = full.row_mut(i);
            row += &y.row(k);
        }
        let (hidden, transformer) = self.layers.decoder.forward(&self.params, full.view());
        let mut preds = BTreeMap::new();
        for (gid, start, n) in group_spans(meta) {
            let head = self
                .layers
                .heads
                .get(&gid)
                .ok_or_else(|| UsatError::Shape(format!("no head for group {gid}")))?;
            preds.insert(gid, head.forward(&self.params, hidden.slice(s![start..start + n, ..])));
        }
        Ok((
            preds,
            DecodeCache {
                latents: latents.to_owned(),
                visible,
                masked,
                transformer,
                hidden,
            },
        ))
    }

    /// Mask tokens at masked positions, encodings added, per-group pixel predictions.
    pub fn decode_and_reconstruct(
        &self,
        latents: ArrayView2<f64>,
        meta: &[TokenMeta],
        mask: &[bool],
        encodings: ArrayView2<f64>,
    ) -> Result<BTreeMap<usize, Array2<f64>>> {
        Ok(self.decode_cached(latents, meta, mask, encodings)?.0)
    }

    /// Mean over tokens, then the affine classifier.
    pub fn classify(&self, latents: ArrayView2<f64>) -> Result<Array1<f64>> {
        let pooled = mean_pool(latents)?;
        let logits = self
            .layers
            .cls
            .forward(&self.params, pooled.view().insert_axis(Axis(0)));
        Ok(logits.row(0).to_owned())
    }

    /// Pooled encoder features over all tokens of `subset`.
    pub fn features(&self, sample: &Sample, subset: &BandSubset, encodings: &Encodings) -> Result<Array1<f64>> {
        let batch = self.embed(sample, subset)?;
        let latents = self.encode(&batch, encodings.encoder.view(), false)?;
        mean_pool(latents.view())
    }

    pub fn predict_logits(&self, sample: &Sample, subset: &BandSubset, encodings: &Encodings) -> Result<Array1<f64>> {
        let batch = self.embed(sample, subset)?;
        let latents = self.encode(&batch, encodings.encoder.view(), false)?;
        self.classify(latents.view())
    }

    /// Reconstruction targets for each group represented in `meta`.
    pub fn targets(&self, sample: &Sample, subset: &BandSubset, meta: &[TokenMeta]) -> Result<Vec<GroupTarget>> {
        let mut out = Vec::new();
        for (gid, start, _) in group_spans(meta) {
            let g = self.geometry.group(gid).expect("group in meta");
            let sensor = &self.geometry.sensor_by_id(g.sensor_id).expect("validated").name;
            let s2 = g.patch_size * g.patch_size;
            let mut blocks = Vec::new();
            let mut columns = Vec::new();
            for (bi, band) in g.band_names.iter().enumerate() {
                if !subset.contains(sensor, band) {
                    continue;
                }
                let key = BandKey::new(sensor, band);
                let raster = sample
                    .rasters
                    .get(&key)
                    .ok_or_else(|| UsatError::UnknownBand(key.to_string()))?;
                blocks.push(patchify(raster.pixels.view(), g.patch_count, g.patch_size)?);
                columns.extend(bi * s2..(bi + 1) * s2);
            }
            let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            let values = ndarray::concatenate(Axis(1), &views).map_err(|e| UsatError::Shape(e.to_string()))?;
            out.push(GroupTarget {
                group_id: gid,
                start,
                values,
                columns,
            });
        }
        Ok(out)
    }

    /// Masked reconstruction loss for one sample; gradients are accumulated
    /// into `grads` when given.
    pub fn mae_step(
        &self,
        sample: &Sample,
        subset: &BandSubset,
        encodings: &Encodings,
        masks: &BTreeMap<usize, Vec<bool>>,
        grads: Option<&mut ParamStore>,
    ) -> Result<f64> {
        let (mut batch, ecache) = embed_sample_cached(sample, subset, &self.geometry, &self.params, self.config.pool)?;
        batch.mask = crate::masking::token_mask(&batch.meta, masks, &self.geometry);
        let (latents, enc_cache) = self.encode_cached(&batch, encodings.encoder.view(), true)?;
        let (preds, dec_cache) = self.decode_cached(latents.view(), &batch.meta, &batch.mask, encodings.decoder.view())?;
        let targets = self.targets(sample, subset, &batch.meta)?;
        let (loss, dpreds) = mae_loss_grad(&preds, &targets, &batch.mask, self.config.normalize_target)?;
        if let Some(g) = grads {
            let dlatents = self.decode_backward(&batch.meta, &dec_cache, &dpreds, g);
            let dx = self.layers.encoder.backward(&self.params, &enc_cache.transformer, dlatents.view(), g);
            let mut dtokens = Array2::zeros(batch.tokens.raw_dim());
            for (k, &i) in enc_cache.visible.iter().enumerate() {
                dtokens.row_mut(i).assign(&dx.row(k));
            }
            embed_backward(&ecache, dtokens.view(), g);
        }
        Ok(loss)
    }

    /// Predictions for masked patches mapped back to pixel units (per-patch
    /// mean and spread of the true patch when targets are normalized).
    pub fn reconstruct(
        &self,
        sample: &Sample,
        subset: &BandSubset,
        encodings: &Encodings,
        masks: &BTreeMap<usize, Vec<bool>>,
    ) -> Result<Vec<GroupReconstruction>> {
        let mut batch = self.embed(sample, subset)?;
        batch.mask = crate::masking::token_mask(&batch.meta, masks, &self.geometry);
        let latents = self.encode(&batch, encodings.encoder.view(), true)?;
        let preds = self.decode_and_reconstruct(latents.view(), &batch.meta, &batch.mask, encodings.decoder.view())?;
        let mut out = Vec::new();
        for t in self.targets(sample, subset, &batch.meta)? {
            let g = self.geometry.group(t.group_id).expect("group in meta");
            let sensor = &self.geometry.sensor_by_id(g.sensor_id).expect("validated").name;
            let s2 = g.patch_size * g.patch_size;
            let mut pred = preds[&t.group_id].select(Axis(1), &t.columns);
            if self.config.normalize_target {
                let n = t.values.ncols() as f64;
                for (mut p, v) in pred.rows_mut().into_iter().zip(t.values.rows()) {
                    let mean = v.sum() / n;
                    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                    let std = (var + TARGET_NORM_EPS).sqrt();
                    p.mapv_inplace(|x| x * std + mean);
                }
            }
            let bands: Vec<String> = g
                .band_names
                .iter()
                .filter(|b| subset.contains(sensor, b))
                .cloned()
                .collect();
            let split = |m: &Array2<f64>| -> Result<Vec<Array2<f64>>> {
                (0..bands.len())
                    .map(|k| unpatchify(m.slice(s![.., k * s2..(k + 1) * s2]), g.patch_count, g.patch_size))
                    .collect()
            };
            out.push(GroupReconstruction {
                group_id: t.group_id,
                truth: split(&t.values)?,
                pred: split(&pred)?,
                bands,
                masked: batch.mask[t.start..t.start + t.values.nrows()].to_vec(),
            });
        }
        Ok(out)
    }

    fn decode_backward(
        &self,
        meta: &[TokenMeta],
        cache: &DecodeCache,
        dpreds: &BTreeMap<usize, Array2<f64>>,
        g: &mut ParamStore,
    ) -> Array2<f64> {
        let mut dhidden = Array2::zeros(cache.hidden.raw_dim());
        for (gid, start, n) in group_spans(meta) {
            let head = &self.layers.heads[&gid];
            let dh = head.backward(
                &self.params,
                cache.hidden.slice(s![start..start + n, ..]),
                dpreds[&gid].view(),
                g,
            );
            dhidden.slice_mut(s![start..start + n, ..]).assign(&dh);
        }
        let dfull = self.layers.decoder.backward(&self.params, &cache.transformer, dhidden.view(), g);
        {
            let mut dtoken = g.vector_mut(MASK_TOKEN);
            for &i in &cache.masked {
                dtoken += &dfull.row(i);
            }
        }
        let dy = dfull.select(Axis(0), &cache.visible);
        self.layers
            .dec_embed
            .backward(&self.params, cache.latents.view(), dy.view(), g)
    }

    /// Binary cross-entropy over logits for one sample, full backward when
    /// `grads` is given.
    pub fn bce_step(
        &self,
        sample: &Sample,
        subset: &BandSubset,
        encodings: &Encodings,
        labels: &[f64],
        grads: Option<&mut ParamStore>,
    ) -> Result<f64> {
        let (batch, ecache) = embed_sample_cached(sample, subset, &self.geometry, &self.params, self.config.pool)?;
        let (latents, enc_cache) = self.encode_cached(&batch, encodings.encoder.view(), false)?;
        let pooled = mean_pool(latents.view())?;
        let pooled2 = pooled.view().insert_axis(Axis(0));
        let logits = self.layers.cls.forward(&self.params, pooled2);
        let (loss, dlogits) = bce_with_logits(logits.row(0), labels)?;
        if let Some(g) = grads {
            let dl = dlogits.view().insert_axis(Axis(0));
            let dpooled = self.layers.cls.backward(&self.params, pooled2, dl, g);
            let n = latents.nrows() as f64;
            let dlatents = Array2::from_shape_fn(latents.raw_dim(), |(_, j)| dpooled[[0, j]] / n);
            let dx = self.layers.encoder.backward(&self.params, &enc_cache.transformer, dlatents.view(), g);
            embed_backward(&ecache, dx.view(), g);
        }
        Ok(loss)
    }

    /// Classifier-only gradient on precomputed features (linear probe).
    pub fn probe_step(&self, features: &Array1<f64>, labels: &[f64], grads: Option<&mut ParamStore>) -> Result<f64> {
        let x = features.view().insert_axis(Axis(0));
        let logits = self.layers.cls.forward(&self.params, x);
        let (loss, dlogits) = bce_with_logits(logits.row(0), labels)?;
        if let Some(g) = grads {
            self.layers
                .cls
                .backward_params(x, dlogits.view().insert_axis(Axis(0)), g);
        }
        Ok(loss)
    }

    pub fn probe_logits(&self, features: &Array1<f64>) -> Array1<f64> {
        self.layers
            .cls
            .forward(&self.params, features.view().insert_axis(Axis(0)))
            .row(0)
            .to_owned()
    }

    /// Replaces the classifier with a freshly initialised one for `n_classes`.
    pub fn reset_classifier(&mut self, n_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.config.n_classes = n_classes;
        self.layers.cls.init(&mut self.params, self.config.encoder.d_model, n_classes, &mut rng);
    }
}

/// `(group id, first token, token count)` for each contiguous group run.
pub fn group_spans(meta: &[TokenMeta]) -> Vec<(usize, usize, usize)> {
    let mut spans: Vec<(usize, usize, usize)> = Vec::new();
    for (i, m) in meta.iter().enumerate() {
        match spans.last_mut() {
            Some((gid, _, n)) if *gid == m.group_id => *n += 1,
            _ => spans.push((m.group_id, i, 1)),
        }
    }
    spans
}

pub fn mean_pool(latents: ArrayView2<f64>) -> Result<Array1<f64>> {
    latents
        .mean_axis(Axis(0))
        .ok_or_else(|| UsatError::Shape("cannot pool zero tokens".into()))
}

/// Standardizes each row by its own mean and variance.
pub fn normalize_rows(values: &Array2<f64>) -> Array2<f64> {
    let mut out = values.clone();
    let n = values.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = (var + TARGET_NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) / std);
    }
    out
}

/// Mean squared error over masked tokens of each group, averaged over groups
/// that have at least one masked token.
pub fn mae_loss(
    preds: &BTreeMap<usize, Array2<f64>>,
    targets: &[GroupTarget],
    mask: &[bool],
    normalize_target: bool,
) -> Result<f64> {
    Ok(mae_loss_grad(preds, targets, mask, normalize_target)?.0)
}

/// Loss plus its gradient w.r.t. every prediction matrix.
pub fn mae_loss_grad(
    preds: &BTreeMap<usize, Array2<f64>>,
    targets: &[GroupTarget],
    mask: &[bool],
    normalize_target: bool,
) -> Result<(f64, BTreeMap<usize, Array2<f64>>)> {
    let active: Vec<&GroupTarget> = targets
        .iter()
        .filter(|t| (0..t.values.nrows()).any(|r| mask[t.start + r]))
        .collect();
    if active.is_empty() {
        return Err(UsatError::AllVisible);
    }
    let n_groups = active.len() as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<usize, Array2<f64>> = preds
        .iter()
        .map(|(k, v)| (*k, Array2::zeros(v.raw_dim())))
        .collect();
    for t in active {
        let pred = preds
            .get(&t.group_id)
            .ok_or_else(|| UsatError::Shape(format!("no prediction for group {}", t.group_id)))?;
        if pred.nrows() != t.values.nrows() || t.columns.iter().any(|&c| c >= pred.ncols()) {
            return Err(UsatError::Shape(format!(
                "group {}: prediction {:?} vs target {:?}",
                t.group_id,
                pred.dim(),
                t.values.dim()
            )));
        }
        let target = if normalize_target {
            normalize_rows(&t.values)
        } else {
            t.values.clone()
        };
        let masked_rows: Vec<usize> = (0..t.values.nrows()).filter(|&r| mask[t.start + r]).collect();
        let denom = (masked_rows.len() * t.columns.len()) as f64;
        let grad = grads.get_mut(&t.group_id).expect("allocated");
        let mut group_loss = 0.0;
        for &r in &masked_rows {
            for (k, &c) in t.columns.iter().enumerate() {
                let diff = pred[[r, c]] - target[[r, k]];
                group_loss += diff * diff;
                grad[[r, c]] = 2.0 * diff / (denom * n_groups);
            }
        }
        loss += group_loss / denom / n_groups;
    }
    Ok((loss, grads))
}

/// Mean over classes of binary cross-entropy with logits, and its gradient.
pub fn bce_with_logits(logits: ndarray::ArrayView1<f64>, labels: &[f64]) -> Result<(f64, Array1<f64>)> {
    if logits.len() != labels.len() {
        return Err(UsatError::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let c = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&z, &y)) in logits.iter().zip(labels).enumerate() {
        // softplus(z) - y z, computed stably
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        grad[i] = (sigmoid(z) - y) / c;
    }
    Ok((loss / c, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
