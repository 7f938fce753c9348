//! Pre-training and fine-tuning loops.
//!
//! Training is single-writer: per-sample forward/backward passes run in
//! parallel on a read-only model, their gradients are summed in sample order
//! (so results do not depend on thread scheduling), clipped, and applied by
//! one AdamW step.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::encodings::GroupIndexMode;
use crate::error::{Result, UsatError};
use crate::geometry::{BandSubset, GeometryConfig};
use crate::masking::{sample_masks, MaskPlan};
use crate::metrics::{EvalBatch, Metrics};
use crate::model::{sigmoid, Encodings, Model};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Schedule {
    /// Schedule expressed directly in steps.
    pub fn from_steps(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self {
            base_lr,
            warmup_epochs: warmup_steps,
            total_epochs: total_steps,
            steps_per_epoch: 1,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(UsatError::Range(format!("base lr {} must be positive", self.base_lr)));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(UsatError::Range(format!(
                "warmup {} exceeds total {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0 at the last step.
pub fn lr_at(step: usize, schedule: &Schedule) -> Result<f64> {
    schedule.validate()?;
    let warmup = schedule.warmup_steps();
    let total = schedule.total_steps();
    if step > total {
        return Err(UsatError::Range(format!("step {step} beyond {total}")));
    }
    if step < warmup {
        return Ok(schedule.base_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(if step == total && total > 0 { 0.0 } else { schedule.base_lr });
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(schedule.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Adam with decoupled weight decay. Biases, norm parameters and the mask
/// token are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Keep parameters representable as f32 after every update.
    pub round_to_f32: bool,
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            round_to_f32: true,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// Updates every parameter present in `grads` for which `trainable` holds.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let t = self.t + 1;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut updated: Vec<(String, ndarray::ArrayD<f64>, ndarray::ArrayD<f64>, ndarray::ArrayD<f64>)> = Vec::new();
        for (name, g) in grads.iter() {
            if !trainable(name) {
                continue;
            }
            let p = params.get(name)?;
            let mut m = self.m.get(name)?.clone();
            let mut v = self.v.get(name)?.clone();
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = if Model::is_decay_exempt(name) { 0.0 } else { self.weight_decay };
            let mut new_p = p.clone();
            ndarray::Zip::from(&mut new_p)
                .and(&m)
                .and(&v)
                .for_each(|p, &m, &v| {
                    let step = (m / bc1) / ((v / bc2).sqrt() + self.eps);
                    *p = *p * (1.0 - lr * decay) - lr * step;
                });
            if self.round_to_f32 {
                new_p.mapv_inplace(|x| x as f32 as f64);
            }
            if !new_p.iter().all(|x| x.is_finite()) {
                return Err(UsatError::NonFinite(format!("update of {name}")));
            }
            updated.push((name.clone(), new_p, m, v));
        }
        for (name, p, m, v) in updated {
            *params.get_mut(&name).expect("checked") = p;
            *self.m.get_mut(&name).expect("checked") = m;
            *self.v.get_mut(&name).expect("checked") = v;
        }
        self.t = t;
        Ok(())
    }
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Flips every raster of the sample identically.
pub fn flip(sample: &Sample, horizontal: bool, vertical: bool) -> Sample {
    sample.map_rasters(|px| {
        let mut out = px.clone();
        if horizontal {
            out.invert_axis(Axis(1));
        }
        if vertical {
            out.invert_axis(Axis(0));
        }
        out.as_standard_layout().to_owned()
    })
}

/// Horizontal and vertical flips, each with probability 0.5.
pub fn augment_flips<R: Rng>(sample: &Sample, rng: &mut R) -> Sample {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    flip(sample, h, v)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for one sample draw: root seed XOR a mix of (step, slot).
pub fn sample_seed(root: u64, step: usize, slot: usize) -> u64 {
    root ^ splitmix64(((step as u64) << 24) ^ slot as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    MicroAp,
    #[default]
    MacroAp,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub sensors: Option<Vec<String>>,
    pub bands: Option<Vec<String>>,
    pub mask_ratio: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub flips: bool,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
    /// Train only the classifier on frozen features.
    pub linear_probe: bool,
    pub group_index_mode: GroupIndexMode,
    pub select_metric: SelectMetric,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl RunConfig {
    pub fn pretrain() -> Self {
        Self {
            mode: Mode::Pretrain,
            sensors: None,
            bands: None,
            mask_ratio: 0.75,
            batch_size: 160,
            seed: 0,
            weight_decay: 0.05,
            flips: true,
            epochs: 25,
            warmup_epochs: 1,
            base_lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.95,
            clip_norm: 1.0,
            linear_probe: false,
            group_index_mode: GroupIndexMode::Pretrain,
            select_metric: SelectMetric::MacroAp,
            max_steps: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            mode: Mode::Finetune,
            batch_size: 40,
            weight_decay: 0.1,
            epochs: 10,
            warmup_epochs: 1,
            base_lr: 1e-4,
            beta2: 0.999,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(UsatError::Config("batch size must be positive".into()));
        }
        if self.mode == Mode::Pretrain && !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(UsatError::Ratio(self.mask_ratio));
        }
        if self.warmup_epochs > self.epochs {
            return Err(UsatError::Config(format!(
                "warmup {} exceeds {} epochs",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(UsatError::Config("learning rate and clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn subset(&self, geometry: &GeometryConfig) -> Result<BandSubset> {
        geometry.select(self.sensors.as_deref(), self.bands.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step={} lr={:.6e} loss={:.6}", self.step, self.lr, self.loss)
    }
}

pub struct PretrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// Set when training stopped on a non-finite loss or update; `model` is the last good state.
    pub aborted: Option<String>,
}

fn batches(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Samples used for training: the train split, or everything when it is empty.
fn training_samples(dataset: &Dataset) -> Vec<&Sample> {
    let train = dataset.split(Split::Train);
    if train.is_empty() {
        dataset.samples.iter().collect()
    } else {
        train
    }
}

/// Masked-autoencoder pre-training on an already normalized dataset.
pub fn pretrain(
    mut model: Model,
    dataset: &Dataset,
    run: &RunConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<PretrainOutcome> {
    run.validate()?;
    let subset = run.subset(&model.geometry)?;
    let encodings = model.encodings(&subset, GroupIndexMode::Pretrain)?;
    let plan = MaskPlan::new(&model.geometry, &subset, run.mask_ratio, run.seed)?;
    let samples = training_samples(dataset);
    if samples.is_empty() {
        return Err(UsatError::Config("dataset has no samples".into()));
    }
    check_samples(&model.geometry, &subset, &samples)?;
    let spe = batches(samples.len(), run.batch_size);
    let mut schedule = Schedule {
        base_lr: run.base_lr,
        warmup_epochs: run.warmup_epochs,
        total_epochs: run.epochs,
        steps_per_epoch: spe,
    };
    if run.max_steps > 0 && run.max_steps < schedule.total_steps() {
        schedule = Schedule::from_steps(
            run.base_lr,
            (run.warmup_epochs * spe).min(run.max_steps),
            run.max_steps,
        );
    }
    let total_steps = schedule.total_steps();
    let mut opt = AdamW::new(&model.params, run.beta1, run.beta2, run.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    'epochs: loop {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(run.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            let results: Vec<Result<(f64, ParamStore)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(run.seed, step, slot));
                    let sample = if run.flips {
                        augment_flips(samples[idx], &mut rng)
                    } else {
                        samples[idx].clone()
                    };
                    let masks = sample_masks(&plan, &model.geometry, &mut rng)?;
                    let mut grads = model.params.zeros_like();
                    let loss = model.mae_step(&sample, &subset, &encodings, &masks, Some(&mut grads))?;
                    Ok((loss, grads))
                })
                .collect();
            let mut total = model.params.zeros_like();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                total.add_assign(&g);
            }
            let n = chunk.len() as f64;
            loss /= n;
            total.scale(1.0 / n);
            if !loss.is_finite() || !total.all_finite() {
                return Ok(PretrainOutcome {
                    model,
                    log,
                    aborted: Some(format!("non-finite loss or gradient at step {step}")),
                });
            }
            clip_grad_norm(&mut total, run.clip_norm);
            let lr = lr_at(step, &schedule)?;
            let mut next = model.params.clone();
            if let Err(e) = opt.step(&mut next, &total, lr, |_| true) {
                return Ok(PretrainOutcome {
                    model,
                    log,
                    aborted: Some(e.to_string()),
                });
            }
            model.params = next;
            let entry = StepLog { step, lr, loss };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
        if step >= total_steps || total_steps == 0 {
            break;
        }
    }
    Ok(PretrainOutcome {
        model,
        log,
        aborted: None,
    })
}

/// Mean masked reconstruction loss with masks fixed by `seed`, no augmentation.
pub fn mae_eval_loss(model: &Model, samples: &[&Sample], subset: &BandSubset, ratio: f64, seed: u64) -> Result<f64> {
    let encodings = model.encodings(subset, GroupIndexMode::Pretrain)?;
    let plan = MaskPlan::new(&model.geometry, subset, ratio, seed)?;
    let losses = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, usize::MAX >> 8, i));
            let masks = sample_masks(&plan, &model.geometry, &mut rng)?;
            model.mae_step(s, subset, &encodings, &masks, None)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Every selected band is present with the side its group expects.
pub fn check_samples(geometry: &GeometryConfig, subset: &BandSubset, samples: &[&Sample]) -> Result<()> {
    for s in samples {
        for key in subset.keys() {
            let g = geometry.group_of(&key.sensor, &key.band).expect("subset is validated");
            let r = s
                .rasters
                .get(key)
                .ok_or_else(|| UsatError::UnknownBand(format!("{key} missing from sample {}", s.id)))?;
            if r.pixels.dim() != (g.side(), g.side()) {
                return Err(UsatError::GeometryMismatch(format!(
                    "{key} in sample {} is {:?}, geometry expects {}x{}",
                    s.id,
                    r.pixels.dim(),
                    g.side(),
                    g.side()
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransferReport {
    pub transferred: Vec<String>,
    pub skipped: Vec<String>,
}

/// Copies encoder-side weights from `source`: projections only for bands in
/// `subset`; decoder, reconstruction heads and classifier stay fresh.
pub fn transfer_weights(source: &Model, target: &mut Model, subset: &BandSubset) -> Result<TransferReport> {
    if source.geometry.footprint.fine_patch_extent_m != target.geometry.footprint.fine_patch_extent_m
        || source.geometry.footprint.max_footprint_m != target.geometry.footprint.max_footprint_m
    {
        return Err(UsatError::GeometryMismatch(
            "reference patch extent and max footprint must match the checkpoint".into(),
        ));
    }
    let wanted: Vec<String> = subset
        .keys()
        .iter()
        .map(crate::patch_embed::projection_prefix)
        .collect();
    let mut report = TransferReport::default();
    let names: Vec<String> = target.params.names().cloned().collect();
    for name in names {
        let eligible = if name.starts_with("proj.") {
            wanted.iter().any(|w| name.strip_prefix(w.as_str()).is_some_and(|rest| rest.starts_with('.')))
        } else {
            !Model::is_pretrain_only(&name) && !name.starts_with("cls.")
        };
        match (eligible, source.params.get(&name).ok()) {
            (true, Some(src)) if src.shape() == target.params.get(&name)?.shape() => {
                *target.params.get_mut(&name).expect("listed") = src.clone();
                report.transferred.push(name);
            }
            _ => report.skipped.push(name),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub metrics: Metrics,
}

pub struct FinetuneOutcome {
    pub model: Model,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochMetrics>,
    pub transfer: TransferReport,
    pub log: Vec<StepLog>,
}

fn selected(metrics: &Metrics, which: SelectMetric) -> f64 {
    match which {
        SelectMetric::MicroAp => metrics.micro_ap,
        SelectMetric::MacroAp => metrics.macro_ap,
        SelectMetric::Accuracy => metrics.accuracy,
    }
    .unwrap_or(f64::NEG_INFINITY)
}

/// Scores (sigmoid of logits) and metrics for `samples`.
pub fn evaluate(model: &Model, samples: &[&Sample], subset: &BandSubset, mode: GroupIndexMode) -> Result<Metrics> {
    let encodings = model.encodings(subset, mode)?;
    let logits = samples
        .par_iter()
        .map(|s| model.predict_logits(s, subset, &encodings))
        .collect::<Result<Vec<_>>>()?;
    metrics_from_logits(&logits, samples)
}

fn metrics_from_logits(logits: &[Array1<f64>], samples: &[&Sample]) -> Result<Metrics> {
    let n = samples.len();
    let c = logits.first().map(|l| l.len()).unwrap_or(0);
    let scores = Array2::from_shape_fn((n, c), |(i, j)| sigmoid(logits[i][j]));
    let labels = Array2::from_shape_fn((n, c), |(i, j)| samples[i].labels[j]);
    Ok(Metrics::compute(&EvalBatch::new(scores, labels)?))
}

/// Multi-label fine-tuning with binary cross-entropy, keeping the epoch with
/// the best validation metric.
///
/// `source` is the pre-trained model, or `None` to train from random init.
/// Without a validation split the training split is used for selection.
pub fn finetune(
    source: Option<&Model>,
    fresh: Model,
    dataset: &Dataset,
    run: &RunConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<FinetuneOutcome> {
    run.validate()?;
    let mut model = fresh;
    if model.config.n_classes != dataset.classes.len() {
        model.reset_classifier(dataset.classes.len(), run.seed);
    }
    let subset = run.subset(&model.geometry)?;
    let transfer = match source {
        Some(src) => transfer_weights(src, &mut model, &subset)?,
        None => TransferReport::default(),
    };
    let train = training_samples(dataset);
    let val_split = dataset.split(Split::Val);
    let val = if val_split.is_empty() { train.clone() } else { val_split };
    check_samples(&model.geometry, &subset, &train)?;
    check_samples(&model.geometry, &subset, &val)?;
    let encodings = model.encodings(&subset, run.group_index_mode)?;

    let spe = batches(train.len(), run.batch_size);
    let schedule = Schedule {
        base_lr: run.base_lr,
        warmup_epochs: run.warmup_epochs,
        total_epochs: run.epochs,
        steps_per_epoch: spe,
    };
    let mut opt = AdamW::new(&model.params, run.beta1, run.beta2, run.weight_decay);
    let mut order_rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5EED);

    let probe_features = if run.linear_probe {
        Some((features(&model, &train, &subset, &encodings)?, features(&model, &val, &subset, &encodings)?))
    } else {
        None
    };

    let evaluate_now = |model: &Model| -> Result<Metrics> {
        match &probe_features {
            Some((_, vf)) => {
                let logits: Vec<Array1<f64>> = vf.iter().map(|f| model.probe_logits(f)).collect();
                metrics_from_logits(&logits, &val)
            }
            None => evaluate(model, &val, &subset, run.group_index_mode),
        }
    };

    let mut best = (0usize, selected(&evaluate_now(&model)?, run.select_metric), model.params.clone());
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=run.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(run.batch_size) {
            let results: Vec<Result<(f64, ParamStore)>> = chunk
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let mut grads = model.params.zeros_like();
                    let labels = &train[idx].labels;
                    let loss = match &probe_features {
                        Some((tf, _)) => model.probe_step(&tf[idx], labels, Some(&mut grads))?,
                        None => {
                            let sample = if run.flips {
                                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(run.seed, step, slot));
                                augment_flips(train[idx], &mut rng)
                            } else {
                                train[idx].clone()
                            };
                            model.bce_step(&sample, &subset, &encodings, labels, Some(&mut grads))?
                        }
                    };
                    Ok((loss, grads))
                })
                .collect();
            let mut total = model.params.zeros_like();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                total.add_assign(&g);
            }
            let n = chunk.len() as f64;
            loss /= n;
            total.scale(1.0 / n);
            if !loss.is_finite() || !total.all_finite() {
                return Err(UsatError::NonFinite(format!("loss or gradient at step {step}")));
            }
            clip_grad_norm(&mut total, run.clip_norm);
            let lr = lr_at(step, &schedule)?;
            let probe = run.linear_probe;
            opt.step(&mut model.params, &total, lr, |name| !probe || name.starts_with("cls."))?;
            let entry = StepLog { step, lr, loss };
            on_step(&entry);
            log.push(entry);
            epoch_loss += loss * n;
            step += 1;
        }
        let metrics = evaluate_now(&model)?;
        let score = selected(&metrics, run.select_metric);
        if score > best.1 {
            best = (epoch, score, model.params.clone());
        }
        history.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            metrics,
        });
    }
    model.params = best.2;
    Ok(FinetuneOutcome {
        model,
        best_epoch: best.0,
        best_metric: best.1,
        history,
        transfer,
        log,
    })
}

fn features(model: &Model, samples: &[&Sample], subset: &BandSubset, encodings: &Encodings) -> Result<Vec<Array1<f64>>> {
    samples
        .par_iter()
        .map(|s| model.features(s, subset, encodings))
        .collect()
}
