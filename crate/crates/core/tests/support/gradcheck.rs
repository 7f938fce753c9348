//! Analytic gradients against central differences on a small double-precision model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usat::data::synth::{synth_generate, SynthConfig};
use usat::data::Sample;
use usat::encodings::GroupIndexMode;
use usat::masking::{sample_masks, MaskPlan};
use usat::model::{DecoderConfig, EncoderConfig};
use usat::params::ParamStore;
use usat::{GeometryConfig, Model, ModelConfig, Preset};

pub const EPS: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub enum Loss {
    Mae,
    Classification,
}

fn fixture() -> (GeometryConfig, Sample, Model) {
    let geo = GeometryConfig::desk();
    let cfg = SynthConfig { n_classes: 4, ..Default::default() };
    let ds = synth_generate(11, 1, &geo, &cfg).unwrap().to_dataset().normalized();
    let mut model_cfg = ModelConfig::preset(Preset::Tiny, 4);
    model_cfg.encoder = EncoderConfig { depth: 2, d_model: 32, n_heads: 2, mlp_ratio: 2.0 };
    model_cfg.decoder = DecoderConfig { depth: 2, d_dec: 16, n_heads: 2, mlp_ratio: 2.0 };
    let model = Model::new(model_cfg, geo.clone(), 3).unwrap();
    (geo, ds.samples[0].clone(), model)
}

/// Entries probed per tensor: the two largest analytic components plus two random ones.
fn probe_indices(g: &ndarray::ArrayD<f64>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let flat: Vec<f64> = g.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()));
    let mut idx: Vec<usize> = order.into_iter().take(2).collect();
    for _ in 0..2 {
        idx.push(rng.random_range(0..flat.len()));
    }
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Relative error per parameter block (tensor name up to its last '.'),
/// over every block that receives a gradient.
pub fn block_errors(kind: Loss) -> BTreeMap<String, f64> {
    let (geo, sample, mut model) = fixture();
    let subset = geo.all_bands();
    let loss: Box<dyn Fn(&Model, Option<&mut ParamStore>) -> f64> = match kind {
        Loss::Mae => {
            let enc = model.encodings(&subset, GroupIndexMode::Pretrain).unwrap();
            let plan = MaskPlan::new(&geo, &subset, 0.75, 0).unwrap();
            let masks = sample_masks(&plan, &geo, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let subset = subset.clone();
            Box::new(move |m, g| m.mae_step(&sample, &subset, &enc, &masks, g).unwrap())
        }
        Loss::Classification => {
            let enc = model.encodings(&subset, GroupIndexMode::Finetune).unwrap();
            let labels = sample.labels.clone();
            let subset = subset.clone();
            Box::new(move |m, g| m.bce_step(&sample, &subset, &enc, &labels, g).unwrap())
        }
    };

    let mut grads = model.params.zeros_like();
    loss(&model, Some(&mut grads));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let names: Vec<String> = model.params.names().cloned().collect();
    let mut sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for name in &names {
        let g = grads.get(name).unwrap().clone();
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let block = name.rsplit_once('.').map(|(b, _)| b.to_string()).unwrap_or(name.clone());
        for i in probe_indices(&g, &mut rng) {
            let orig = model.params.get(name).unwrap().as_slice().unwrap()[i];
            let mut at = |v: f64| {
                model.params.get_mut(name).unwrap().as_slice_mut().unwrap()[i] = v;
                loss(&model, None)
            };
            let up = at(orig + EPS);
            let down = at(orig - EPS);
            at(orig);
            let numeric = (up - down) / (2.0 * EPS);
            let analytic = g.as_slice().unwrap()[i];
            let e = sums.entry(block.clone()).or_default();
            e.0 += (numeric - analytic).powi(2);
            e.1 += numeric.powi(2).max(analytic.powi(2));
        }
    }
    sums.into_iter()
        .map(|(block, (diff, scale))| (block, (diff / scale.max(1e-30)).sqrt()))
        .collect()
}
