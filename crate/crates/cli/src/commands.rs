use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use serde_json::json;
use usat::checkpoint::{Checkpoint, RunInfo, Stage};
use usat::data::synth::synth_generate;
use usat::data::{pair_stores, Dataset, Split, Store};
use usat::encodings::{similarity_map, GroupIndexMode};
use usat::masking::{mask_rng, sample_masks, MaskPlan};
use usat::model::GroupReconstruction;
use usat::training::{evaluate, finetune, pretrain, sample_seed, RunConfig, StepLog};
use usat::{BandSubset, GeometryConfig, Model, UsatError};

use crate::config::CliConfig;
use crate::pnm;
use crate::{Cli, Command, Common, Failure, SplitArg};

type Outcome = std::result::Result<(), Failure>;

fn required<'a>(path: &'a Option<PathBuf>, flag: &str) -> std::result::Result<&'a Path, Failure> {
    path.as_deref()
        .ok_or_else(|| Failure::Validation(format!("--{flag} is required")))
}

fn geometry(common: &Common, config: &CliConfig) -> GeometryConfig {
    common.geometry.map(|g| g.build()).unwrap_or_else(|| config.geometry.clone())
}

fn root_seed(common: &Common, config: &CliConfig) -> std::result::Result<u64, Failure> {
    Ok(common.seed.unwrap_or(config.run_config(RunConfig::pretrain())?.seed))
}

/// File values overlaid by flags.
fn run_config(common: &Common, config: &CliConfig, defaults: RunConfig) -> std::result::Result<RunConfig, Failure> {
    let mut run = config.run_config(defaults)?;
    if let Some(s) = common.seed {
        run.seed = s;
    }
    if common.bands.is_some() {
        run.bands = common.bands.clone();
    }
    if common.sensors.is_some() {
        run.sensors = common.sensors.clone();
    }
    if let Some(r) = common.mask_ratio {
        run.mask_ratio = r;
    }
    if let Some(e) = common.epochs {
        run.epochs = e;
        run.warmup_epochs = run.warmup_epochs.min(e);
    }
    if let Some(b) = common.batch_size {
        run.batch_size = b;
    }
    if let Some(lr) = common.lr {
        run.base_lr = lr;
    }
    if let Some(m) = common.max_steps {
        run.max_steps = m;
    }
    if let Some(m) = common.group_index_mode {
        run.group_index_mode = m.into();
    }
    run.validate()?;
    Ok(run)
}

fn config_with_preset(common: &Common, config: &CliConfig) -> CliConfig {
    let mut c = config.clone();
    if let Some(p) = common.preset {
        c.model.preset = p.into();
        c.model.encoder = None;
        c.model.decoder = None;
    }
    c
}

fn write_json(path: &Path, value: &serde_json::Value) -> std::io::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json value serializes") + "\n")
}

fn write_log(path: &Path, log: &[StepLog]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for entry in log {
        writeln!(f, "{entry}")?;
    }
    f.flush()
}

/// Bands from flags when given, otherwise the ones recorded in the checkpoint.
fn subset_for(common: &Common, ckpt: &Checkpoint) -> std::result::Result<BandSubset, Failure> {
    let geo = &ckpt.model.geometry;
    if common.bands.is_some() || common.sensors.is_some() {
        Ok(geo.select(common.sensors.as_deref(), common.bands.as_deref())?)
    } else {
        Ok(geo.subset(ckpt.run.bands.clone())?)
    }
}

fn load_checked(data: &Path, classes: &[String]) -> std::result::Result<Dataset, Failure> {
    let ds = Store::open(data)?.load_dataset()?;
    if ds.classes != classes {
        return Err(Failure::Validation(format!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            ds.classes, classes
        )));
    }
    Ok(ds)
}

pub fn run(cli: &Cli, config: &CliConfig) -> Outcome {
    let common = &cli.common;
    let seed = root_seed(common, config)?;
    info!("seed={seed}");
    match &cli.command {
        Command::Synth { n } => synth(common, config, *n, seed),
        Command::Pair {
            fine,
            coarse,
            fine_sensor,
            coarse_sensor,
        } => pair(common, config, fine, coarse, fine_sensor, coarse_sensor),
        Command::Pretrain => pretrain_cmd(common, config),
        Command::Finetune { ckpt, linear_probe } => finetune_cmd(common, config, ckpt.as_deref(), *linear_probe),
        Command::Evaluate { ckpt, split } => evaluate_cmd(common, ckpt, *split),
        Command::Reconstruct { ckpt, n } => reconstruct(common, config, ckpt, *n, seed),
        Command::Encviz { ckpt, group } => encviz(common, config, ckpt.as_deref(), *group),
    }
}

fn synth(common: &Common, config: &CliConfig, n: Option<usize>, seed: u64) -> Outcome {
    let out = required(&common.out, "out")?;
    let geo = geometry(common, config);
    let n = n.unwrap_or(config.data.n_samples);
    let ds = synth_generate(seed, n, &geo, &config.data.synth)?;
    let store = ds.write_store(out)?;
    info!("wrote {} samples to {}", store.manifest.samples.len(), out.display());
    println!(
        "{}",
        json!({"samples": store.manifest.samples.len(), "records": store.manifest.records.len(), "classes": ds.classes})
    );
    Ok(())
}

fn pair(
    common: &Common,
    config: &CliConfig,
    fine: &Path,
    coarse: &Path,
    fine_sensor: &str,
    coarse_sensor: &str,
) -> Outcome {
    let out = required(&common.out, "out")?;
    let geo = geometry(common, config);
    for s in [fine_sensor, coarse_sensor] {
        if geo.sensor(s).is_none() {
            return Err(Failure::Validation(format!("sensor {s} is not in the geometry")));
        }
    }
    let report = pair_stores(&Store::open(fine)?, &Store::open(coarse)?, out, &geo, fine_sensor, coarse_sensor)?;
    info!("paired {} of {} {fine_sensor} records", report.written, report.fine_records);
    println!(
        "{}",
        json!({
            "fine_records": report.fine_records,
            "paired": report.paired,
            "missing_bands": report.missing_bands,
            "written": report.written,
        })
    );
    Ok(())
}

fn pretrain_cmd(common: &Common, config: &CliConfig) -> Outcome {
    let data = required(&common.data, "data")?;
    let out = required(&common.out, "out")?;
    let config = config_with_preset(common, config);
    let run = run_config(common, &config, RunConfig::pretrain())?;
    let geo = geometry(common, &config);
    let ds = Store::open(data)?.load_dataset()?;
    let model = Model::new(config.model_config(ds.classes.len())?, geo, run.seed)?;
    let subset = run.subset(&model.geometry)?;
    info!(
        "pretraining on {} samples, {} parameters",
        ds.samples.len(),
        model.params.num_scalars()
    );
    let outcome = pretrain(model, &ds.normalized(), &run, |s| info!("{s}"))?;
    fs::create_dir_all(out)?;
    write_log(&out.join("train.log"), &outcome.log)?;
    let ckpt = Checkpoint {
        model: outcome.model,
        norm_stats: ds.norm_stats.clone(),
        classes: ds.classes.clone(),
        run: RunInfo {
            stage: Stage::Pretrain,
            bands: subset.keys().to_vec(),
            group_index_mode: GroupIndexMode::Pretrain,
            steps: outcome.log.len(),
            seed: run.seed,
        },
    };
    ckpt.save(out)?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "steps": outcome.log.len(),
            "final_loss": outcome.log.last().map(|s| s.loss),
            "aborted": outcome.aborted,
        }),
    )?;
    match outcome.aborted {
        Some(reason) => Err(Failure::Runtime(format!("{reason}; last good checkpoint saved"))),
        None => Ok(()),
    }
}

fn finetune_cmd(common: &Common, config: &CliConfig, ckpt: Option<&Path>, linear_probe: bool) -> Outcome {
    let data = required(&common.data, "data")?;
    let out = required(&common.out, "out")?;
    let config = config_with_preset(common, config);
    let mut run = run_config(common, &config, RunConfig::finetune())?;
    run.linear_probe |= linear_probe;
    let source = ckpt.map(Checkpoint::load).transpose()?;
    let ds = Store::open(data)?.load_dataset()?;
    let (geo, mut model_cfg, stats) = match &source {
        Some(c) => (c.model.geometry.clone(), c.model.config.clone(), c.norm_stats.clone()),
        None => (geometry(common, &config), config.model_config(0)?, ds.norm_stats.clone()),
    };
    model_cfg.n_classes = ds.classes.len();
    let fresh = Model::new(model_cfg, geo, run.seed)?;
    let subset = run.subset(&fresh.geometry)?;
    let outcome = finetune(source.as_ref().map(|c| &c.model), fresh, &ds.normalized_with(&stats), &run, |s| {
        info!("{s}")
    })?;
    info!(
        "best epoch {} ({:?} {:.4}), {} tensors transferred",
        outcome.best_epoch,
        run.select_metric,
        outcome.best_metric,
        outcome.transfer.transferred.len()
    );
    fs::create_dir_all(out)?;
    write_log(&out.join("train.log"), &outcome.log)?;
    Checkpoint {
        model: outcome.model,
        norm_stats: stats,
        classes: ds.classes.clone(),
        run: RunInfo {
            stage: Stage::Finetune,
            bands: subset.keys().to_vec(),
            group_index_mode: run.group_index_mode,
            steps: outcome.log.len(),
            seed: run.seed,
        },
    }
    .save(out)?;
    write_json(
        &out.join("metrics.json"),
        &json!({
            "best_epoch": outcome.best_epoch,
            "select_metric": run.select_metric,
            "best_metric": outcome.best_metric,
            "history": outcome.history,
            "transferred": outcome.transfer.transferred,
        }),
    )?;
    Ok(())
}

fn evaluate_cmd(common: &Common, ckpt: &Path, split: SplitArg) -> Outcome {
    let data = required(&common.data, "data")?;
    let ckpt = Checkpoint::load(ckpt)?;
    let subset = subset_for(common, &ckpt)?;
    let mode = common.group_index_mode.map(Into::into).unwrap_or(ckpt.run.group_index_mode);
    let ds = load_checked(data, &ckpt.classes)?.normalized_with(&ckpt.norm_stats);
    let mut samples = match split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Val => ds.split(Split::Val),
        SplitArg::All => ds.samples.iter().collect(),
    };
    if samples.is_empty() {
        log::warn!("split {split:?} is empty, evaluating on all samples");
        samples = ds.samples.iter().collect();
    }
    usat::training::check_samples(&ckpt.model.geometry, &subset, &samples)?;
    let metrics = evaluate(&ckpt.model, &samples, &subset, mode)?;
    let value = json!({
        "bands": subset.keys().iter().map(|k| k.to_string()).collect::<Vec<_>>(),
        "classes": ckpt.classes,
        "micro_ap": metrics.micro_ap,
        "macro_ap": metrics.macro_ap,
        "accuracy": metrics.accuracy,
        "n_samples": metrics.n_samples,
        "per_class_ap": metrics.per_class_ap,
    });
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("metrics.json"), &value)?;
    }
    println!("{}", serde_json::to_string_pretty(&value).expect("json value serializes"));
    Ok(())
}

/// Expands a per-patch flag to pixels of a `p*s` square image.
fn pixel_mask(masked: &[bool], p: usize, s: usize) -> Array2<bool> {
    Array2::from_shape_fn((p * s, p * s), |(r, c)| masked[(r / s) * p + c / s])
}

/// Panels: input with masked patches blanked, prediction on masked patches over
/// visible input, and the full input.
fn triptych(rec: &GroupReconstruction, band: usize, mask: &Array2<bool>) -> Array2<u8> {
    let truth = &rec.truth[band];
    let (lo, hi) = pnm::min_max(truth);
    let masked = pnm::to_u8(&ndarray::Zip::from(truth).and(mask).map_collect(|&t, &m| if m { lo } else { t }), lo, hi);
    let pasted = ndarray::Zip::from(truth)
        .and(&rec.pred[band])
        .and(mask)
        .map_collect(|&t, &p, &m| if m { p } else { t });
    pnm::hstack(&[masked, pnm::to_u8(&pasted, lo, hi), pnm::to_u8(truth, lo, hi)], 2)
}

fn reconstruct(common: &Common, config: &CliConfig, ckpt: &Path, n: usize, seed: u64) -> Outcome {
    let data = required(&common.data, "data")?;
    let out = required(&common.out, "out")?;
    let ckpt = Checkpoint::load(ckpt)?;
    let model = &ckpt.model;
    let subset = subset_for(common, &ckpt)?;
    let ratio = match common.mask_ratio {
        Some(r) => r,
        None => config.run_config(RunConfig::pretrain())?.mask_ratio,
    };
    let ds = load_checked(data, &ckpt.classes)?.normalized_with(&ckpt.norm_stats);
    let samples: Vec<_> = ds.samples.iter().take(n).collect();
    usat::training::check_samples(&model.geometry, &subset, &samples)?;
    let encodings = model.encodings(&subset, GroupIndexMode::Pretrain)?;
    let plan = MaskPlan::new(&model.geometry, &subset, ratio, seed)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        let mut rng = mask_rng(sample_seed(seed, 0, i));
        let masks = sample_masks(&plan, &model.geometry, &mut rng)?;
        for rec in model.reconstruct(sample, &subset, &encodings, &masks)? {
            let g = model.geometry.group(rec.group_id).expect("reconstructed group exists");
            let mask = pixel_mask(&rec.masked, g.patch_count, g.patch_size);
            let path = if rec.bands.len() >= 3 {
                let [r, gr, b] = [0, 1, 2].map(|k| triptych(&rec, k, &mask));
                let path = out.join(format!("{}_g{}.ppm", sample.id, rec.group_id));
                pnm::write_ppm(&path, [&r, &gr, &b])?;
                path
            } else {
                let path = out.join(format!("{}_g{}.pgm", sample.id, rec.group_id));
                pnm::write_pgm(&path, &triptych(&rec, 0, &mask))?;
                path
            };
            files.push(path.file_name().expect("file path").to_string_lossy().into_owned());
        }
    }
    info!("wrote {} triptychs to {}", files.len(), out.display());
    println!("{}", json!({ "files": files }));
    Ok(())
}

fn encviz(common: &Common, config: &CliConfig, ckpt: Option<&Path>, group: Option<usize>) -> Outcome {
    let out = required(&common.out, "out")?;
    let (geo, model_cfg) = match ckpt {
        Some(dir) => {
            let c = Checkpoint::load(dir)?;
            (c.model.geometry, c.model.config)
        }
        None => {
            let config = config_with_preset(common, config);
            (geometry(common, &config), config.model_config(0)?)
        }
    };
    let params = model_cfg.encoder_encoding_params()?;
    let g = match group {
        Some(id) => geo
            .group(id)
            .ok_or_else(|| Failure::Validation(format!("no spectral group {id}")))?,
        None => geo
            .groups()
            .into_iter()
            .min_by_key(|g| (g.patch_count, std::cmp::Reverse(g.id)))
            .ok_or_else(|| Failure::Validation(UsatError::EmptySubset.to_string()))?,
    };
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for i in 0..g.patch_count {
        for j in 0..g.patch_count {
            let map = similarity_map(g, &geo.footprint, params.pos_dim, params.omega, i, j)?;
            let name = format!("sim_{i}_{j}.pgm");
            pnm::write_pgm(&out.join(&name), &pnm::to_u8(&map, -1.0, 1.0))?;
            files.push(name);
        }
    }
    info!("wrote {} similarity maps for group {}", files.len(), g.id);
    println!("{}", json!({ "group": g.id, "files": files }));
    Ok(())
}
