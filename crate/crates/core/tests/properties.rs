use ndarray::Array2;
use proptest::prelude::*;
use usat::data::raster::bilinear_resample;
use usat::encodings::{posenc_2d, reference_encodings, sincos_1d, superpositional};
use usat::geometry::{FootprintConfig, SpectralGroup};
use usat::masking::{mask_count, mask_rng, sample_masks, MaskPlan};
use usat::metrics::average_precision;
use usat::model::normalize_rows;
use usat::params::ParamStore;
use usat::patch_embed::{patchify, unpatchify};
use usat::training::{clip_grad_norm, lr_at, Schedule};
use usat::GeometryConfig;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-10.0..10.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trips((p, s, px) in (1usize..6, 1usize..6).prop_flat_map(|(p, s)| (Just(p), Just(s), matrix(p * s, p * s)))) {
        let patches = patchify(px.view(), p, s).unwrap();
        prop_assert_eq!(patches.dim(), (p * p, s * s));
        prop_assert_eq!(unpatchify(patches.view(), p, s).unwrap(), px);
    }

    #[test]
    fn every_group_loses_its_exact_count(ratio in 0.01..0.99f64, seed: u64) {
        let geo = GeometryConfig::usatlas();
        let subset = geo.all_bands();
        prop_assume!(geo.groups().iter().all(|g| mask_count(g.patch_count, ratio).unwrap() < g.num_patches()));
        let plan = MaskPlan::new(&geo, &subset, ratio, seed).unwrap();
        let masks = sample_masks(&plan, &geo, &mut mask_rng(seed)).unwrap();
        for g in geo.groups() {
            let n = masks[&g.id].iter().filter(|&&m| m).count();
            prop_assert_eq!(n, ((g.num_patches() as f64) * ratio).floor() as usize);
        }
    }

    #[test]
    fn schedule_is_bounded_and_unimodal(base in 1e-6..1.0f64, warmup in 0usize..4, extra in 0usize..6, per_epoch in 1usize..5) {
        let schedule = Schedule { base_lr: base, warmup_epochs: warmup, total_epochs: warmup + extra, steps_per_epoch: per_epoch };
        let total = schedule.total_steps();
        let lrs: Vec<f64> = (0..=total).map(|s| lr_at(s, &schedule).unwrap()).collect();
        for (s, lr) in lrs.iter().enumerate() {
            prop_assert!(*lr >= 0.0 && *lr <= base * (1.0 + 1e-12), "step {} lr {}", s, lr);
        }
        let w = schedule.warmup_steps();
        for s in 1..lrs.len() {
            if s <= w && s < total {
                prop_assert!(lrs[s] >= lrs[s - 1]);
            } else {
                prop_assert!(lrs[s] <= lrs[s - 1] + 1e-15);
            }
        }
        prop_assert!(lr_at(total + 1, &schedule).is_err());
    }

    #[test]
    fn ap_ignores_monotone_rescaling(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 1..40),
        scale in 0.1..10.0f64,
        shift in -5.0..5.0f64,
    ) {
        prop_assume!(pairs.iter().any(|p| p.1));
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let labels: Vec<f64> = pairs.iter().map(|p| f64::from(p.1 as u8)).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        let moved: Vec<f64> = scores.iter().map(|s| (s * scale + shift).exp()).collect();
        prop_assert_eq!(average_precision(&moved, &labels).unwrap(), ap);
    }

    #[test]
    fn normalized_rows_are_standard(m in matrix(5, 16)) {
        let n = normalize_rows(&m);
        for (row, orig) in n.rows().into_iter().zip(m.rows()) {
            let mean = row.sum() / 16.0;
            prop_assert!(mean.abs() < 1e-9);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
            let raw = orig.iter().map(|v| v * v).sum::<f64>() / 16.0 - (orig.sum() / 16.0).powi(2);
            prop_assert!((var - raw / (raw + 1e-6)).abs() < 1e-6);
        }
    }

    #[test]
    fn sincos_pairs_lie_on_unit_circle(pos in -1e4..1e4f64, half in 1usize..64) {
        let e = sincos_1d(pos, 2 * half, 1e4).unwrap();
        for pair in e.chunks(2) {
            prop_assert!((pair[0].powi(2) + pair[1].powi(2) - 1.0).abs() < 1e-12);
        }
        let two = posenc_2d(pos, pos, 4 * half, 1e4).unwrap();
        prop_assert_eq!(&two[..2 * half], &two[2 * half..]);
    }

    #[test]
    fn superposition_preserves_the_grid_mean(k in 0u32..4, j in 0u32..3, quarter in 1usize..12) {
        let p_ref = 2usize.pow(k + j);
        let p = 2usize.pow(k);
        let footprint = FootprintConfig {
            max_footprint_m: 1280.0,
            image_footprint_m: 320.0,
            fine_patch_extent_m: 320.0 / p_ref as f64,
            reference_group: 0,
        };
        let group = SpectralGroup { id: 1, sensor_id: 0, band_names: vec!["b".into()], gsd: 1.0, patch_count: p, patch_size: 1 };
        let pos_dim = 4 * quarter;
        let sp = superpositional(&group, &footprint, pos_dim, 1e4).unwrap();
        let reference = reference_encodings(&footprint, pos_dim, 1e4).unwrap();
        let a = sp.mean_axis(ndarray::Axis(0)).unwrap();
        let b = reference.mean_axis(ndarray::Axis(0)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn resampling_keeps_constants(value in -5.0..5.0f64, side in 1usize..5, factor in 1usize..4) {
        let px = Array2::from_elem((side * factor, side * factor), value);
        let up = bilinear_resample(px.view(), 10.0, 10.0 / factor as f64).unwrap();
        prop_assert_eq!(up.dim(), (side * factor * factor, side * factor * factor));
        prop_assert!(up.iter().all(|v| (v - value).abs() < 1e-12));
        let down = bilinear_resample(px.view(), 10.0, 10.0 * factor as f64).unwrap();
        prop_assert_eq!(down.dim(), (side, side));
        prop_assert!(down.iter().all(|v| (v - value).abs() < 1e-12));
    }

    #[test]
    fn clipping_caps_the_norm(values in prop::collection::vec(-100.0..100.0f64, 1..20), max in 0.1..50.0f64) {
        let mut g = ParamStore::new();
        g.insert("a", ndarray::Array1::from(values).into_dyn());
        let before = g.global_norm();
        let reported = clip_grad_norm(&mut g, max);
        prop_assert_eq!(reported, before);
        prop_assert!(g.global_norm() <= max * (1.0 + 1e-12) || before <= max);
        if before <= max {
            prop_assert_eq!(g.global_norm(), before);
        }
    }
}
