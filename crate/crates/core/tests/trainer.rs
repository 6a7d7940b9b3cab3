use structinpaint::imageops::{canny_edges, downscale_nearest, sobel_gradient_map, CannyParams};
use structinpaint::losses::RandomConvExtractor;
use structinpaint::maskgen::{Mask, MaskSpec, StrokeSpec};
use structinpaint::model::{build_generator, GeneratorConfig, ModelParams, Toggles};
use structinpaint::tensor::Tensor;
use structinpaint::trainer::*;
use structinpaint::Error;
use indexmap::IndexMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny(size: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.generator.image_size = size;
    cfg.generator.base_channels = 4;
    cfg.generator.residual_blocks = 1;
    cfg.discriminator.base_channels = 4;
    cfg.batch_size = 2;
    cfg.steps = 3;
    cfg.holdout = 4;
    cfg.data = DataSource::Synthetic(SynthSpec { count: 12, size, shapes: (2, 4) });
    cfg.checkpoint_every = 0;
    cfg.log_every = 1;
    cfg
}

fn dataset(size: usize, count: usize) -> Dataset {
    let spec = SynthSpec { count, size, shapes: (2, 5) };
    Dataset::new(synth_dataset(&spec, 3, CannyParams::default()).unwrap(), CannyParams::default()).unwrap()
}

#[test]
fn synthetic_set_is_deterministic_and_edged() {
    let spec = SynthSpec { count: 24, size: 64, shapes: (2, 5) };
    let a = synth_dataset(&spec, 11, CannyParams::default()).unwrap();
    let b = synth_dataset(&spec, 11, CannyParams::default()).unwrap();
    let c = synth_dataset(&spec, 12, CannyParams::default()).unwrap();
    assert_eq!(images_digest(&a), images_digest(&b));
    assert_ne!(images_digest(&a), images_digest(&c));
    for img in &a {
        assert_eq!(img.shape(), (64, 64, 3));
        assert!(canny_edges(img, CannyParams::default()).unwrap().count() > 0);
    }
}

#[test]
fn empty_synthetic_set_is_rejected_by_make_batch() {
    let spec = SynthSpec { count: 0, ..SynthSpec::default() };
    let images = synth_dataset(&spec, 0, CannyParams::default()).unwrap();
    assert!(images.is_empty());
    let data = Dataset::new(images, CannyParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = make_batch::<f32, _>(&data, &MaskSpec::default(), 2, &[1], &mut rng);
    assert!(matches!(r, Err(Error::InvalidArgument { .. })));
}

#[test]
fn empty_mask_leaves_inputs_unmasked() {
    let data = dataset(32, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = make_batch::<f64, _>(&data, &MaskSpec::Empty, 3, &[1], &mut rng).unwrap();
    assert_eq!(b.input.image, b.image);
    assert_eq!(b.input.grads, b.grads);
    assert_eq!(b.input.edges, b.edges);
    assert!(b.mask.data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_shapes_for_size_64_and_three_scales() {
    let data = dataset(64, 4);
    let cfg = TrainConfig::default();
    let factors = cfg.pyramid_factors();
    assert_eq!(factors, vec![4, 2, 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = make_batch::<f32, _>(&data, &cfg.mask, 5, &factors, &mut rng).unwrap();
    assert_eq!(b.image.shape(), [5, 3, 64, 64]);
    assert_eq!(b.grads.shape(), [5, 6, 64, 64]);
    assert_eq!(b.edges.shape(), [5, 1, 64, 64]);
    assert_eq!(b.mask.shape(), [5, 1, 64, 64]);
    assert_eq!(b.input.image.shape(), [5, 3, 64, 64]);
    assert_eq!(b.input.grads.shape(), [5, 6, 64, 64]);
    assert_eq!(b.input.edges.shape(), [5, 1, 64, 64]);
    for (s, side) in b.pyramid.iter().zip([16, 32, 64]) {
        assert_eq!(s.grads.shape(), [5, 6, side, side]);
        assert_eq!(s.edges.shape(), [5, 1, side, side]);
        assert_eq!(s.mask.shape(), [5, 1, side, side]);
        assert_eq!(s.edge_weights.shape(), [5, 1, side, side]);
    }
}

#[test]
fn batch_is_a_function_of_rng_state() {
    let data = dataset(32, 6);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        make_batch::<f64, _>(&data, &MaskSpec::default(), 4, &[2, 1], &mut rng).unwrap()
    };
    let (a, b, c) = (draw(9), draw(9), draw(10));
    assert_eq!(a.input.image, b.input.image);
    assert_eq!(a.pyramid[0].grads, b.pyramid[0].grads);
    assert_ne!(a.mask, c.mask);
}

#[test]
fn pyramid_and_masked_inputs_match_direct_construction() {
    let data = dataset(32, 2);
    let samples: Vec<&Sample> = data.samples.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let masks: Vec<Mask> =
        (0..2).map(|_| MaskSpec::default().generate((32, 32), &mut rng).unwrap()).collect();
    let b = assemble_batch::<f64>(&samples, &masks, &[4, 2, 1]).unwrap();
    for (n, s) in samples.iter().enumerate() {
        let grads = sobel_gradient_map(&s.image).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let keep = if masks[n].is_missing(y, x) { 0.0 } else { 1.0 };
                for c in 0..6 {
                    assert_eq!(b.input.grads.get(n, c, y, x), grads.get(y, x, c) * keep);
                }
                for c in 0..3 {
                    assert_eq!(b.input.image.get(n, c, y, x), s.image.get(y, x, c) * keep);
                }
            }
        }
        for (k, f) in [4, 2, 1].into_iter().enumerate() {
            let side = 32 / f;
            for y in 0..side {
                for x in 0..side {
                    assert_eq!(b.pyramid[k].edges.get(n, 0, y, x), s.edges.get(y * f, x * f, 0));
                    assert_eq!(b.pyramid[k].mask.get(n, 0, y, x), masks[n].get(y * f, x * f, 0));
                }
            }
            let e = downscale_nearest(&s.edges, f).unwrap();
            assert_eq!(e.height(), side);
        }
    }
}

#[test]
fn adam_step_matches_hand_computation_on_a_quadratic() {
    let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, d_lr_ratio: 1.0 };
    let mut params = ModelParams::<f64>::new();
    params.insert("p", Tensor::scalar(1.0));
    let mut adam = AdamState::new(&params);
    let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
    for t in 1..=3 {
        // f(p) = (p - 3)² / 2
        let grad = p - 3.0;
        let mut grads = IndexMap::new();
        grads.insert("p".to_string(), Tensor::scalar(grad));
        adam.step(&mut params, &grads, cfg.lr, &cfg).unwrap();
        m = 0.9 * m + 0.1 * grad;
        v = 0.999 * v + 0.001 * grad * grad;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        p -= 0.1 * mh / (vh.sqrt() + 1e-8);
        assert!((params.get("p").unwrap().item() - p).abs() < 1e-10, "step {t}");
    }
    // first step moves by lr·sign(g) up to ε
    let first = 1.0 + 0.1 * 2.0 / (2.0 + 1e-8);
    let mut fresh = ModelParams::<f64>::new();
    fresh.insert("p", Tensor::scalar(1.0));
    let mut a = AdamState::new(&fresh);
    let mut grads = IndexMap::new();
    grads.insert("p".to_string(), Tensor::scalar(-2.0));
    a.step(&mut fresh, &grads, 0.1, &cfg).unwrap();
    assert!((fresh.get("p").unwrap().item() - first).abs() < 1e-10);
}

#[test]
fn zero_learning_rates_leave_parameters_unchanged() {
    let mut cfg = tiny(32);
    cfg.optimizer.lr = 0.0;
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let (data, _) = prepare_data(&cfg).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let (g0, d0) = (state.generator.clone(), state.discriminator.clone());
    let batch = trainer.batch(&mut state, &data).unwrap();
    let report = trainer.step(&mut state, &batch).unwrap();
    assert_eq!(state.generator, g0);
    assert_eq!(state.discriminator, d0);
    for k in ["rec", "perc", "style", "adv_g", "adv_d", "total", "structure_s0", "edge_s0"] {
        assert!(report.get(k).is_some_and(f64::is_finite), "{k}");
    }
}

#[test]
fn report_total_recombines_from_parts() {
    let cfg = tiny(32);
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let (data, _) = prepare_data(&cfg).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = trainer.batch(&mut state, &data).unwrap();
    let report = trainer.step(&mut state, &batch).unwrap();
    assert_eq!(report.structure_scales(), 3);
    let total = report.get("total").unwrap();
    let again = report.recombine(&cfg.weights).unwrap();
    assert!((total - again).abs() <= 1e-5 * total.abs().max(1.0), "{total} vs {again}");
}

#[test]
fn multi_task_off_has_no_structure_terms() {
    let cfg = tiny(32).with_toggles(Toggles::baseline());
    assert!(cfg.pyramid_factors().is_empty());
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let (data, _) = prepare_data(&cfg).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = trainer.batch(&mut state, &data).unwrap();
    let report = trainer.step(&mut state, &batch).unwrap();
    assert_eq!(report.structure_scales(), 0);
    assert!(report.terms.keys().all(|k| !k.starts_with("edge_s")));
    let parts = report.get("rec").unwrap()
        + 0.1 * report.get("perc").unwrap()
        + 250.0 * report.get("style").unwrap()
        + 0.1 * report.get("adv_g").unwrap();
    assert!((report.get("total").unwrap() - parts).abs() < 1e-5);
}

#[test]
fn non_finite_generator_aborts_with_diagnostic() {
    let cfg = tiny(32);
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let (data, _) = prepare_data(&cfg).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    state.generator.get_mut("out.conv.bias").unwrap().data_mut()[0] = f32::NAN;
    let batch = trainer.batch(&mut state, &data).unwrap();
    match trainer.step(&mut state, &batch) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("out.conv.bias"), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn overfitting_one_batch_reduces_the_loss() {
    let mut cfg = tiny(32);
    cfg.generator.base_channels = 8;
    cfg.discriminator.base_channels = 8;
    cfg.batch_size = 4;
    let trainer = Trainer::new(cfg.clone()).unwrap();
    let (data, _) = prepare_data(&cfg).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = trainer.batch(&mut state, &data).unwrap();
    let first = trainer.step(&mut state, &batch).unwrap().get("total").unwrap();
    let mut last = first;
    for _ in 0..200 {
        last = trainer.step(&mut state, &batch).unwrap().get("total").unwrap();
    }
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(32);
    let a = train(&cfg, None).unwrap();
    let b = train(&cfg, None).unwrap();
    assert_eq!(a.state.digest(), b.state.digest());
    assert_eq!(a.data_digest, b.data_digest);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(train(&other, None).unwrap().state.digest(), a.state.digest());
}

#[test]
fn zero_steps_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(32);
    cfg.steps = 0;
    let out = train(&cfg, Some(dir.path())).unwrap();
    assert!(out.reports.is_empty());
    let loaded = TrainState::load(&dir.path().join("final")).unwrap();
    let init: ModelParams<f32> = build_generator(&cfg.generator, cfg.seed).unwrap();
    assert_eq!(loaded.generator, init);
    assert_eq!(loaded.digest(), TrainState::new(&cfg).unwrap().digest());
}

#[test]
fn checkpoint_round_trip_preserves_digest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(32);
    let out = train(&cfg, Some(dir.path())).unwrap();
    let loaded = TrainState::load(&dir.path().join("final")).unwrap();
    assert_eq!(loaded.digest(), out.state.digest());
    let (params, model) = load_generator(&dir.path().join("final")).unwrap();
    assert_eq!(params, out.state.generator);
    assert_eq!(model.generator, cfg.generator);
    assert_eq!(model.step, cfg.steps);
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), cfg.steps as usize);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let mut cfg = tiny(32);
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    let full_dir = tempfile::tempdir().unwrap();
    let full = train(&cfg, Some(full_dir.path())).unwrap();
    let mid = checkpoint_dir(full_dir.path(), 2);
    assert_eq!(TrainState::load(&mid).unwrap().step, 2);
    let resumed = resume(&cfg, &mid, None).unwrap();
    assert_eq!(resumed.reports.len(), 2);
    assert_eq!(resumed.state.digest(), full.state.digest());
}

#[test]
fn config_toml_round_trip_and_validation() {
    let cfg = tiny(32);
    let text = cfg.to_toml();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    let partial = TrainConfig::from_toml("steps = 7\n[optimizer]\nlr = 0.5\n").unwrap();
    assert_eq!(partial.steps, 7);
    assert_eq!(partial.optimizer.lr, 0.5);
    assert_eq!(partial.optimizer.beta2, 0.9);
    assert_eq!(partial.batch_size, 8);
    let mut bad = cfg.clone();
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
    let bad = cfg.with_toggles(Toggles { multi_task: false, structure_embedding: true, attention: false });
    assert!(bad.validate().is_err());
    assert!(TrainConfig::from_toml("batch_size = \"x\"").is_err());
}

#[test]
fn mean_fill_uses_known_channel_means() {
    let data = dataset(32, 1);
    let img = &data.samples[0].image;
    let mask = MaskSpec::regular_half(32).generate((32, 32), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let filled = mean_fill(img, &mask).unwrap();
    for c in 0..3 {
        let (mut s, mut n) = (0.0, 0.0);
        for y in 0..32 {
            for x in 0..32 {
                if !mask.is_missing(y, x) {
                    s += img.get(y, x, c);
                    n += 1.0;
                }
            }
        }
        for y in 0..32 {
            for x in 0..32 {
                let want = if mask.is_missing(y, x) { s / n } else { img.get(y, x, c) };
                assert!((filled.get(y, x, c) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn inpaint_with_empty_mask_returns_the_input() {
    let cfg = GeneratorConfig { image_size: 32, base_channels: 4, residual_blocks: 1, ..Default::default() };
    let params = build_generator::<f32>(&cfg, 1).unwrap();
    let data = dataset(32, 1);
    let img = &data.samples[0].image;
    let out = inpaint(&params, &cfg, img, &Mask::empty(32, 32), CannyParams::default()).unwrap();
    assert_eq!(out.composite.data(), img.data());
    assert_eq!(out.structure.len(), 3);
    assert_eq!(out.structure[0].shape(), (8, 8, 6));
    let err = inpaint(&params, &cfg, img, &Mask::empty(16, 16), CannyParams::default()).unwrap_err();
    assert!(err.to_string().contains("16x16") && err.to_string().contains("32x32"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn inpaint_keeps_known_pixels(seed in 0u64..1000) {
        let cfg = GeneratorConfig { image_size: 32, base_channels: 4, residual_blocks: 1, ..Default::default() };
        let params = build_generator::<f32>(&cfg, seed).unwrap();
        let spec = SynthSpec { count: 1, size: 32, shapes: (1, 3) };
        let img = synth_dataset(&spec, seed, CannyParams::default()).unwrap().remove(0);
        let spec = MaskSpec::Irregular(StrokeSpec::default());
        let mask = spec.generate((32, 32), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let out = inpaint(&params, &cfg, &img, &mask, CannyParams::default()).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    if !mask.is_missing(y, x) {
                        prop_assert_eq!(out.composite.get(y, x, c), img.get(y, x, c));
                    }
                }
            }
        }
    }
}

#[test]
fn holdout_masks_are_reproducible() {
    let spec = MaskSpec::default();
    let a = holdout_masks(&spec, 32, 5, 7).unwrap();
    let b = holdout_masks(&spec, 32, 5, 7).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, holdout_masks(&spec, 32, 5, 8).unwrap());
}

#[test]
fn holdout_evaluation_reports_model_and_baseline() {
    let cfg = tiny(32);
    let out = train(&cfg, None).unwrap();
    let masks = holdout_masks(&cfg.mask, 32, out.holdout.len(), cfg.seed).unwrap();
    let fx = RandomConvExtractor::<f64>::default();
    let ev = evaluate_holdout(&out.state.generator, &cfg.generator, &out.holdout, &masks, &fx).unwrap();
    assert_eq!(ev.model.count, 4);
    assert_eq!(ev.mean_fill.count, 4);
    assert!(ev.structure_l1.is_some() && ev.structure_edge.is_some());
    assert!(ev.model.means.psnr.is_finite() && ev.mean_fill.means.psnr.is_finite());
}

#[test]
fn ablation_runs_four_rows_with_shared_seed_and_data() {
    let mut cfg = tiny(32);
    cfg.steps = 1;
    let dir = tempfile::tempdir().unwrap();
    let report = run_ablation(&cfg, Some(dir.path())).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["Baseline", "MT", "MT+SE", "MT+SE+AT"]);
    for r in &report.rows {
        assert_eq!(r.seed, cfg.seed);
        assert_eq!(r.data_digest, report.rows[0].data_digest);
        let mut c = r.config.clone();
        c.generator.toggles = cfg.toggles();
        assert_eq!(c, cfg);
    }
    assert_eq!(report.rows[0].structure_columns(), [None, None]);
    assert!(report.rows[1].structure_columns().iter().all(Option::is_some));
    let table = report.table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert_eq!(AblationReport::metric_columns(), 6);
    assert!(lines[1].starts_with("Baseline") && lines[1].trim_end().ends_with("-"), "{table}");
    assert!(dir.path().join("ablation.json").exists());
    assert!(dir.path().join("MT_SE_AT").join("final").join("state.json").exists());
}
