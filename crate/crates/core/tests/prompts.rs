//! Tiny vision-language encoder, learned prompts and density maps.

mod common;

use common::{random_image, rng, signed};
use dehaze_core::ceda::{
    density_map, evaluate_prompts, guidance, guidance_from_embeddings, prompt_loss, samples_from_triplets,
    train_prompts, PromptPair, PromptSample, PromptTrainConfig, Regression,
};
use dehaze_core::encoder::{
    labeled_from_triplets, pool, pretrain, retrieval_accuracy, EncoderConfig, Labeled, PretrainConfig, TinyEncoder,
};
use dehaze_core::haze::{ClearSource, DatasetBuilder, DatasetConfig};
use dehaze_core::image::batch_tensor;
use dehaze_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn small_encoder(seed: u64) -> (TinyEncoder, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        widths: vec![8, 8],
        embed_dim: 8,
        token_dim: 8,
        text_hidden: 16,
    };
    let enc = TinyEncoder::new(&mut store, cfg, &mut rng(seed)).unwrap();
    (enc, store)
}

fn frozen_encoder(seed: u64) -> (TinyEncoder, ParamStore<f32>) {
    let (enc, mut store) = small_encoder(seed);
    store.freeze_all();
    (enc, store)
}

#[test]
fn identical_images_embed_identically() {
    let (enc, store) = small_encoder(0);
    let img = random_image(&mut rng(1), 16, 16, 3);
    let g = Graph::<f32>::new();
    let x = g.constant(batch_tensor(&[&img, &img]).unwrap());
    let grid = enc.encode_image(&g, &store, x).unwrap();
    assert_eq!(g.shape(grid), vec![2, 4, 4, 8]);
    let v = g.value(grid);
    let (a, b) = v.data().split_at(v.len() / 2);
    assert_eq!(a, b);
}

#[test]
fn default_encoder_grid_on_64_pixels_is_8_by_8() {
    let mut store = ParamStore::<f32>::new();
    let enc = TinyEncoder::new(&mut store, EncoderConfig::default(), &mut rng(0)).unwrap();
    assert_eq!(enc.patch(), 8);
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 64, 64, 3]));
    let grid = enc.encode_image(&g, &store, x).unwrap();
    assert_eq!(g.shape(grid), vec![1, 8, 8, EncoderConfig::default().embed_dim]);
}

#[test]
fn text_embeddings_are_unit_and_deterministic() {
    let (enc, store) = small_encoder(2);
    let g = Graph::<f32>::new();
    let t = enc.encode_captions(&g, &store, &["hazy image", "hazy image", "clear image"]).unwrap();
    let v = g.value(t);
    for row in v.data().chunks(8) {
        let n: f64 = row.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
    assert_eq!(v.data()[..8], v.data()[8..16]);
    assert!(enc.encode_captions(&g, &store, &["hazy image", "clear"]).is_err());
}

#[test]
fn pooling_matches_mean_and_ignores_order() {
    let mut r = rng(3);
    let grid: Tensor<f64> = signed(&mut r, &[2, 3, 4, 5]);
    let g = Graph::<f64>::new();
    let p = pool(&g, g.constant(grid.clone())).unwrap();
    let pv = g.value(p).data().to_vec();
    for b in 0..2 {
        let mut mean = vec![0.0; 5];
        for pos in 0..12 {
            for c in 0..5 {
                mean[c] += grid.data()[(b * 12 + pos) * 5 + c] / 12.0;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..5 {
            assert!((pv[b * 5 + c] - mean[c] / norm).abs() < 1e-7);
        }
    }
    let mut perm = grid.clone();
    let d = perm.data_mut();
    for c in 0..5 {
        d.swap(c, 11 * 5 + c);
    }
    let q = pool(&g, g.constant(perm)).unwrap();
    assert!(common::max_abs_diff(g.value(q).data(), &pv) < 1e-12);
    let constant = Tensor::from_fn(vec![1, 2, 2, 3], |i| [3.0, 0.0, 4.0][i % 3]);
    let c = pool(&g, g.constant(constant)).unwrap();
    assert!(common::max_abs_diff(g.value(c).data(), &[0.6, 0.0, 0.8]) < 1e-12);
}

#[test]
fn equal_prompt_similarity_gives_half_density() {
    let g = Graph::<f64>::new();
    let grid: Tensor<f64> = signed(&mut rng(4), &[1, 3, 3, 4]);
    let text = g.constant(Tensor::new(vec![2, 4], vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap());
    let scale = g.constant(Tensor::scalar(30.0));
    let md = density_map(&g, g.constant(grid.clone()), text, scale).unwrap();
    assert!(g.value(md).data().iter().all(|v| *v == 0.5));
    let text = g.constant(signed(&mut rng(5), &[2, 4]));
    let md = density_map(&g, g.constant(grid), g.l2_normalize(text).unwrap(), scale).unwrap();
    assert_eq!(g.shape(md), vec![1, 3, 3, 1]);
    assert!(g.value(md).data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

fn triplets(n: usize, seed: u64) -> Vec<dehaze_core::haze::HazeTriplet> {
    let cfg = DatasetConfig {
        crop: 16,
        ..Default::default()
    };
    DatasetBuilder::new(ClearSource::Procedural, cfg, seed).unwrap().take(0, n)
}

#[test]
fn pretraining_is_seeded_and_freezes_the_encoder() {
    let data = labeled_from_triplets(&triplets(8, 1));
    let cfg = PretrainConfig {
        steps: 5,
        per_class: 4,
        ..Default::default()
    };
    let run = || {
        let (enc, mut store) = small_encoder(7);
        pretrain(&enc, &mut store, &data, &cfg).unwrap();
        (enc, store)
    };
    let (enc, a) = run();
    let (_, b) = run();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(a.trainable_scalars(), 0);
    let acc = retrieval_accuracy(&enc, &a, &data).unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let (enc0, mut untouched) = small_encoder(7);
    let before = untouched.checksum();
    pretrain(&enc0, &mut untouched, &data, &PretrainConfig { steps: 0, ..cfg }).unwrap();
    assert_eq!(untouched.checksum(), before);
    assert_eq!(untouched.trainable_scalars(), 0);
}

#[test]
fn pretraining_needs_both_classes() {
    let (enc, mut store) = small_encoder(0);
    let only_hazy: Vec<Labeled> = labeled_from_triplets(&triplets(2, 0)).into_iter().filter(|l| !l.clear).collect();
    assert!(pretrain(&enc, &mut store, &only_hazy, &PretrainConfig::default()).is_err());
}

fn prompt_setup(seed: u64) -> (TinyEncoder, ParamStore<f32>, PromptPair, ParamStore<f32>) {
    let (enc, es) = frozen_encoder(seed);
    let mut ps = ParamStore::new();
    let prompts = PromptPair::new(&mut ps, &enc, &es, 4, &mut rng(seed + 1)).unwrap();
    (enc, es, prompts, ps)
}

#[test]
fn identical_prompts_give_ln_two() {
    let (enc, es, prompts, mut ps) = prompt_setup(0);
    let t = &mut ps.get_mut(prompts.tokens).value;
    let half = t.len() / 2;
    let first = t.data()[..half].to_vec();
    t.data_mut()[half..].copy_from_slice(&first);
    let samples = samples_from_triplets(&enc, &es, &triplets(2, 2)).unwrap();
    let batch: Vec<&PromptSample<f32>> = samples.iter().collect();
    let g = Graph::new();
    let loss = prompt_loss(&g, &enc, &es, &prompts, &ps, &batch, None).unwrap();
    assert!((g.item(loss.classification).unwrap() as f64 - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn stage_two_reductions() {
    let (enc, es, prompts, ps) = prompt_setup(1);
    let mut samples = samples_from_triplets(&enc, &es, &triplets(3, 3)).unwrap();
    let batch: Vec<&PromptSample<f32>> = samples.iter().collect();
    let value = |cfg: Option<&PromptTrainConfig>, batch: &[&PromptSample<f32>]| {
        let g = Graph::new();
        let l = prompt_loss(&g, &enc, &es, &prompts, &ps, batch, cfg).unwrap();
        let r = l.regression.map(|r| g.item(r).unwrap() as f64);
        (g.item(l.total).unwrap() as f64, g.item(l.classification).unwrap() as f64, r)
    };
    let no_regression = PromptTrainConfig {
        alpha1: 0.0,
        alpha2: 1.0,
        ..Default::default()
    };
    let (stage1, _, _) = value(None, &batch);
    let (stage2, _, _) = value(Some(&no_regression), &batch);
    assert!((stage1 - stage2).abs() < 1e-7);

    // Replace ground truth with the current density map.
    let g = Graph::new();
    let text = prompts.text(&g, &enc, &es, &ps).unwrap();
    let scale = enc.logit_scale(&g, &es);
    for s in samples.iter_mut().filter(|s| !s.clear) {
        let md = density_map(&g, g.constant(s.grid.clone()), text, scale).unwrap();
        s.density = Some(g.value(md).clone());
    }
    let batch: Vec<&PromptSample<f32>> = samples.iter().collect();
    for regression in [Regression::Mse, Regression::Mae] {
        let cfg = PromptTrainConfig {
            alpha1: 2.0,
            alpha2: 0.3,
            regression,
            ..Default::default()
        };
        let (total, cls, reg) = value(Some(&cfg), &batch);
        assert!(reg.unwrap().abs() < 1e-12);
        assert!((total - 0.3 * cls).abs() < 1e-7);
    }
}

#[test]
fn separable_embeddings_are_classified_perfectly() {
    let (enc, es, prompts, mut ps) = prompt_setup(2);
    let mut r = rng(9);
    let sample = |clear: bool, r: &mut rand_chacha::ChaCha8Rng| {
        let noise: Tensor<f32> = signed(r, &[1, 2, 2, 8]);
        let grid = Tensor::from_fn(vec![1, 2, 2, 8], |i| {
            let axis = if clear { 0 } else { 1 };
            noise.data()[i] * 0.1 + if i % 8 == axis { 1.0 } else { 0.0 }
        });
        PromptSample {
            grid,
            clear,
            density: None,
        }
    };
    let samples: Vec<PromptSample<f32>> = (0..20).map(|i| sample(i % 2 == 0, &mut r)).collect();
    let cfg = PromptTrainConfig {
        steps: 300,
        per_class: 4,
        lr: 2e-2,
        ..Default::default()
    };
    let before = es.checksum();
    train_prompts(&enc, &es, &prompts, &mut ps, &samples, false, &cfg).unwrap();
    assert_eq!(es.checksum(), before);
    let eval = evaluate_prompts(&enc, &es, &prompts, &ps, &samples).unwrap();
    assert_eq!(eval.accuracy, 1.0);
    assert_eq!(eval.density_mse, None);
}

#[test]
fn prompt_training_refuses_a_trainable_encoder() {
    let (enc, es) = small_encoder(3);
    let mut ps = ParamStore::new();
    let prompts = PromptPair::new(&mut ps, &enc, &es, 4, &mut rng(0)).unwrap();
    let samples = samples_from_triplets(&enc, &es, &triplets(2, 0)).unwrap();
    let cfg = PromptTrainConfig::default();
    assert!(train_prompts(&enc, &es, &prompts, &mut ps, &samples, false, &cfg).is_err());
}

#[test]
fn guidance_shapes_follow_the_encoder_grid() {
    let (enc, es, prompts, ps) = prompt_setup(4);
    let x = batch_tensor::<f32>(&[&random_image(&mut rng(0), 16, 24, 3)]).unwrap();
    let gd = guidance(&enc, &es, &prompts, &ps, x).unwrap();
    assert_eq!(gd.density.shape(), &[1, 4, 6, 1]);
    assert_eq!(gd.grid.shape(), &[1, 4, 6, 8]);
    assert!(gd.density.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn imported_embeddings_prefer_the_closer_prompt() {
    let haze = [1.0f32, 0.0, 0.0];
    let clear = [0.0f32, 1.0, 0.0];
    let grid = [2.0f32, 0.1, 0.0, 0.1, 2.0, 0.0];
    let gd = guidance_from_embeddings::<f32>(&grid, 1, 2, &haze, &clear, 100.0).unwrap();
    assert_eq!(gd.density.shape(), &[1, 1, 2, 1]);
    assert!(gd.density.data()[0] > 0.99 && gd.density.data()[1] < 0.01);
    assert!(guidance_from_embeddings::<f32>(&grid[..5], 1, 2, &haze, &clear, 100.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Unit embeddings keep logit gaps within `2 · scale`; below ~36 the
    /// complement of a softmax entry is still representable next to 1.
    #[test]
    fn density_entries_stay_inside_the_open_unit_interval(seed in 0u64..10_000, scale in 0.1f64..18.0) {
        let v = density_values(seed, scale);
        prop_assert!(v.iter().all(|x| *x > 0.0 && *x < 1.0));
    }

    #[test]
    fn density_entries_stay_inside_the_closed_unit_interval(seed in 0u64..10_000, scale in 0.1f64..=100.0) {
        let v = density_values(seed, scale);
        prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

fn density_values(seed: u64, scale: f64) -> Vec<f64> {
    let mut r = rng(seed);
    let g = Graph::<f64>::new();
    let grid = g.constant(signed(&mut r, &[1, 2, 3, 4]));
    let text = g.l2_normalize(g.constant(signed(&mut r, &[2, 4]))).unwrap();
    let md = density_map(&g, grid, text, g.constant(Tensor::scalar(scale))).unwrap();
    let v = g.value(md).data().to_vec();
    v
}
