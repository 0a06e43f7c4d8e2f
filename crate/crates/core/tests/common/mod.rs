#![allow(dead_code)]

use dehaze_core::image::Image;
use dehaze_core::{ParamStore, Scalar, Tensor};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<S: Scalar>(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| S::of(rng.random_range(lo..hi)))
}

pub fn signed<S: Scalar>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<S> {
    uniform(rng, shape, -1.0, 1.0)
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Image {
    Image::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
}

/// Adds uniform noise in `[-amount, amount]` to every parameter.
pub fn jitter<S: Scalar>(store: &mut ParamStore<S>, rng: &mut impl Rng, amount: f64) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = S::of(v.to_f64_lossy() + rng.random_range(-amount..amount));
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use dehaze_core::ceda::PromptPair;
use dehaze_core::dehazer::{Dehazer, Guide, TinyGuide};
use dehaze_core::encoder::{EncoderConfig, TinyEncoder};
use dehaze_core::network::{ModelConfig, Network};

/// Two-stage model with window 2 and patch 4 (alignment 4).
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        widths: vec![4, 8],
        blocks: vec![1, 1],
        window: 2,
        state_dim: 4,
        patch: 4,
        embed_dim: 8,
        semantic_dim: 8,
        prompt_len: 4,
        ..Default::default()
    }
}

pub fn tiny_guide(seed: u64) -> TinyGuide {
    let mut enc_store = ParamStore::new();
    let cfg = EncoderConfig {
        widths: vec![8, 8],
        embed_dim: 8,
        token_dim: 8,
        text_hidden: 16,
    };
    let mut r = rng(seed);
    let encoder = TinyEncoder::new(&mut enc_store, cfg, &mut r).unwrap();
    enc_store.freeze_all();
    let mut prompt_store = ParamStore::new();
    let prompts = PromptPair::new(&mut prompt_store, &encoder, &enc_store, 4, &mut r).unwrap();
    prompt_store.freeze_all();
    TinyGuide {
        encoder,
        enc_store,
        prompts,
        prompt_store,
    }
}

pub fn tiny_dehazer(cfg: ModelConfig, seed: u64) -> Dehazer {
    let mut store = ParamStore::new();
    let net = Network::with_seed(&mut store, cfg, seed).unwrap();
    Dehazer {
        net,
        store,
        guide: Guide::Tiny(tiny_guide(seed + 1)),
    }
}
