//! Density/semantic-guided aggregation weights and the two-path mix.

mod common;

use common::{jitter, rng, signed, uniform};
use dehaze_core::ceda::{aggregate, cross_attention, AggregationWeights, CedaStage};
use dehaze_core::network::{Mixing, ModelConfig, TrambaBlock};
use dehaze_core::{Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;

struct Fixture {
    store: ParamStore<f64>,
    stage: CedaStage,
    density: Tensor<f64>,
    grid: Tensor<f64>,
    feats: Tensor<f64>,
}

fn fixture(seed: u64, trained: bool) -> Fixture {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let stage = CedaStage::new(&mut store, "ceda.0", 4, 6, 8, true, &mut r).unwrap();
    if trained {
        jitter(&mut store, &mut r, 1.0);
    }
    Fixture {
        store,
        stage,
        density: uniform(&mut r, &[2, 2, 2, 1], 0.0, 1.0),
        grid: signed(&mut r, &[2, 2, 2, 6]),
        feats: signed(&mut r, &[2, 8, 8, 4]),
    }
}

fn weights(f: &Fixture, g: &Graph<f64>) -> AggregationWeights {
    let c = |t: &Tensor<f64>| g.constant(t.clone());
    f.stage
        .forward(g, &f.store, c(&f.density), c(&f.grid), c(&f.feats), 8, 8)
        .unwrap()
}

fn values(g: &Graph<f64>, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[test]
fn weights_sum_to_one_everywhere() {
    for seed in 0..20 {
        let f = fixture(seed, true);
        let g = Graph::new();
        let w = weights(&f, &g);
        assert_eq!(g.shape(w.short), vec![2, 8, 8, 1]);
        for (s, l) in values(&g, w.short).iter().zip(values(&g, w.long)) {
            assert!((s + l - 1.0).abs() < 1e-6);
            assert!(*s >= 0.0 && l >= 0.0);
        }
    }
}

#[test]
fn zero_initialized_projection_starts_at_one_half() {
    let f = fixture(3, false);
    let g = Graph::new();
    let w = weights(&f, &g);
    assert!(values(&g, w.short).iter().chain(&values(&g, w.long)).all(|v| *v == 0.5));
}

#[test]
fn mix_lies_between_the_two_paths() {
    for seed in 0..20 {
        let f = fixture(seed, true);
        let g = Graph::new();
        let w = weights(&f, &g);
        let mut r = rng(seed + 1000);
        let short: Tensor<f64> = signed(&mut r, &[2, 8, 8, 4]);
        let long: Tensor<f64> = signed(&mut r, &[2, 8, 8, 4]);
        let out = aggregate(&g, g.constant(short.clone()), g.constant(long.clone()), &w).unwrap();
        for ((o, a), b) in values(&g, out).iter().zip(short.data()).zip(long.data()) {
            assert!(a.min(*b) - 1e-12 <= *o && *o <= a.max(*b) + 1e-12);
        }
    }
}

#[test]
fn unit_short_weight_returns_the_short_path_exactly() {
    let mut r = rng(4);
    let short: Tensor<f32> = signed(&mut r, &[1, 4, 4, 3]);
    let long: Tensor<f32> = signed(&mut r, &[1, 4, 4, 3]);
    let g = Graph::<f32>::new();
    let w = AggregationWeights {
        short: g.constant(Tensor::ones(vec![1, 4, 4, 1])),
        long: g.constant(Tensor::zeros(vec![1, 4, 4, 1])),
    };
    let out = aggregate(&g, g.constant(short.clone()), g.constant(long), &w).unwrap();
    assert_eq!(g.value(out).data(), short.data());
}

#[test]
fn equal_paths_are_reproduced() {
    let f = fixture(5, true);
    let g = Graph::new();
    let w = weights(&f, &g);
    let same: Tensor<f64> = signed(&mut rng(6), &[2, 8, 8, 4]);
    let v = g.constant(same.clone());
    let out = aggregate(&g, v, v, &w).unwrap();
    assert!(common::max_abs_diff(&values(&g, out), same.data()) < 1e-15);
}

#[test]
fn mismatched_weight_shapes_are_rejected() {
    let g = Graph::<f64>::new();
    let f = g.constant(Tensor::zeros(vec![1, 4, 4, 3]));
    let w = AggregationWeights {
        short: g.constant(Tensor::zeros(vec![1, 2, 4, 1])),
        long: g.constant(Tensor::zeros(vec![1, 2, 4, 1])),
    };
    assert!(aggregate(&g, f, f, &w).is_err());
}

#[test]
fn block_with_unit_short_weight_equals_attention_only_block() {
    let mut r = rng(8);
    let mut store = ParamStore::<f32>::new();
    let cfg = ModelConfig {
        window: 4,
        state_dim: 4,
        ..Default::default()
    };
    let block = TrambaBlock::new(&mut store, 0, 0, 8, &cfg, &mut r).unwrap();
    jitter(&mut store, &mut r, 0.3);
    let x: Tensor<f32> = signed(&mut r, &[1, 8, 8, 8]);
    let g = Graph::<f32>::new();
    let xv = g.constant(x);
    let w = AggregationWeights {
        short: g.constant(Tensor::ones(vec![1, 8, 8, 1])),
        long: g.constant(Tensor::zeros(vec![1, 8, 8, 1])),
    };
    let weighted = block.forward(&g, &store, xv, Mixing::Weights(&w)).unwrap();
    let short = block.forward(&g, &store, xv, Mixing::ShortOnly).unwrap();
    assert_eq!(g.value(weighted).data(), g.value(short).data());
}

#[test]
fn constant_grids_give_a_constant_semantic_map() {
    let f = fixture(9, true);
    let g = Graph::new();
    let grid = g.constant(Tensor::full(vec![1, 2, 2, 6], 0.3));
    let feats = g.constant(Tensor::full(vec![1, 8, 8, 4], -0.7));
    let ms = f.stage.semantic_map(&g, &f.store, grid, feats).unwrap();
    let v = values(&g, ms);
    for cell in v.chunks(8) {
        assert!(common::max_abs_diff(cell, &v[..8]) < 1e-12);
    }
}

#[test]
fn cross_attention_rows_sum_to_one() {
    let mut r = rng(10);
    let g = Graph::<f32>::new();
    let q = g.constant(signed(&mut r, &[2, 5, 4]));
    let k = g.constant(signed(&mut r, &[2, 7, 4]));
    let v = g.constant(signed(&mut r, &[2, 7, 3]));
    let (out, attn) = cross_attention(&g, q, k, v).unwrap();
    assert_eq!(g.shape(out), vec![2, 5, 3]);
    for row in g.value(attn).data().chunks(7) {
        let s: f64 = row.iter().map(|x| *x as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn convex_mix_for_any_valid_weights(ws in proptest::collection::vec(0.0f64..=1.0, 16), seed in 0u64..1000) {
        let mut r = rng(seed);
        let short: Tensor<f64> = signed(&mut r, &[1, 4, 4, 2]);
        let long: Tensor<f64> = signed(&mut r, &[1, 4, 4, 2]);
        let g = Graph::<f64>::new();
        let w = AggregationWeights {
            short: g.constant(Tensor::new(vec![1, 4, 4, 1], ws.clone()).unwrap()),
            long: g.constant(Tensor::new(vec![1, 4, 4, 1], ws.iter().map(|v| 1.0 - v).collect()).unwrap()),
        };
        let out = aggregate(&g, g.constant(short.clone()), g.constant(long.clone()), &w).unwrap();
        let out = g.value(out).data().to_vec();
        for i in 0..out.len() {
            let (a, b) = (short.data()[i], long.data()[i]);
            prop_assert!(a.min(b) - 1e-12 <= out[i] && out[i] <= a.max(b) + 1e-12);
        }
    }
}
