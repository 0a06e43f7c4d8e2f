use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dehaze_core::attention::{window_attention, AttentionParams, WindowConfig};
use dehaze_core::mamba::{four_way_scan, s6_forward, S6Params};
use dehaze_core::{Graph, ParamStore, Tensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0f32..1.0))
}

fn s6(c: &mut Criterion) {
    let mut group = c.benchmark_group("s6");
    for len in [256usize, 1024, 4096] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = S6Params::new(&mut store, "s6", 32, 16, &mut rng).unwrap();
        let seq = random(&mut rng, &[1, len, 32]);
        group.bench_with_input(BenchmarkId::new("forward", len), &len, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let x = g.constant(seq.clone());
                s6_forward(&g, &store, x, &p).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", len), &len, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let x = g.input(seq.clone());
                let y = s6_forward(&g, &store, x, &p).unwrap();
                g.backward(g.sum(y)).unwrap();
            })
        });
    }
    group.finish();
}

fn four_way(c: &mut Criterion) {
    let mut group = c.benchmark_group("four_way_scan");
    for side in [16usize, 32, 64] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = S6Params::new(&mut store, "s6", 32, 16, &mut rng).unwrap();
        let map = random(&mut rng, &[1, side, side, 32]);
        group.bench_with_input(BenchmarkId::new("forward", side), &side, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let x = g.constant(map.clone());
                four_way_scan(&g, &store, x, &p).unwrap()
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("window_attention");
    for window in [4usize, 8] {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "attn", 32, 32, &mut rng).unwrap();
        let map = random(&mut rng, &[1, 64, 64, 32]);
        let cfg = WindowConfig { window, dim_k: 32 };
        group.bench_with_input(BenchmarkId::new("forward", window), &window, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let x = g.constant(map.clone());
                window_attention(&g, &store, x, cfg, &p).unwrap().out
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", window), &window, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let x = g.input(map.clone());
                let o = window_attention(&g, &store, x, cfg, &p).unwrap();
                g.backward(g.sum(o.out)).unwrap();
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = s6, four_way, attention
}
criterion_main!(benches);
