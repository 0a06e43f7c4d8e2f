//! Finite-difference cases shared by the gradient tests and the acceptance run.

use std::rc::Rc;

use dehaze_core::attention::{window_attention, AttentionParams, WindowConfig};
use dehaze_core::autograd::gradcheck::{check_inputs, check_params, project, GradCheckReport};
use dehaze_core::autograd::Padding;
use dehaze_core::ceda::{aggregate, AggregationWeights, CedaStage};
use dehaze_core::encoder::{EncoderConfig, TinyEncoder};
use dehaze_core::layers::{Conv, ConvTranspose};
use dehaze_core::mamba::{four_way_scan, MambaPath, S6Params};
use dehaze_core::network::{Mixing, ModelConfig, TrambaBlock};
use dehaze_core::training::loss::{dehaze_loss, FeatureNet, LossConfig};
use dehaze_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 10;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn positive(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(0.2..2.0))
}

fn assert_ok(name: &str, r: &GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_err < TOL, "{name}: rel err {:.3e}", r.max_rel_err);
}

/// Runs `f` on inputs drawn by `make` for each seed; the output is projected
/// to a scalar with a random weighting.
fn op_check<M, F>(name: &str, make: M, f: F)
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let r = check_inputs(&inputs, STEP, |g, v| {
            let out = f(g, v)?;
            project(g, out, 1000 + seed)
        })
        .unwrap();
        assert_ok(&format!("{name} #{seed}"), &r);
    }
}

/// Perturbs every parameter so zero- or one-initialized tensors are generic.
fn jitter(store: &mut ParamStore<f64>, rng: &mut impl Rng, amount: f64) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-amount..amount);
        }
    }
}

fn param_check<F>(name: &str, store: &ParamStore<f64>, per_tensor: usize, f: F)
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let r = check_params(store, STEP, per_tensor, f).unwrap();
    assert_ok(name, &r);
}

pub fn binary_ops_with_broadcasting() {
    type Bin = fn(&Graph<f64>, Var, Var) -> Result<Var>;
    let ops: [(&str, Bin); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("div", |g, a, b| g.div(a, b)),
    ];
    let shapes: [(&[usize], &[usize]); 3] = [(&[2, 3], &[2, 3]), (&[2, 3, 4], &[4]), (&[3, 1], &[1, 5])];
    for (name, op) in ops {
        for (sa, sb) in shapes {
            op_check(
                &format!("{name} {sa:?} {sb:?}"),
                |rng| vec![rand_t(rng, sa), positive(rng, sb)],
                |g, v| op(g, v[0], v[1]),
            );
        }
    }
}

pub fn smooth_unary_ops() {
    type Un = fn(&Graph<f64>, Var) -> Result<Var>;
    let ops: [(&str, Un); 8] = [
        ("neg", |g, a| Ok(g.neg(a))),
        ("exp", |g, a| Ok(g.exp(a))),
        ("sigmoid", |g, a| Ok(g.sigmoid(a))),
        ("silu", |g, a| Ok(g.silu(a))),
        ("softplus", |g, a| Ok(g.softplus(a))),
        ("square", |g, a| Ok(g.square(a))),
        ("scale", |g, a| Ok(g.scale(a, -1.7))),
        ("add_scalar", |g, a| Ok(g.add_scalar(a, 0.3))),
    ];
    for (name, op) in ops {
        op_check(name, |rng| vec![rand_t(rng, &[3, 4])], |g, v| op(g, v[0]));
    }
}

pub fn domain_restricted_unary_ops() {
    op_check("log", |rng| vec![positive(rng, &[3, 4])], |g, v| g.log(v[0]));
    op_check("sqrt", |rng| vec![positive(rng, &[3, 4])], |g, v| g.sqrt(v[0]));
    op_check("relu", |rng| vec![away_from_zero(rng, &[3, 4])], |g, v| Ok(g.relu(v[0])));
    op_check("abs", |rng| vec![away_from_zero(rng, &[3, 4])], |g, v| Ok(g.abs(v[0])));
}

pub fn reductions() {
    op_check("sum", |rng| vec![rand_t(rng, &[2, 3, 2])], |g, v| Ok(g.sum(g.square(v[0]))));
    op_check("mean", |rng| vec![rand_t(rng, &[2, 3, 2])], |g, v| Ok(g.mean(g.square(v[0]))));
    for axis in 0..3 {
        op_check(&format!("sum_axis {axis}"), |rng| vec![rand_t(rng, &[2, 3, 4])], |g, v| {
            g.sum_axis(v[0], axis)
        });
        op_check(&format!("mean_axis {axis}"), |rng| vec![rand_t(rng, &[2, 3, 4])], |g, v| {
            g.mean_axis(v[0], axis)
        });
    }
}

pub fn linear_algebra() {
    op_check("matmul", |rng| vec![rand_t(rng, &[3, 4]), rand_t(rng, &[4, 5])], |g, v| {
        g.matmul(v[0], v[1])
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        op_check(
            &format!("bmm ta={ta} tb={tb}"),
            |rng| {
                let a = if ta { [2, 4, 3] } else { [2, 3, 4] };
                let b = if tb { [2, 5, 4] } else { [2, 4, 5] };
                vec![rand_t(rng, &a), rand_t(rng, &b)]
            },
            |g, v| g.bmm(v[0], v[1], ta, tb),
        );
    }
    op_check(
        "linear",
        |rng| vec![rand_t(rng, &[2, 3, 4]), rand_t(rng, &[4, 5]), rand_t(rng, &[5])],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
}

pub fn normalization_and_softmax() {
    for axis in 0..3 {
        op_check(&format!("softmax {axis}"), |rng| vec![rand_t(rng, &[2, 3, 4])], |g, v| {
            g.softmax(v[0], axis)
        });
    }
    op_check("log_softmax", |rng| vec![rand_t(rng, &[3, 5])], |g, v| g.log_softmax_last(v[0]));
    op_check(
        "cross_entropy",
        |rng| {
            let t = positive(rng, &[4, 3]);
            let rows: Vec<f64> = t
                .data()
                .chunks(3)
                .flat_map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(move |v| v / s).collect::<Vec<_>>()
                })
                .collect();
            vec![rand_t(rng, &[4, 3]), Tensor::new(vec![4, 3], rows).unwrap()]
        },
        |g, v| g.cross_entropy(v[0], v[1]),
    );
    op_check(
        "layer_norm",
        |rng| vec![rand_t(rng, &[3, 6]), rand_t(rng, &[6]), rand_t(rng, &[6])],
        |g, v| g.layer_norm(v[0], v[1], v[2]),
    );
    op_check("l2_normalize", |rng| vec![rand_t(rng, &[3, 5])], |g, v| g.l2_normalize(v[0]));
    op_check(
        "l1_loss",
        |rng| {
            let a = rand_t(rng, &[3, 4]);
            let d = away_from_zero(rng, &[3, 4]);
            let b = Tensor::from_fn(vec![3, 4], |i| a.data()[i] + d.data()[i]);
            vec![a, b]
        },
        |g, v| g.l1_loss(v[0], v[1]),
    );
    op_check("mse_loss", |rng| vec![rand_t(rng, &[3, 4]), rand_t(rng, &[3, 4])], |g, v| {
        g.mse_loss(v[0], v[1])
    });
}

pub fn shape_ops() {
    op_check("reshape", |rng| vec![rand_t(rng, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
    op_check("gather_rows", |rng| vec![rand_t(rng, &[2, 3, 2])], |g, v| {
        g.gather_rows(v[0], Rc::from(vec![5, 0, 0, 3, 2]))
    });
    op_check("concat", |rng| vec![rand_t(rng, &[2, 3]), rand_t(rng, &[2, 2])], |g, v| {
        g.concat(&[v[0], v[1]])
    });
    op_check("narrow", |rng| vec![rand_t(rng, &[2, 5])], |g, v| g.narrow(v[0], 1, 3));
}

pub fn resampling() {
    for (oh, ow) in [(7, 5), (2, 3), (4, 4)] {
        op_check(
            &format!("bilinear {oh}x{ow}"),
            |rng| vec![rand_t(rng, &[1, 4, 4, 2])],
            |g, v| g.bilinear_resize(v[0], oh, ow),
        );
    }
    for (oh, ow) in [(2, 2), (3, 2), (1, 1)] {
        op_check(
            &format!("adaptive_pool {oh}x{ow}"),
            |rng| vec![rand_t(rng, &[2, 6, 4, 2])],
            |g, v| g.adaptive_avg_pool(v[0], oh, ow),
        );
    }
}

pub fn convolutions() {
    for (stride, padding) in [(1, Padding::Zeros), (2, Padding::Zeros), (1, Padding::Reflect), (2, Padding::Reflect)] {
        op_check(
            &format!("conv2d s{stride} {padding:?}"),
            |rng| vec![rand_t(rng, &[1, 6, 6, 2]), rand_t(rng, &[3, 3, 2, 3]), rand_t(rng, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, 1, padding),
        );
    }
    for (k, stride, pad) in [(2, 2, 0), (3, 2, 1), (3, 1, 1)] {
        op_check(
            &format!("conv_transpose2d k{k} s{stride}"),
            |rng| vec![rand_t(rng, &[1, 3, 3, 2]), rand_t(rng, &[2, k, k, 3]), rand_t(rng, &[3])],
            |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad),
        );
    }
}

pub fn selective_scan_all_inputs() {
    op_check(
        "selective_scan",
        |rng| {
            let (b, l, d, n) = (2, 5, 3, 4);
            vec![
                rand_t(rng, &[b, l, d]),
                positive(rng, &[b, l, d]),
                Tensor::from_fn(vec![d, n], |_| -rng.random_range(0.2..2.0)),
                rand_t(rng, &[b, l, n]),
                rand_t(rng, &[b, l, n]),
                rand_t(rng, &[d]),
            ]
        },
        |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]),
    );
}

pub fn down_and_up_sampling_layers() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let down = Conv::new(&mut store, "down", 3, 2, 4, 2, false, &mut rng).unwrap();
        let up = ConvTranspose::new(&mut store, "up", 2, 4, 2, &mut rng).unwrap();
        jitter(&mut store, &mut rng, 0.5);
        let x = rand_t(&mut rng, &[1, 4, 4, 2]);
        let r = check_params(&store, STEP, 8, |g, s| {
            let xv = g.constant(x.clone());
            let y = up.forward(g, s, down.forward(g, s, xv)?)?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "down/up #{seed}: {:.3e}", r.max_rel_err);
        let r = check_inputs(&[x.clone()], STEP, |g, v| {
            let y = up.forward(g, &store, down.forward(g, &store, v[0])?)?;
            project(g, y, seed)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "down/up input #{seed}: {:.3e}", r.max_rel_err);
    }
}

pub fn window_attention_module() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let p = AttentionParams::new(&mut store, "attn", 3, 3, &mut rng).unwrap();
        let x = rand_t(&mut rng, &[1, 4, 4, 3]);
        let cfg = WindowConfig { window: 2, dim_k: 3 };
        param_check(&format!("attention params #{seed}"), &store, 9, |g, s| {
            let xv = g.constant(x.clone());
            project(g, window_attention(g, s, xv, cfg, &p)?.out, seed)
        });
        let r = check_inputs(&[x], STEP, |g, v| {
            project(g, window_attention(g, &store, v[0], cfg, &p)?.out, seed)
        })
        .unwrap();
        assert_ok(&format!("attention input #{seed}"), &r);
    }
}

pub fn four_way_scan_and_mamba_path() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let s6 = S6Params::new(&mut store, "s6", 3, 4, &mut rng).unwrap();
        let path = MambaPath::new(&mut store, "mamba", 3, 2, 4, &mut rng).unwrap();
        jitter(&mut store, &mut rng, 0.5);
        let x = rand_t(&mut rng, &[1, 3, 4, 3]);
        param_check(&format!("four_way_scan params #{seed}"), &store, 6, |g, s| {
            let xv = g.constant(x.clone());
            let a = four_way_scan(g, s, xv, &s6)?;
            let b = path.forward(g, s, xv)?;
            let out = g.add(a, b)?;
            project(g, out, seed)
        });
        let r = check_inputs(&[x], STEP, |g, v| {
            let a = four_way_scan(g, &store, v[0], &s6)?;
            let b = path.forward(g, &store, v[0])?;
            project(g, g.add(a, b)?, seed)
        })
        .unwrap();
        assert_ok(&format!("four_way_scan input #{seed}"), &r);
    }
}

pub fn aggregation_stage() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let stage = CedaStage::new(&mut store, "ceda.0", 3, 5, 4, true, &mut rng).unwrap();
        jitter(&mut store, &mut rng, 0.5);
        let density = positive(&mut rng, &[1, 2, 2, 1]);
        let grid = rand_t(&mut rng, &[1, 2, 2, 5]);
        let feats = rand_t(&mut rng, &[1, 4, 4, 3]);
        let short = rand_t(&mut rng, &[1, 4, 4, 3]);
        let long = rand_t(&mut rng, &[1, 4, 4, 3]);
        let run = |g: &Graph<f64>, s: &ParamStore<f64>, v: &[Var]| -> Result<Var> {
            let w = stage.forward(g, s, v[0], v[1], v[2], 4, 4)?;
            let out = aggregate(g, v[3], v[4], &w)?;
            project(g, out, seed)
        };
        let inputs = [density, grid, feats, short, long];
        param_check(&format!("aggregation params #{seed}"), &store, 8, |g, s| {
            let v: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            run(g, s, &v)
        });
        let r = check_inputs(&inputs, STEP, |g, v| run(g, &store, v)).unwrap();
        assert_ok(&format!("aggregation inputs #{seed}"), &r);
    }
}

fn block_cfg() -> ModelConfig {
    ModelConfig {
        window: 2,
        state_dim: 4,
        ..Default::default()
    }
}

pub fn full_block_with_aggregation_weights() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = block_cfg();
        let block = TrambaBlock::new(&mut store, 0, 0, 4, &cfg, &mut rng).unwrap();
        let stage = CedaStage::new(&mut store, "ceda.0", 4, 3, 4, true, &mut rng).unwrap();
        jitter(&mut store, &mut rng, 0.5);
        let x = rand_t(&mut rng, &[1, 8, 8, 4]);
        let density = positive(&mut rng, &[1, 2, 2, 1]);
        let grid = rand_t(&mut rng, &[1, 2, 2, 3]);
        let run = |g: &Graph<f64>, s: &ParamStore<f64>, xv: Var| -> Result<Var> {
            let (d, gr) = (g.constant(density.clone()), g.constant(grid.clone()));
            let w: AggregationWeights = stage.forward(g, s, d, gr, xv, 8, 8)?;
            project(g, block.forward(g, s, xv, Mixing::Weights(&w))?, seed)
        };
        param_check(&format!("block params #{seed}"), &store, 4, |g, s| {
            let xv = g.constant(x.clone());
            run(g, s, xv)
        });
        let r = check_inputs(&[x], STEP, |g, v| run(g, &store, v[0])).unwrap();
        assert_ok(&format!("block input #{seed}"), &r);
    }
}

pub fn perceptual_loss_branch() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_store = ParamStore::<f64>::new();
        let cfg = EncoderConfig {
            widths: vec![3, 4],
            ..Default::default()
        };
        let enc = TinyEncoder::new(&mut enc_store, cfg, &mut rng).unwrap();
        enc_store.freeze_all();
        let pred = Tensor::from_fn(vec![1, 4, 4, 3], |_| rng.random_range(0.0..1.0));
        let target = Tensor::from_fn(vec![1, 4, 4, 3], |i| {
            let off = rng.random_range(0.1..0.3);
            pred.data()[i] + if i % 2 == 0 { off } else { -off }
        });
        let loss = LossConfig {
            l1_weight: 0.0,
            perceptual_weight: 1.0,
            perceptual_stages: vec![0, 1],
        };
        let feats = FeatureNet {
            encoder: &enc,
            store: &enc_store,
        };
        let r = check_inputs(&[pred, target], STEP, |g, v| {
            Ok(dehaze_loss(g, v[0], v[1], &loss, Some(feats))?.total)
        })
        .unwrap();
        assert_ok(&format!("perceptual #{seed}"), &r);
    }
}

#[allow(dead_code)]
pub const ALL: &[(&str, fn())] = &[
    ("binary_ops_with_broadcasting", binary_ops_with_broadcasting),
    ("smooth_unary_ops", smooth_unary_ops),
    ("domain_restricted_unary_ops", domain_restricted_unary_ops),
    ("reductions", reductions),
    ("linear_algebra", linear_algebra),
    ("normalization_and_softmax", normalization_and_softmax),
    ("shape_ops", shape_ops),
    ("resampling", resampling),
    ("convolutions", convolutions),
    ("selective_scan_all_inputs", selective_scan_all_inputs),
    ("down_and_up_sampling_layers", down_and_up_sampling_layers),
    ("window_attention_module", window_attention_module),
    ("four_way_scan_and_mamba_path", four_way_scan_and_mamba_path),
    ("aggregation_stage", aggregation_stage),
    ("full_block_with_aggregation_weights", full_block_with_aggregation_weights),
    ("perceptual_loss_branch", perceptual_loss_branch),
];
