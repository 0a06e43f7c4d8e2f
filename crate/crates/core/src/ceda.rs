//! Density-guided dual-path aggregation: learnable prompt pairs, patch-wise
//! haze density, a cross-attended semantic map and per-pixel path weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::encoder::{balanced_indices, pool, scaled_similarity, tokenize, Labeled, TinyEncoder};
use crate::error::{Error, Result};
use crate::haze::HazeTriplet;
use crate::image::{batch_tensor, Image};
use crate::layers::Linear;
use crate::training::optim::{Adam, AdamConfig};

/// Haze and clear prompts stored together as one `[2, k, token_dim]` tensor
/// (row 0 describes haze, row 1 a clear scene).
#[derive(Clone, Debug)]
pub struct PromptPair {
    pub tokens: ParamId,
    pub len: usize,
}

impl PromptPair {
    pub const NAME: &'static str = "prompt.tokens";

    /// Small Gaussian perturbations of the "hazy" / "clear" word embeddings.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        enc: &TinyEncoder,
        enc_store: &ParamStore<S>,
        len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        let g = Graph::new();
        let words = enc.token_rows(&g, enc_store, &[tokenize("hazy")?[0], tokenize("clear")?[0]])?;
        let words = g.value(words).to_f64_vec();
        let e = enc.cfg.token_dim;
        let noise = Normal::new(0.0, 0.02).expect("valid std");
        let data: Vec<S> = (0..2 * len * e)
            .map(|i| {
                let (p, j) = (i / (len * e), i % e);
                S::of(words[p * e + j] + noise.sample(rng))
            })
            .collect();
        let tokens = store.insert(Self::NAME, Tensor::new(vec![2, len, e], data)?)?;
        Ok(PromptPair { tokens, len })
    }

    pub fn bind(store: &ParamStore<impl Scalar>) -> Result<Self> {
        let tokens = store.id(Self::NAME)?;
        let s = store.get(tokens).value.shape();
        if s.len() != 3 || s[0] != 2 {
            return Err(Error::shape("prompt tokens", s, &[2, 0, 0]));
        }
        Ok(PromptPair { tokens, len: s[1] })
    }

    /// Normalized text embeddings `[2, embed_dim]`.
    pub fn text<S: Scalar>(
        &self,
        g: &Graph<S>,
        enc: &TinyEncoder,
        enc_store: &ParamStore<S>,
        store: &ParamStore<S>,
    ) -> Result<Var> {
        let rows = g.param(store, self.tokens);
        enc.encode_text(g, enc_store, rows)
    }
}

/// Haze channel of the per-patch two-way softmax over scaled cosine
/// similarities: `grid [b, hp, wp, d]`, `text [2, d]` → `[b, hp, wp, 1]`.
pub fn density_map<S: Scalar>(g: &Graph<S>, grid: Var, text: Var, scale: Var) -> Result<Var> {
    let s = g.shape(grid);
    if s.len() != 4 {
        return Err(Error::shape("density_map", &s, &[0, 0, 0, 0]));
    }
    let flat = g.reshape(grid, &[s[0] * s[1] * s[2], s[3]])?;
    let flat = g.l2_normalize(flat)?;
    let logits = scaled_similarity(g, flat, text, scale)?;
    let probs = g.softmax_last(logits)?;
    let haze = g.narrow(probs, 0, 1)?;
    g.reshape(haze, &[s[0], s[1], s[2], 1])
}

/// Probability of the clear prompt from pooled embeddings: `[b, 2]` logits.
pub fn prompt_logits<S: Scalar>(g: &Graph<S>, grid: Var, text: Var, scale: Var) -> Result<Var> {
    let pooled = pool(g, grid)?;
    scaled_similarity(g, pooled, text, scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regression {
    Mse,
    Mae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTrainConfig {
    pub steps: usize,
    /// Samples per class in each batch.
    pub per_class: usize,
    pub lr: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub regression: Regression,
    pub seed: u64,
}

impl Default for PromptTrainConfig {
    fn default() -> Self {
        PromptTrainConfig {
            steps: 500,
            per_class: 16,
            lr: 5e-3,
            alpha1: 1.0,
            alpha2: 0.5,
            regression: Regression::Mse,
            seed: 0,
        }
    }
}

impl PromptTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return Err(Error::Config("alpha1 and alpha2 must be >= 0".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        Ok(())
    }
}

/// A frozen-encoder view of one training image.
#[derive(Clone, Debug)]
pub struct PromptSample<S> {
    pub grid: Tensor<S>,
    pub clear: bool,
    /// Ground-truth density averaged over each patch (hazy samples only).
    pub density: Option<Tensor<S>>,
}

pub fn patch_density<S: Scalar>(density: &Image, patch: usize) -> Result<Tensor<S>> {
    let (h, w) = (density.height(), density.width());
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::contract(format!(
            "density {h}x{w} not divisible by patch {patch}"
        )));
    }
    let d = density.area_downsample(h / patch, w / patch)?;
    Ok(d.to_tensor())
}

/// Encodes images once with the frozen encoder.
pub fn encode_grids<S: Scalar>(
    enc: &TinyEncoder,
    enc_store: &ParamStore<S>,
    images: &[&Image],
) -> Result<Vec<Tensor<S>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let g = Graph::new();
        let x = g.constant(batch_tensor::<S>(chunk)?);
        let grid = enc.encode_image(&g, enc_store, x)?;
        let t = g.value(grid);
        let s = t.shape();
        let n = s[1] * s[2] * s[3];
        for i in 0..chunk.len() {
            out.push(Tensor::new(
                vec![1, s[1], s[2], s[3]],
                t.data()[i * n..(i + 1) * n].to_vec(),
            )?);
        }
    }
    Ok(out)
}

pub fn samples_from_labeled<S: Scalar>(
    enc: &TinyEncoder,
    enc_store: &ParamStore<S>,
    data: &[Labeled],
) -> Result<Vec<PromptSample<S>>> {
    let images: Vec<&Image> = data.iter().map(|l| &l.image).collect();
    Ok(encode_grids(enc, enc_store, &images)?
        .into_iter()
        .zip(data)
        .map(|(grid, l)| PromptSample {
            grid,
            clear: l.clear,
            density: None,
        })
        .collect())
}

/// Hazy (with patch density) and clear samples of every triplet.
pub fn samples_from_triplets<S: Scalar>(
    enc: &TinyEncoder,
    enc_store: &ParamStore<S>,
    triplets: &[HazeTriplet],
) -> Result<Vec<PromptSample<S>>> {
    let images: Vec<&Image> = triplets.iter().flat_map(|t| [&t.hazy, &t.clear]).collect();
    let grids = encode_grids(enc, enc_store, &images)?;
    let mut out = Vec::with_capacity(grids.len());
    for (i, grid) in grids.into_iter().enumerate() {
        let t = &triplets[i / 2];
        let clear = i % 2 == 1;
        let density = if clear {
            None
        } else {
            let d = patch_density(&t.density, enc.patch())?;
            let gs = grid.shape();
            if d.shape()[1] != gs[1] || d.shape()[2] != gs[2] {
                return Err(Error::contract("density grid does not match embedding grid"));
            }
            Some(d)
        };
        out.push(PromptSample {
            grid,
            clear,
            density,
        });
    }
    Ok(out)
}

pub struct PromptLoss {
    pub total: Var,
    pub classification: Var,
    pub regression: Option<Var>,
}

/// Stage-1 cross-entropy on every sample; with `stage2`, hazy samples add
/// `alpha1 ×` the density regression and the classification term is scaled
/// by `alpha2`.
#[allow(clippy::too_many_arguments)]
pub fn prompt_loss<S: Scalar>(
    g: &Graph<S>,
    enc: &TinyEncoder,
    enc_store: &ParamStore<S>,
    prompts: &PromptPair,
    store: &ParamStore<S>,
    batch: &[&PromptSample<S>],
    stage2: Option<&PromptTrainConfig>,
) -> Result<PromptLoss> {
    let grids: Vec<&Tensor<S>> = batch.iter().map(|s| &s.grid).collect();
    let grid = g.constant(Tensor::stack_batch(&grids)?);
    let text = prompts.text(g, enc, enc_store, store)?;
    let scale = enc.logit_scale(g, enc_store);
    let logits = prompt_logits(g, grid, text, scale)?;
    let n = batch.len();
    let target = Tensor::from_fn(vec![n, 2], |i| {
        S::of(f64::from(usize::from(batch[i / 2].clear) == i % 2))
    });
    let classification = g.cross_entropy(logits, g.constant(target))?;
    let Some(cfg) = stage2 else {
        return Ok(PromptLoss {
            total: classification,
            classification,
            regression: None,
        });
    };
    let hazy: Vec<&PromptSample<S>> = batch.iter().copied().filter(|s| !s.clear).collect();
    let mut total = g.scale(classification, cfg.alpha2);
    let mut regression = None;
    if !hazy.is_empty() {
        let grids: Vec<&Tensor<S>> = hazy.iter().map(|s| &s.grid).collect();
        let dens: Vec<&Tensor<S>> = hazy
            .iter()
            .map(|s| {
                s.density
                    .as_ref()
                    .ok_or_else(|| Error::contract("hazy stage-2 sample without density"))
            })
            .collect::<Result<_>>()?;
        let md = density_map(g, g.constant(Tensor::stack_batch(&grids)?), text, scale)?;
        let gt = g.constant(Tensor::stack_batch(&dens)?);
        if g.shape(md) != g.shape(gt) {
            return Err(Error::contract(format!(
                "density map {:?} vs ground truth {:?}",
                g.shape(md),
                g.shape(gt)
            )));
        }
        let r = match cfg.regression {
            Regression::Mse => g.mse_loss(md, gt)?,
            Regression::Mae => g.l1_loss(md, gt)?,
        };
        total = g.add(total, g.scale(r, cfg.alpha1))?;
        regression = Some(r);
    }
    Ok(PromptLoss {
        total,
        classification,
        regression,
    })
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PromptReport {
    pub losses: Vec<f64>,
}

/// Optimizes only the prompt tokens; the encoder store must be frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_prompts<S: Scalar>(
    enc: &TinyEncoder,
    enc_store: &ParamStore<S>,
    prompts: &PromptPair,
    store: &mut ParamStore<S>,
    samples: &[PromptSample<S>],
    stage2: bool,
    cfg: &PromptTrainConfig,
) -> Result<PromptReport> {
    cfg.validate()?;
    if enc_store.trainable_scalars() != 0 {
        return Err(Error::contract("prompt training requires a frozen encoder"));
    }
    if stage2 && samples.iter().any(|s| !s.clear && s.density.is_none()) {
        return Err(Error::contract("stage 2 needs density for every hazy sample"));
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.clear).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(store, AdamConfig::default());
    let mut report = PromptReport::default();
    for step in 0..cfg.steps {
        let batch: Vec<&PromptSample<S>> = balanced_indices(&labels, cfg.per_class, &mut rng)?
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let g = Graph::new();
        let loss = prompt_loss(&g, enc, enc_store, prompts, store, &batch, stage2.then_some(cfg))?;
        let lv = g.item(loss.total)?.to_f64_lossy();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "prompt loss became {lv} at step {step} (seed {}, stage {})",
                cfg.seed,
                if stage2 { 2 } else { 1 }
            )));
        }
        report.losses.push(lv);
        g.backward(loss.total)?;
        store.zero_grads();
        g.write_param_grads(store);
        opt.step(store, cfg.lr)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PromptEval {
    pub accuracy: f64,
    /// Mean squared error between density map and patch density over hazy samples.
    pub density_mse: Option<f64>,
}

pub fn evaluate_prompts<S: Scalar>(
    enc: &TinyEncoder,
    enc_store: &ParamStore<S>,
    prompts: &PromptPair,
    store: &ParamStore<S>,
    samples: &[PromptSample<S>],
) -> Result<PromptEval> {
    if samples.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut correct = 0usize;
    let (mut se, mut count) = (0.0, 0usize);
    for chunk in samples.chunks(64) {
        let g = Graph::new();
        let grids: Vec<&Tensor<S>> = chunk.iter().map(|s| &s.grid).collect();
        let grid = g.constant(Tensor::stack_batch(&grids)?);
        let text = prompts.text(&g, enc, enc_store, store)?;
        let scale = enc.logit_scale(&g, enc_store);
        let logits = prompt_logits(&g, grid, text, scale)?;
        let md = density_map(&g, grid, text, scale)?;
        let lv = g.value(logits);
        let mv = g.value(md);
        let per = mv.len() / chunk.len();
        for (i, s) in chunk.iter().enumerate() {
            let row = &lv.data()[2 * i..2 * i + 2];
            if (row[1] > row[0]) == s.clear {
                correct += 1;
            }
            if let Some(d) = &s.density {
                for (a, b) in mv.data()[i * per..(i + 1) * per].iter().zip(d.data()) {
                    let e = a.to_f64_lossy() - b.to_f64_lossy();
                    se += e * e;
                    count += 1;
                }
            }
        }
    }
    Ok(PromptEval {
        accuracy: correct as f64 / samples.len() as f64,
        density_mse: (count > 0).then(|| se / count as f64),
    })
}

/// Frozen guidance for a batch: density map and embedding grid.
#[derive(Clone, Debug)]
pub struct Guidance<S> {
    /// `[b, hp, wp, 1]`.
    pub density: Tensor<S>,
    /// `[b, hp, wp, d_c]`.
    pub grid: Tensor<S>,
}

/// Computes guidance with the tiny encoder and trained prompts.
pub fn guidance<S: Scalar>(
    enc: &TinyEncoder,
    enc_store: &ParamStore<S>,
    prompts: &PromptPair,
    prompt_store: &ParamStore<S>,
    images: Tensor<S>,
) -> Result<Guidance<S>> {
    let g = Graph::new();
    let x = g.constant(images);
    let grid = enc.encode_image(&g, enc_store, x)?;
    let text = prompts.text(&g, enc, enc_store, prompt_store)?;
    let scale = enc.logit_scale(&g, enc_store);
    let md = density_map(&g, grid, text, scale)?;
    let density = g.value(md).clone();
    let grid = g.value(grid).clone();
    Ok(Guidance { density, grid })
}

/// Guidance from imported embeddings: one grid plus haze/clear text rows.
pub fn guidance_from_embeddings<S: Scalar>(
    grid: &[f32],
    hp: usize,
    wp: usize,
    haze: &[f32],
    clear: &[f32],
    logit_scale: f64,
) -> Result<Guidance<S>> {
    let d = haze.len();
    if clear.len() != d || grid.len() != hp * wp * d {
        return Err(Error::shape("imported guidance", &[hp, wp, d], &[grid.len()]));
    }
    let g = Graph::<S>::new();
    let grid_t = Tensor::from_fn(vec![1, hp, wp, d], |i| S::of(grid[i] as f64));
    let gv = g.constant(grid_t.clone());
    let text = Tensor::from_fn(vec![2, d], |i| {
        S::of(if i < d { haze[i] } else { clear[i - d] } as f64)
    });
    let text = g.l2_normalize(g.constant(text))?;
    let scale = g.constant(Tensor::scalar(S::of(logit_scale)));
    let md = density_map(&g, gv, text, scale)?;
    let density = g.value(md).clone();
    Ok(Guidance {
        density,
        grid: grid_t,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Density/semantic-guided weights.
    Ceda,
    /// Plain sum of the two paths.
    Add,
}

/// Per-stage weight generator.
#[derive(Clone, Debug)]
pub struct CedaStage {
    input_proj: Linear,
    image_proj: Linear,
    /// Image tokens attend to input tokens.
    q_image: Linear,
    k_input: Linear,
    v_input: Linear,
    /// Input tokens attend to image tokens.
    q_input: Linear,
    k_image: Linear,
    v_image: Linear,
    fuse: Linear,
    pub weight_proj: Linear,
    pub dim: usize,
    pub normalize: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct AggregationWeights {
    /// `[b, h, w, 1]`.
    pub short: Var,
    pub long: Var,
}

impl CedaStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        embed_dim: usize,
        dim: usize,
        normalize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let lin = |store: &mut ParamStore<S>, rng: &mut R, n: &str, a: usize, b: usize| {
            Linear::new(store, &format!("{name}.{n}"), a, b, true, rng)
        };
        Ok(CedaStage {
            input_proj: lin(store, rng, "input_proj", channels, dim)?,
            image_proj: lin(store, rng, "image_proj", embed_dim, dim)?,
            q_image: lin(store, rng, "q_image", dim, dim)?,
            k_input: lin(store, rng, "k_input", dim, dim)?,
            v_input: lin(store, rng, "v_input", dim, dim)?,
            q_input: lin(store, rng, "q_input", dim, dim)?,
            k_image: lin(store, rng, "k_image", dim, dim)?,
            v_image: lin(store, rng, "v_image", dim, dim)?,
            fuse: lin(store, rng, "fuse", 2 * dim, dim)?,
            weight_proj: Linear::zeros(store, &format!("{name}.weight_proj"), dim + 1, 2, true, rng)?,
            dim,
            normalize,
        })
    }

    /// Refined semantic map `[b, hp, wp, dim]` from the embedding grid and the
    /// stage-entry features, both reduced to the grid size and `dim` channels.
    pub fn semantic_map<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        image_grid: Var,
        features: Var,
    ) -> Result<Var> {
        let gs = g.shape(image_grid);
        let (b, hp, wp) = (gs[0], gs[1], gs[2]);
        let pooled = g.adaptive_avg_pool(features, hp, wp)?;
        let fin = self.input_proj.forward(g, store, pooled)?;
        let fimg = self.image_proj.forward(g, store, image_grid)?;
        let fin = g.reshape(fin, &[b, hp * wp, self.dim])?;
        let fimg = g.reshape(fimg, &[b, hp * wp, self.dim])?;
        let (a1, _) = cross_attention(
            g,
            self.q_image.forward(g, store, fimg)?,
            self.k_input.forward(g, store, fin)?,
            self.v_input.forward(g, store, fin)?,
        )?;
        let (a2, _) = cross_attention(
            g,
            self.q_input.forward(g, store, fin)?,
            self.k_image.forward(g, store, fimg)?,
            self.v_image.forward(g, store, fimg)?,
        )?;
        let ms = self.fuse.forward(g, store, g.concat(&[a1, a2])?)?;
        g.reshape(ms, &[b, hp, wp, self.dim])
    }

    /// Concat → bilinear resize to `(h, w)` → projection to two logits →
    /// softmax (unless disabled) → split.
    pub fn weights<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        density: Var,
        semantic: Var,
        h: usize,
        w: usize,
    ) -> Result<AggregationWeights> {
        let joint = g.concat(&[density, semantic])?;
        let up = g.bilinear_resize(joint, h, w)?;
        let logits = self.weight_proj.forward(g, store, up)?;
        let wts = if self.normalize {
            g.softmax_last(logits)?
        } else {
            logits
        };
        Ok(AggregationWeights {
            short: g.narrow(wts, 0, 1)?,
            long: g.narrow(wts, 1, 1)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        density: Var,
        image_grid: Var,
        features: Var,
        h: usize,
        w: usize,
    ) -> Result<AggregationWeights> {
        let ms = self.semantic_map(g, store, image_grid, features)?;
        self.weights(g, store, density, ms, h, w)
    }
}

/// `Softmax(Q Kᵀ / √d) V` over `[b, n, d]` tokens; returns output and weights.
pub fn cross_attention<S: Scalar>(g: &Graph<S>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().expect("rank 3");
    let scores = g.bmm(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax_last(scores)?;
    Ok((g.bmm(attn, v, false, false)?, attn))
}

/// `W_short · F_short + W_long · F_long`, weights broadcast over channels.
pub fn aggregate<S: Scalar>(
    g: &Graph<S>,
    short: Var,
    long: Var,
    w: &AggregationWeights,
) -> Result<Var> {
    let (ss, sl) = (g.shape(short), g.shape(long));
    let ws = g.shape(w.short);
    if ss != sl || ss.len() != 4 || ws.len() != 4 || ws[..3] != ss[..3] || ws[3] != 1 {
        return Err(Error::contract(format!(
            "aggregate shapes: short {ss:?}, long {sl:?}, weights {ws:?}"
        )));
    }
    let a = g.mul(short, w.short)?;
    let b = g.mul(long, w.long)?;
    g.add(a, b)
}
