//! Frozen vision-language encoder: a tiny conv/text tower trained locally,
//! or patch embeddings imported from a `TMEB` file.

pub mod tmeb;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::image::{batch_tensor, Image};
use crate::layers::{Conv, Linear};
use crate::training::optim::{Adam, AdamConfig};

pub use tmeb::EmbeddingFile;

/// Fixed toy vocabulary of the text tower.
pub const VOCAB: &[&str] = &[
    "a", "photo", "of", "the", "hazy", "clear", "foggy", "clean", "image", "scene", "haze",
    "misty", "sunny", "picture", "outdoor", "bright",
];

pub const HAZY_CAPTION: &str = "a hazy photo";
pub const CLEAR_CAPTION: &str = "a clear photo";

pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let ids: Vec<usize> = text
        .split_whitespace()
        .map(|w| {
            VOCAB
                .iter()
                .position(|v| v.eq_ignore_ascii_case(w))
                .ok_or_else(|| Error::NotFound(format!("token {w:?} not in vocabulary")))
        })
        .collect::<Result<_>>()?;
    if ids.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    Ok(ids)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channel widths of the stride-2 conv stages; the patch size is `2^len`.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 32],
            embed_dim: 32,
            token_dim: 32,
            text_hidden: 64,
        }
    }
}

impl EncoderConfig {
    pub fn patch(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() > 5 || self.widths.contains(&0) {
            return Err(Error::Config("encoder widths must be 1-5 positive values".into()));
        }
        if self.embed_dim == 0 || self.token_dim == 0 || self.text_hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

pub const LOGIT_SCALE_INIT: f64 = 1.0 / 0.07;
pub const LOGIT_SCALE_MAX: f64 = 100.0;

#[derive(Clone, Debug)]
pub struct TinyEncoder {
    pub cfg: EncoderConfig,
    convs: Vec<Conv>,
    head: Linear,
    tokens: ParamId,
    text_fc1: Linear,
    text_fc2: Linear,
    log_scale: ParamId,
}

pub struct ImageFeatures {
    /// Activations after each conv stage.
    pub stages: Vec<Var>,
    /// `[b, H/patch, W/patch, embed_dim]`, not normalized.
    pub grid: Var,
}

impl TinyEncoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = Self::PREFIX;
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &w) in cfg.widths.iter().enumerate() {
            convs.push(Conv::new(store, &format!("{p}.conv{i}"), 3, cin, w, 2, false, rng)?);
            cin = w;
        }
        let head = Linear::new(store, &format!("{p}.head"), cin, cfg.embed_dim, true, rng)?;
        let tokens = store.init(
            format!("{p}.tokens"),
            &[VOCAB.len(), cfg.token_dim],
            Init::Normal { std: 1.0 },
            rng,
        )?;
        let text_fc1 = Linear::new(store, &format!("{p}.text_fc1"), cfg.token_dim, cfg.text_hidden, true, rng)?;
        let text_fc2 = Linear::new(store, &format!("{p}.text_fc2"), cfg.text_hidden, cfg.embed_dim, true, rng)?;
        let log_scale = store.init(
            format!("{p}.log_logit_scale"),
            &[1],
            Init::Const(LOGIT_SCALE_INIT.ln()),
            rng,
        )?;
        Ok(TinyEncoder {
            cfg,
            convs,
            head,
            tokens,
            text_fc1,
            text_fc2,
            log_scale,
        })
    }

    pub fn patch(&self) -> usize {
        self.cfg.patch()
    }

    pub fn image_features<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
    ) -> Result<ImageFeatures> {
        let s = g.shape(x);
        let p = self.patch();
        if s.len() != 4 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(Error::contract(format!(
                "encoder input {s:?} must be [b, h, w, 3] with h, w divisible by {p}"
            )));
        }
        let centered = g.add_scalar(x, -0.5);
        let mut h = centered;
        let mut stages = Vec::new();
        for conv in &self.convs {
            h = g.silu(conv.forward(g, store, h)?);
            stages.push(h);
        }
        let grid = self.head.forward(g, store, h)?;
        Ok(ImageFeatures { stages, grid })
    }

    pub fn encode_image<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        Ok(self.image_features(g, store, x)?.grid)
    }

    /// Embedding-table rows for vocabulary indices: `[k, token_dim]`.
    pub fn token_rows<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        ids: &[usize],
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        let table = g.param(store, self.tokens);
        g.gather_rows(table, ids.into())
    }

    /// Token rows `[p, k, token_dim]` (one sequence per prompt) to
    /// L2-normalized text embeddings `[p, embed_dim]`.
    pub fn encode_text<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        rows: Var,
    ) -> Result<Var> {
        let s = g.shape(rows);
        if s.len() != 3 || s[0] == 0 || s[1] == 0 || s[2] != self.cfg.token_dim {
            return Err(Error::shape("encode_text", &s, &[0, 0, self.cfg.token_dim]));
        }
        let pooled = g.mean_axis(rows, 1)?;
        let pooled = g.reshape(pooled, &[s[0], s[2]])?;
        let h = g.silu(self.text_fc1.forward(g, store, pooled)?);
        let out = self.text_fc2.forward(g, store, h)?;
        g.l2_normalize(out)
    }

    /// Text embeddings `[p, embed_dim]` of whitespace-tokenized captions,
    /// which must all have the same token count.
    pub fn encode_captions<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        captions: &[&str],
    ) -> Result<Var> {
        let ids: Vec<Vec<usize>> = captions.iter().map(|c| tokenize(c)).collect::<Result<_>>()?;
        let k = ids.first().ok_or_else(|| Error::contract("no captions"))?.len();
        if ids.iter().any(|i| i.len() != k) {
            return Err(Error::contract("captions must have equal token counts"));
        }
        let flat: Vec<usize> = ids.concat();
        let rows = self.token_rows(g, store, &flat)?;
        let rows = g.reshape(rows, &[captions.len(), k, self.cfg.token_dim])?;
        self.encode_text(g, store, rows)
    }

    /// The similarity scale as a `[1]` node.
    pub fn logit_scale<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>) -> Var {
        g.exp(g.param(store, self.log_scale))
    }

    pub fn logit_scale_value<S: Scalar>(&self, store: &ParamStore<S>) -> f64 {
        store.get(self.log_scale).value.data()[0].to_f64_lossy().exp()
    }

    fn clamp_scale<S: Scalar>(&self, store: &mut ParamStore<S>) {
        let v = &mut store.get_mut(self.log_scale).value.data_mut()[0];
        if v.to_f64_lossy() > LOGIT_SCALE_MAX.ln() {
            *v = S::of(LOGIT_SCALE_MAX.ln());
        }
    }
}

/// Mean over grid positions, then L2 normalization: `[b, h, w, c] -> [b, c]`.
pub fn pool<S: Scalar>(g: &Graph<S>, grid: Var) -> Result<Var> {
    let s = g.shape(grid);
    if s.len() != 4 {
        return Err(Error::shape("pool", &s, &[0, 0, 0, 0]));
    }
    let flat = g.reshape(grid, &[s[0], s[1] * s[2], s[3]])?;
    let mean = g.mean_axis(flat, 1)?;
    let mean = g.reshape(mean, &[s[0], s[3]])?;
    g.l2_normalize(mean)
}

/// `scale · a bᵀ` for row-embedding matrices `a [n, d]`, `b [p, d]`.
pub fn scaled_similarity<S: Scalar>(g: &Graph<S>, a: Var, b: Var, scale: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("similarity", &sa, &sb));
    }
    let a3 = g.reshape(a, &[1, sa[0], sa[1]])?;
    let b3 = g.reshape(b, &[1, sb[0], sb[1]])?;
    let sim = g.bmm(a3, b3, false, true)?;
    let sim = g.reshape(sim, &[sa[0], sb[0]])?;
    g.mul(sim, scale)
}

/// A labeled training image: `clear == false` means hazy.
#[derive(Clone, Debug)]
pub struct Labeled {
    pub image: Image,
    pub clear: bool,
}

/// Hazy and clear halves of every triplet, hazy first.
pub fn labeled_from_triplets(triplets: &[crate::haze::HazeTriplet]) -> Vec<Labeled> {
    triplets
        .iter()
        .flat_map(|t| {
            [
                Labeled {
                    image: t.hazy.clone(),
                    clear: false,
                },
                Labeled {
                    image: t.clear.clone(),
                    clear: true,
                },
            ]
        })
        .collect()
}

/// Indices of `per_class` hazy and `per_class` clear items, interleaved.
pub fn balanced_indices<R: Rng + ?Sized>(
    clear: &[bool],
    per_class: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut hazy: Vec<usize> = (0..clear.len()).filter(|&i| !clear[i]).collect();
    let mut clean: Vec<usize> = (0..clear.len()).filter(|&i| clear[i]).collect();
    if hazy.is_empty() || clean.is_empty() {
        return Err(Error::Config("labeled set needs both hazy and clear images".into()));
    }
    hazy.shuffle(rng);
    clean.shuffle(rng);
    Ok((0..per_class)
        .flat_map(|i| [hazy[i % hazy.len()], clean[i % clean.len()]])
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Images per class in each batch.
    pub per_class: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            per_class: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
}

/// Symmetric contrastive loss between pooled image embeddings and the two
/// captions. The text-to-image target spreads uniformly over the images that
/// match each caption.
pub fn contrastive_loss<S: Scalar>(
    enc: &TinyEncoder,
    g: &Graph<S>,
    store: &ParamStore<S>,
    batch: &[&Labeled],
) -> Result<Var> {
    let images: Vec<&Image> = batch.iter().map(|l| &l.image).collect();
    let x = g.constant(batch_tensor::<S>(&images)?);
    let emb = pool(g, enc.encode_image(g, store, x)?)?;
    let text = enc.encode_captions(g, store, &[HAZY_CAPTION, CLEAR_CAPTION])?;
    let scale = enc.logit_scale(g, store);
    let n = batch.len();
    let i2t = scaled_similarity(g, emb, text, scale)?;
    let i2t_target = Tensor::from_fn(vec![n, 2], |i| {
        let (row, col) = (i / 2, i % 2);
        S::of(f64::from(u8::from(batch[row].clear) == col as u8))
    });
    let l_i2t = g.cross_entropy(i2t, g.constant(i2t_target))?;
    let t2i = scaled_similarity(g, text, emb, scale)?;
    let counts = [
        batch.iter().filter(|l| !l.clear).count().max(1) as f64,
        batch.iter().filter(|l| l.clear).count().max(1) as f64,
    ];
    let t2i_target = Tensor::from_fn(vec![2, n], |i| {
        let (cap, img) = (i / n, i % n);
        let matches = usize::from(batch[img].clear) == cap;
        S::of(if matches { 1.0 / counts[cap] } else { 0.0 })
    });
    let l_t2i = g.cross_entropy(t2i, g.constant(t2i_target))?;
    let total = g.add(l_i2t, l_t2i)?;
    Ok(g.scale(total, 0.5))
}

/// Contrastive pretraining; freezes every encoder parameter afterwards.
pub fn pretrain<S: Scalar>(
    enc: &TinyEncoder,
    store: &mut ParamStore<S>,
    data: &[Labeled],
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let labels: Vec<bool> = data.iter().map(|l| l.clear).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(store, AdamConfig::default());
    let mut report = PretrainReport::default();
    for step in 0..cfg.steps {
        let batch: Vec<&Labeled> = balanced_indices(&labels, cfg.per_class, &mut rng)?
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let g = Graph::new();
        let loss = contrastive_loss(enc, &g, store, &batch)?;
        let lv = g.item(loss)?.to_f64_lossy();
        if !lv.is_finite() {
            return Err(Error::Numeric(format!(
                "encoder pretraining loss became {lv} at step {step} (seed {})",
                cfg.seed
            )));
        }
        report.losses.push(lv);
        g.backward(loss)?;
        store.zero_grads();
        g.write_param_grads(store);
        opt.step(store, cfg.lr)?;
        enc.clamp_scale(store);
    }
    store.freeze_prefix(TinyEncoder::PREFIX);
    Ok(report)
}

/// Fraction of images whose nearest caption matches their label.
pub fn retrieval_accuracy<S: Scalar>(
    enc: &TinyEncoder,
    store: &ParamStore<S>,
    data: &[Labeled],
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let mut correct = 0usize;
    for chunk in data.chunks(32) {
        let g = Graph::new();
        let images: Vec<&Image> = chunk.iter().map(|l| &l.image).collect();
        let x = g.constant(batch_tensor::<S>(&images)?);
        let emb = pool(&g, enc.encode_image(&g, store, x)?)?;
        let text = enc.encode_captions(&g, store, &[HAZY_CAPTION, CLEAR_CAPTION])?;
        let sim = scaled_similarity(&g, emb, text, g.constant(Tensor::scalar(S::one())))?;
        let sim = g.value(sim);
        for (l, row) in chunk.iter().zip(sim.data().chunks_exact(2)) {
            if (row[1] > row[0]) == l.clear {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
