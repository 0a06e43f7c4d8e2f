//! U-shaped dehazing network of dual-path blocks with stage-wise guidance.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{window_attention, AttentionParams, WindowConfig};
use crate::autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::ceda::{aggregate, AggregationWeights, CedaStage, Fusion, Guidance};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvTranspose, LayerNorm, Linear};
use crate::mamba::MambaPath;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub window: usize,
    pub state_dim: usize,
    pub expand: usize,
    pub ffn_expand: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub semantic_dim: usize,
    pub prompt_len: usize,
    pub fusion: Fusion,
    pub normalize_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![16, 32, 64],
            blocks: vec![2, 2, 2],
            window: 8,
            state_dim: 8,
            expand: 2,
            ffn_expand: 2,
            patch: 8,
            embed_dim: 32,
            semantic_dim: 64,
            prompt_len: 8,
            fusion: Fusion::Ceda,
            normalize_weights: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::Config("widths and blocks must be nonempty and equally long".into()));
        }
        if self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Config("widths and block counts must be positive".into()));
        }
        let dims = [
            ("window", self.window),
            ("state_dim", self.state_dim),
            ("expand", self.expand),
            ("ffn_expand", self.ffn_expand),
            ("patch", self.patch),
            ("embed_dim", self.embed_dim),
            ("semantic_dim", self.semantic_dim),
            ("prompt_len", self.prompt_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Inputs are padded to a multiple of this on both axes.
    pub fn alignment(&self) -> usize {
        let a = self.window << (self.widths.len() - 1);
        lcm(a, self.patch)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// How a block combines its two paths.
#[derive(Clone, Copy, Debug)]
pub enum Mixing<'a> {
    Weights(&'a AggregationWeights),
    Add,
    ShortOnly,
    LongOnly,
}

#[derive(Clone, Debug)]
pub struct TrambaBlock {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub mamba: MambaPath,
    pub norm2: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub window: usize,
    pub channels: usize,
}

impl TrambaBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        stage: usize,
        index: usize,
        channels: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let tag = format!("{stage}.{index}");
        let hidden = channels * cfg.ffn_expand;
        Ok(TrambaBlock {
            norm1: LayerNorm::new(store, &format!("block.{tag}.norm1"), channels, rng)?,
            attn: AttentionParams::new(store, &format!("attn.{tag}"), channels, channels, rng)?,
            mamba: MambaPath::new(store, &format!("mamba.{tag}"), channels, cfg.expand, cfg.state_dim, rng)?,
            norm2: LayerNorm::new(store, &format!("block.{tag}.norm2"), channels, rng)?,
            ffn_in: Linear::new(store, &format!("ffn.{tag}.in"), channels, hidden, true, rng)?,
            ffn_out: Linear::new(store, &format!("ffn.{tag}.out"), hidden, channels, true, rng)?,
            window: cfg.window,
            channels,
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        mixing: Mixing<'_>,
    ) -> Result<Var> {
        self.forward_traced(g, store, x, mixing, &mut Vec::new())
    }

    /// As [`forward`](Self::forward), pushing the attention weights
    /// `[n_windows, m*m, m*m]` onto `trace` when the short path runs.
    pub fn forward_traced<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        mixing: Mixing<'_>,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[3] != self.channels {
            return Err(Error::contract(format!(
                "block expects [b, h, w, {}], got {s:?}",
                self.channels
            )));
        }
        let n = self.norm1.forward(g, store, x)?;
        let cfg = WindowConfig {
            window: self.window,
            dim_k: self.channels,
        };
        let mut short = || -> Result<Var> {
            let o = window_attention(g, store, n, cfg, &self.attn)?;
            trace.push(o.weights);
            Ok(o.out)
        };
        let mixed = match mixing {
            Mixing::ShortOnly => short()?,
            Mixing::LongOnly => self.mamba.forward(g, store, n)?,
            Mixing::Add => {
                let a = short()?;
                let m = self.mamba.forward(g, store, n)?;
                g.add(a, m)?
            }
            Mixing::Weights(w) => {
                let a = short()?;
                let m = self.mamba.forward(g, store, n)?;
                aggregate(g, a, m, w)?
            }
        };
        let y = g.add(x, mixed)?;
        let n2 = self.norm2.forward(g, store, y)?;
        let f = g.silu(self.ffn_in.forward(g, store, n2)?);
        let f = self.ffn_out.forward(g, store, f)?;
        g.add(y, f)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<TrambaBlock>,
    pub ceda: Option<CedaStage>,
}

impl Stage {
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        index: usize,
        channels: usize,
        count: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..count)
            .map(|b| TrambaBlock::new(store, index, b, channels, cfg, rng))
            .collect::<Result<_>>()?;
        let ceda = match cfg.fusion {
            Fusion::Ceda => Some(CedaStage::new(
                store,
                &format!("ceda.{index}"),
                channels,
                cfg.embed_dim,
                cfg.semantic_dim,
                cfg.normalize_weights,
                rng,
            )?),
            Fusion::Add => None,
        };
        Ok(Stage { blocks, ceda })
    }

    fn forward<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        guide: &GuideVars,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let s = g.shape(x);
        let weights = match &self.ceda {
            Some(c) => Some(c.forward(g, store, guide.density, guide.grid, x, s[1], s[2])?),
            None => None,
        };
        let mut h = x;
        for b in &self.blocks {
            let mixing = match &weights {
                Some(w) => Mixing::Weights(w),
                None => Mixing::Add,
            };
            h = b.forward_traced(g, store, h, mixing, trace)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
struct GuideVars {
    density: Var,
    grid: Var,
}

/// Attention weights of one block; stages count encoder first, then decoder.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub stage: usize,
    pub block: usize,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: ModelConfig,
    pub shallow: Conv,
    pub encoder: Vec<Stage>,
    pub down: Vec<Conv>,
    pub up: Vec<ConvTranspose>,
    pub fuse: Vec<Linear>,
    pub decoder: Vec<Stage>,
    pub output: Conv,
}

impl Network {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = &cfg.widths;
        let n = w.len();
        let shallow = Conv::new(store, "net.shallow", 3, 3, w[0], 1, false, rng)?;
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for i in 0..n {
            encoder.push(Stage::new(store, i, w[i], cfg.blocks[i], &cfg, rng)?);
            if i + 1 < n {
                down.push(Conv::new(store, &format!("net.down.{i}"), 3, w[i], w[i + 1], 2, false, rng)?);
            }
        }
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for (k, i) in (0..n - 1).rev().enumerate() {
            up.push(ConvTranspose::new(store, &format!("net.up.{i}"), 2, w[i + 1], w[i], rng)?);
            fuse.push(Linear::new(store, &format!("net.fuse.{i}"), 2 * w[i], w[i], true, rng)?);
            decoder.push(Stage::new(store, n + k, w[i], cfg.blocks[i], &cfg, rng)?);
        }
        let output = Conv::new(store, "net.output", 3, w[0], 3, 1, false, rng)?;
        Ok(Network {
            cfg,
            shallow,
            encoder,
            down,
            up,
            fuse,
            decoder,
            output,
        })
    }

    pub fn with_seed<S: Scalar>(store: &mut ParamStore<S>, cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::new(store, cfg, &mut rng)
    }

    /// Residual branch and output for an already aligned input
    /// `[b, h, w, 3]`; the result is `x + residual`, unclamped.
    pub fn forward<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        guidance: &Guidance<S>,
    ) -> Result<Var> {
        let residual = self.residual(g, store, x, guidance, None)?;
        g.add(x, residual)
    }

    /// The learned residual; `drop_skip` zeroes one encoder skip (0 = finest).
    pub fn residual<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        guidance: &Guidance<S>,
        drop_skip: Option<usize>,
    ) -> Result<Var> {
        self.residual_traced(g, store, x, guidance, drop_skip, &mut Vec::new())
    }

    /// As [`residual`](Self::residual), collecting the attention weights of
    /// every block in execution order, encoder first.
    pub fn residual_traced<S: Scalar>(
        &self,
        g: &Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        guidance: &Guidance<S>,
        drop_skip: Option<usize>,
        trace: &mut Vec<AttentionTrace>,
    ) -> Result<Var> {
        let s = g.shape(x);
        let a = self.cfg.alignment();
        if s.len() != 4 || s[3] != 3 || s[1] % a != 0 || s[2] % a != 0 {
            return Err(Error::contract(format!(
                "network input {s:?} must be [b, h, w, 3] with h, w multiples of {a}"
            )));
        }
        let ds = guidance.density.shape();
        let gs = guidance.grid.shape();
        let coarsest = 1 << (self.encoder.len() - 1);
        let fits = ds.len() == 4
            && gs.len() == 4
            && ds[0] == s[0]
            && ds[3] == 1
            && gs[..3] == ds[..3]
            && gs[3] == self.cfg.embed_dim
            && (1..=s[1] / coarsest).contains(&ds[1])
            && (1..=s[2] / coarsest).contains(&ds[2]);
        if !fits {
            return Err(Error::contract(format!(
                "guidance {ds:?} / {gs:?} does not match input {s:?}"
            )));
        }
        let guide = GuideVars {
            density: g.constant(guidance.density.clone()),
            grid: g.constant(guidance.grid.clone()),
        };
        let mut h = self.shallow.forward(g, store, x)?;
        let mut skips = Vec::new();
        let n = self.encoder.len();
        for i in 0..n {
            let mut w = Vec::new();
            h = self.encoder[i].forward(g, store, h, &guide, &mut w)?;
            trace.extend(w.into_iter().enumerate().map(|(block, weights)| AttentionTrace {
                stage: i,
                block,
                weights,
            }));
            if i + 1 < n {
                skips.push(h);
                h = self.down[i].forward(g, store, h)?;
            }
        }
        for (k, i) in (0..n - 1).rev().enumerate() {
            h = self.up[k].forward(g, store, h)?;
            let skip = if drop_skip == Some(i) {
                g.scale(skips[i], 0.0)
            } else {
                skips[i]
            };
            let cat = g.concat(&[h, skip])?;
            h = self.fuse[k].forward(g, store, cat)?;
            let mut w = Vec::new();
            h = self.decoder[k].forward(g, store, h, &guide, &mut w)?;
            trace.extend(w.into_iter().enumerate().map(|(block, weights)| AttentionTrace {
                stage: n + k,
                block,
                weights,
            }));
        }
        self.output.forward(g, store, h)
    }
}

/// Edge-replicating pad of `[b, h, w, c]` to `(ph, pw)`.
pub fn pad_tensor<S: Scalar>(t: &Tensor<S>, ph: usize, pw: usize) -> Result<Tensor<S>> {
    let s = t.shape();
    if s.len() != 4 || ph < s[1] || pw < s[2] {
        return Err(Error::shape("pad", s, &[ph, pw]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = t.data();
    let mut out = Vec::with_capacity(b * ph * pw * c);
    for bi in 0..b {
        for y in 0..ph {
            for x in 0..pw {
                let off = ((bi * h + y.min(h - 1)) * w + x.min(w - 1)) * c;
                out.extend_from_slice(&src[off..off + c]);
            }
        }
    }
    Tensor::new(vec![b, ph, pw, c], out)
}

/// Differentiable top-left crop of `[b, h, w, c]` to `(oh, ow)`.
pub fn crop<S: Scalar>(g: &Graph<S>, x: Var, oh: usize, ow: usize) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || oh > s[1] || ow > s[2] {
        return Err(Error::shape("crop", &s, &[oh, ow]));
    }
    if oh == s[1] && ow == s[2] {
        return Ok(x);
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let idx: Vec<usize> = (0..b)
        .flat_map(|bi| (0..oh).flat_map(move |y| (0..ow).map(move |xx| (bi * h + y) * w + xx)))
        .collect();
    let rows = g.gather_rows(x, Rc::from(idx))?;
    g.reshape(rows, &[b, oh, ow, c])
}

pub fn aligned(n: usize, a: usize) -> usize {
    n.div_ceil(a) * a
}
