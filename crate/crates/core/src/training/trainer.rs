//! Supervised dehazing loop over precomputed guidance.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Tensor};
use crate::ceda::Guidance;
use crate::dehazer::{aligned_input, Guide};
use crate::error::{Error, Result};
use crate::haze::HazeTriplet;
use crate::image::Image;
use crate::network::{crop, Network};
use crate::training::loss::{dehaze_loss, FeatureNet, LossConfig};
use crate::training::metrics::Quality;
use crate::training::optim::{Adam, AdamConfig, CosineSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Cosine cycles over `steps`; more than one restarts the schedule.
    pub cycles: u64,
    pub loss: LossConfig,
    /// Validation period in steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Stops once validation PSNR reaches this value.
    pub target_psnr: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 1,
            lr_max: 2e-4,
            lr_min: 2e-6,
            cycles: 1,
            loss: LossConfig::default(),
            eval_every: 250,
            target_psnr: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        let lr_ok = self.lr_min.is_finite() && self.lr_max.is_finite() && 0.0 <= self.lr_min;
        if !lr_ok || self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        self.loss.validate()
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_steps: self.steps,
            cycles: self.cycles.max(1),
        }
    }
}

/// One pair padded to the network alignment, with its guidance.
pub struct TrainSample {
    pub hazy: Tensor<f32>,
    pub clear: Tensor<f32>,
    pub guidance: Guidance<f32>,
    pub clear_image: Image,
    pub hazy_image: Image,
}

impl TrainSample {
    pub fn height(&self) -> usize {
        self.clear_image.height()
    }

    pub fn width(&self) -> usize {
        self.clear_image.width()
    }
}

/// Pads each pair and computes its guidance once; `stems[i]` names pair
/// `i` for imported embeddings.
pub fn prepare(
    triplets: &[HazeTriplet],
    stems: &[String],
    guide: &Guide,
    alignment: usize,
) -> Result<Vec<TrainSample>> {
    if stems.len() != triplets.len() {
        return Err(Error::contract("one stem per triplet"));
    }
    triplets
        .iter()
        .zip(stems)
        .map(|(t, stem)| {
            let hazy = aligned_input(&t.hazy, alignment);
            let clear = aligned_input(&t.clear, alignment);
            let guidance = guide.guidance(&hazy, stem)?;
            Ok(TrainSample {
                hazy,
                clear,
                guidance,
                clear_image: t.clear.clone(),
                hazy_image: t.hazy.clone(),
            })
        })
        .collect()
}

/// Dehazed output of one prepared sample, cropped and clamped.
pub fn predict(net: &Network, store: &ParamStore<f32>, s: &TrainSample) -> Result<Image> {
    let g = Graph::new();
    let x = g.constant(s.hazy.clone());
    let y = net.forward(&g, store, x, &s.guidance)?;
    let y = crop(&g, y, s.height(), s.width())?;
    let out = Image::from_tensor(&g.value(y), 0)?;
    Ok(out.clamped())
}

pub fn evaluate(net: &Network, store: &ParamStore<f32>, samples: &[TrainSample]) -> Result<Quality> {
    let q = samples
        .iter()
        .map(|s| Quality::of(&predict(net, store, s)?, &s.clear_image))
        .collect::<Result<Vec<_>>>()?;
    Ok(Quality::mean(&q))
}

/// Quality of the hazy inputs themselves.
pub fn hazy_baseline(samples: &[TrainSample]) -> Result<Quality> {
    let q = samples
        .iter()
        .map(|s| Quality::of(&s.hazy_image, &s.clear_image))
        .collect::<Result<Vec<_>>>()?;
    Ok(Quality::mean(&q))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub val: Option<Quality>,
}

pub const LOG_HEADER: &str = "step,lr,loss,psnr_val,ssim_val";

/// CSV training log; validation columns are empty on steps without one.
pub struct CsvLog<W: Write> {
    out: W,
}

impl<W: Write> CsvLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{LOG_HEADER}")?;
        Ok(CsvLog { out })
    }

    pub fn row(&mut self, r: &LogRow) -> Result<()> {
        let (p, s) = match r.val {
            Some(q) => (format!("{:.6}", q.psnr), format!("{:.6}", q.ssim)),
            None => (String::new(), String::new()),
        };
        writeln!(self.out, "{},{:e},{:.8},{p},{s}", r.step, r.lr, r.loss)?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub evals: Vec<(u64, Quality)>,
}

fn batch_of<'a>(samples: &'a [TrainSample], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Guidance<f32>)> {
    let pick = |f: &dyn Fn(&'a TrainSample) -> &'a Tensor<f32>| {
        Tensor::stack_batch(&idx.iter().map(|&i| f(&samples[i])).collect::<Vec<_>>())
    };
    let hazy = pick(&|s| &s.hazy)?;
    let clear = pick(&|s| &s.clear)?;
    let density = pick(&|s| &s.guidance.density)?;
    let grid = pick(&|s| &s.guidance.grid)?;
    Ok((hazy, clear, Guidance { density, grid }))
}

/// Trains `net` on `train`, validating on `val`; `on_row` receives one row
/// per step.
pub fn train(
    net: &Network,
    store: &mut ParamStore<f32>,
    train: &[TrainSample],
    val: &[TrainSample],
    cfg: &TrainConfig,
    features: Option<FeatureNet<f32>>,
    mut on_row: impl FnMut(&LogRow) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let (h, w) = (train[0].height(), train[0].width());
    if train.iter().any(|s| (s.height(), s.width()) != (h, w)) {
        return Err(Error::Config("training pairs must share one size".into()));
    }
    let schedule = cfg.schedule();
    let mut adam = Adam::new(store, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let (hazy, clear, gd) = batch_of(train, &idx)?;
        let g = Graph::new();
        let x = g.constant(hazy);
        let target = g.constant(clear);
        let y = net.forward(&g, store, x, &gd)?;
        let (y, target) = (crop(&g, y, h, w)?, crop(&g, target, h, w)?);
        let terms = dehaze_loss(&g, y, target, &cfg.loss, features)?;
        let loss = g.value(terms.total).item()? as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        store.zero_grads();
        g.backward(terms.total)?;
        g.write_param_grads(store);
        drop(g);
        let lr = schedule.lr(step);
        adam.step(store, lr)?;
        report.losses.push(loss);
        let done = step + 1;
        let due = done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let val_q = if due && !val.is_empty() {
            let q = evaluate(net, store, val)?;
            report.evals.push((done, q));
            Some(q)
        } else {
            None
        };
        on_row(&LogRow {
            step: done,
            lr,
            loss,
            val: val_q,
        })?;
        if let (Some(q), Some(t)) = (val_q, cfg.target_psnr) {
            if q.psnr >= t {
                break;
            }
        }
    }
    Ok(report)
}
