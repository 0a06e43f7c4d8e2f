//! Reconstruction loss: pixel L1 plus L1 on frozen encoder activations.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Scalar, Var};
use crate::encoder::TinyEncoder;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub l1_weight: f64,
    pub perceptual_weight: f64,
    /// Encoder conv stages compared by the perceptual term.
    pub perceptual_stages: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            l1_weight: 1.0,
            perceptual_weight: 0.05,
            perceptual_stages: vec![0, 1],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.l1_weight) || !ok(self.perceptual_weight) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got {} and {}",
                self.l1_weight, self.perceptual_weight
            )));
        }
        Ok(())
    }
}

/// Frozen feature extractor for the perceptual term.
#[derive(Clone, Copy)]
pub struct FeatureNet<'a, S: Scalar> {
    pub encoder: &'a TinyEncoder,
    pub store: &'a ParamStore<S>,
}

pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub perceptual: Option<Var>,
}

/// `w1 · mean|pred − target| + w2 · Σ_stages mean|φ(pred) − φ(target)|`.
/// The perceptual term needs `features` whenever its weight is positive.
pub fn dehaze_loss<S: Scalar>(
    g: &Graph<S>,
    pred: Var,
    target: Var,
    cfg: &LossConfig,
    features: Option<FeatureNet<S>>,
) -> Result<LossTerms> {
    let l1 = g.l1_loss(pred, target)?;
    let mut total = g.scale(l1, cfg.l1_weight);
    let mut perceptual = None;
    if cfg.perceptual_weight > 0.0 && !cfg.perceptual_stages.is_empty() {
        let f = features.ok_or_else(|| {
            Error::Config("perceptual weight is positive but no feature network was given".into())
        })?;
        let fp = f.encoder.image_features(g, f.store, pred)?;
        let ft = f.encoder.image_features(g, f.store, target)?;
        let mut sum: Option<Var> = None;
        for &s in &cfg.perceptual_stages {
            let (a, b) = match (fp.stages.get(s), ft.stages.get(s)) {
                (Some(a), Some(b)) => (*a, *b),
                _ => {
                    return Err(Error::Config(format!(
                        "perceptual stage {s} out of range ({} stages)",
                        fp.stages.len()
                    )))
                }
            };
            let d = g.l1_loss(a, b)?;
            sum = Some(match sum {
                Some(acc) => g.add(acc, d)?,
                None => d,
            });
        }
        let p = sum.expect("nonempty stage list");
        total = g.add(total, g.scale(p, cfg.perceptual_weight))?;
        perceptual = Some(p);
    }
    Ok(LossTerms {
        total,
        l1,
        perceptual,
    })
}
