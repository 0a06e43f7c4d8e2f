//! Parameterized building blocks bound to a [`ParamStore`].

use rand::Rng;

use crate::autograd::{Graph, Init, ParamId, ParamStore, Padding, Scalar, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init(
            format!("{name}.weight"),
            &[din, dout],
            Init::Uniform { fan_in: din, gain: 1.0 },
            rng,
        )?;
        let bias = if bias {
            Some(store.init(format!("{name}.bias"), &[dout], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn zeros<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init(format!("{name}.weight"), &[din, dout], Init::Zeros, rng)?;
        let bias = if bias {
            Some(store.init(format!("{name}.bias"), &[dout], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Uniform { fan_in: k * k * cin, gain: 1.0 }
        };
        let weight = store.init(format!("{name}.weight"), &[k, k, cin, cout], init, rng)?;
        let bias = store.init(format!("{name}.bias"), &[cout], Init::Zeros, rng)?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
            padding: Padding::Zeros,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad, self.padding)
    }
}

/// Stride-`k` transposed convolution with a `k×k` kernel (exact `×k` upscale).
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.init(
            format!("{name}.weight"),
            &[cin, k, k, cout],
            Init::Uniform { fan_in: cin, gain: 1.0 },
            rng,
        )?;
        let bias = store.init(format!("{name}.bias"), &[cout], Init::Zeros, rng)?;
        Ok(ConvTranspose {
            weight,
            bias,
            stride: k,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, Some(b), self.stride, 0)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.init(format!("{name}.gamma"), &[c], Init::Const(1.0), rng)?,
            beta: store.init(format!("{name}.beta"), &[c], Init::Zeros, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
