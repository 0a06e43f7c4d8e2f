//! Long-range path: selective state-space (S6) scans along four directions.

use std::rc::Rc;

use rand::{Rng, RngExt};

use crate::autograd::{Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowBackward,
        ScanDirection::ColForward,
        ScanDirection::ColBackward,
    ];

    /// Spatial index `y * w + x` visited at each sequence step.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let n = h * w;
        let col = |t: usize| (t % h) * w + t / h;
        match self {
            ScanDirection::RowForward => (0..n).collect(),
            ScanDirection::RowBackward => (0..n).rev().collect(),
            ScanDirection::ColForward => (0..n).map(col).collect(),
            ScanDirection::ColBackward => (0..n).rev().map(col).collect(),
        }
    }
}

fn dims4(g: &Graph<impl Scalar>, x: Var) -> Result<[usize; 4]> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape("feature map", &s, &[0, 0, 0, 0]));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Flattens `[b, h, w, c]` into `[b, h*w, c]` along one direction.
pub fn scan_expand<S: Scalar>(g: &Graph<S>, x: Var, d: ScanDirection) -> Result<Var> {
    let [b, h, w, c] = dims4(g, x)?;
    let order = d.order(h, w);
    let idx: Vec<usize> = (0..b)
        .flat_map(|bi| order.iter().map(move |s| bi * h * w + s))
        .collect();
    let rows = g.gather_rows(x, Rc::from(idx))?;
    g.reshape(rows, &[b, h * w, c])
}

/// Inverse of [`scan_expand`].
pub fn scan_restore<S: Scalar>(
    g: &Graph<S>,
    seq: Var,
    d: ScanDirection,
    h: usize,
    w: usize,
) -> Result<Var> {
    let s = g.shape(seq);
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape("scan_restore", &s, &[h * w]));
    }
    let (b, c) = (s[0], s[2]);
    let mut pos = vec![0; h * w];
    for (t, sp) in d.order(h, w).into_iter().enumerate() {
        pos[sp] = t;
    }
    let idx: Vec<usize> = (0..b)
        .flat_map(|bi| pos.iter().map(move |t| bi * h * w + t))
        .collect();
    let rows = g.gather_rows(seq, Rc::from(idx))?;
    g.reshape(rows, &[b, h, w, c])
}

#[derive(Clone, Debug)]
pub struct S6Params {
    pub a_log: ParamId,
    /// Token → (Δ low-rank input, B, C).
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub d_skip: ParamId,
    pub channels: usize,
    pub state: usize,
    pub dt_rank: usize,
}

impl S6Params {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || state == 0 {
            return Err(Error::Parameter("S6 channels and state must be positive".into()));
        }
        let dt_rank = channels.div_ceil(16);
        let a_log = store.insert(
            format!("{name}.a_log"),
            Tensor::from_fn(vec![channels, state], |i| S::of(((i % state) as f64 + 1.0).ln())),
        )?;
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), channels, dt_rank + 2 * state, false, rng)?;
        let dt_proj = Linear::new(store, &format!("{name}.dt_proj"), dt_rank, channels, true, rng)?;
        // Step sizes start log-uniform in [1e-3, 1e-1]; the bias is softplus⁻¹.
        let dt_bias: Vec<S> = (0..channels)
            .map(|_| {
                let dt = (rng.random_range(1e-3f64.ln()..1e-1f64.ln())).exp();
                S::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let bias = dt_proj.bias.expect("dt_proj has a bias");
        store.get_mut(bias).value.data_mut().copy_from_slice(&dt_bias);
        let d_skip = store.init(format!("{name}.d"), &[channels], Init::Const(1.0), rng)?;
        Ok(S6Params {
            a_log,
            x_proj,
            dt_proj,
            d_skip,
            channels,
            state,
            dt_rank,
        })
    }

    /// B ≡ 0 and D = 1, so the scan passes its input through unchanged.
    pub fn set_identity<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for v in store.get_mut(self.x_proj.weight).value.data_mut() {
            *v = S::zero();
        }
        for v in store.get_mut(self.d_skip).value.data_mut() {
            *v = S::one();
        }
    }
}

/// Runs S6 over `seq [b, l, channels]`.
pub fn s6_forward<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    seq: Var,
    p: &S6Params,
) -> Result<Var> {
    let proj = p.x_proj.forward(g, store, seq)?;
    let dt_in = g.narrow(proj, 0, p.dt_rank)?;
    let b_in = g.narrow(proj, p.dt_rank, p.state)?;
    let c_out = g.narrow(proj, p.dt_rank + p.state, p.state)?;
    let delta = g.softplus(p.dt_proj.forward(g, store, dt_in)?);
    let a = g.neg(g.exp(g.param(store, p.a_log)));
    let skip = g.param(store, p.d_skip);
    g.selective_scan(seq, delta, a, b_in, c_out, skip)
}

/// Per-direction S6 outputs, each restored to `[b, h, w, c]`.
///
/// The four directions share parameters and are scanned as one stacked batch.
pub fn four_way_directions<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    p: &S6Params,
) -> Result<[Var; 4]> {
    let [b, h, w, c] = dims4(g, x)?;
    let n = h * w;
    let mut idx = Vec::with_capacity(4 * b * n);
    for d in ScanDirection::ALL {
        let order = d.order(h, w);
        for bi in 0..b {
            idx.extend(order.iter().map(|s| bi * n + s));
        }
    }
    let stacked = g.gather_rows(x, Rc::from(idx))?;
    let stacked = g.reshape(stacked, &[4 * b, n, c])?;
    let y = s6_forward(g, store, stacked, p)?;
    let mut outs = Vec::with_capacity(4);
    for (di, d) in ScanDirection::ALL.into_iter().enumerate() {
        let mut pos = vec![0; n];
        for (t, sp) in d.order(h, w).into_iter().enumerate() {
            pos[sp] = t;
        }
        let back: Vec<usize> = (0..b)
            .flat_map(|bi| pos.iter().map(move |t| (di * b + bi) * n + t))
            .collect();
        let rows = g.gather_rows(y, Rc::from(back))?;
        outs.push(g.reshape(rows, &[b, h, w, c])?);
    }
    Ok([outs[0], outs[1], outs[2], outs[3]])
}

/// Sum of the four restored direction outputs, added pairwise.
pub fn four_way_scan<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    p: &S6Params,
) -> Result<Var> {
    let [y1, y2, y3, y4] = four_way_directions(g, store, x, p)?;
    let rows = g.add(y1, y2)?;
    let cols = g.add(y3, y4)?;
    g.add(rows, cols)
}

/// Projection in, gated four-way scan, projection out.
#[derive(Clone, Debug)]
pub struct MambaPath {
    pub in_proj: Linear,
    pub s6: S6Params,
    pub out_proj: Linear,
    pub inner: usize,
}

impl MambaPath {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        expand: usize,
        state: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = c * expand.max(1);
        Ok(MambaPath {
            in_proj: Linear::new(store, &format!("{name}.in_proj"), c, 2 * inner, false, rng)?,
            s6: S6Params::new(store, &format!("{name}.s6"), inner, state, rng)?,
            out_proj: Linear::new(store, &format!("{name}.out_proj"), inner, c, false, rng)?,
            inner,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let xz = self.in_proj.forward(g, store, x)?;
        let u = g.silu(g.narrow(xz, 0, self.inner)?);
        let z = g.silu(g.narrow(xz, self.inner, self.inner)?);
        let y = four_way_scan(g, store, u, &self.s6)?;
        let y = g.mul(y, z)?;
        self.out_proj.forward(g, store, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_orders() {
        assert_eq!(ScanDirection::RowForward.order(2, 2), vec![0, 1, 2, 3]);
        assert_eq!(ScanDirection::ColForward.order(2, 2), vec![0, 2, 1, 3]);
        assert_eq!(ScanDirection::RowBackward.order(2, 2), vec![3, 2, 1, 0]);
        assert_eq!(ScanDirection::ColBackward.order(2, 3), vec![5, 2, 4, 1, 3, 0]);
    }
}
