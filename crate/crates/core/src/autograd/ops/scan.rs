//! Fused selective state-space scan with a reverse-time backward pass.
//!
//! Per sequence, channel `d` and state `k`:
//! `h[t] = exp(delta[t,d] * a[d,k]) * h[t-1] + delta[t,d] * b[t,k] * u[t,d]`,
//! `y[t,d] = sum_k c[t,k] * h[t,k] + skip[d] * u[t,d]`, with `h[-1] = 0`.

use crate::autograd::graph::{accumulate, Grads, Graph, Node, Op, Var};
use crate::autograd::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

struct ScanInputs<'a, S> {
    u: &'a [S],
    delta: &'a [S],
    a: &'a [S],
    b: &'a [S],
    c: &'a [S],
    skip: &'a [S],
}

/// Dot product with independent partial sums.
#[inline(always)]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 8;
    let mut acc = [S::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            acc[j] += x[j] * y[j];
        }
    }
    for (j, (x, y)) in ra.iter().zip(rb).enumerate() {
        acc[j] += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// `a` is `[d, n]`; returns `[n, d]`.
fn transpose<S: Scalar>(a: &[S], d_: usize, n_: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for d in 0..d_ {
        for k in 0..n_ {
            out[k * d_ + d] = a[d * n_ + k];
        }
    }
    out
}

/// States and decays are stored per step as `[n, d]` so inner loops run
/// over channels.
fn forward_kernel<S: Scalar>(dims: &ScanDims, x: &ScanInputs<S>) -> (Vec<S>, Vec<S>, Vec<S>) {
    let ScanDims {
        batch,
        len,
        channels: d_,
        state: n_,
    } = *dims;
    let dn = d_ * n_;
    let at = transpose(x.a, d_, n_);
    let mut y = vec![S::zero(); batch * len * d_];
    let mut states = vec![S::zero(); batch * len * dn];
    let mut decays = vec![S::zero(); batch * len * dn];
    let mut coef = vec![S::zero(); d_];
    for step in 0..batch * len {
        let row = step * d_;
        let brow = &x.b[step * n_..][..n_];
        let crow = &x.c[step * n_..][..n_];
        let drow = &x.delta[row..][..d_];
        let urow = &x.u[row..][..d_];
        let dec = &mut decays[step * dn..][..dn];
        for k in 0..n_ {
            let ak = &at[k * d_..][..d_];
            let out = &mut dec[k * d_..][..d_];
            for d in 0..d_ {
                out[d] = drow[d] * ak[d];
            }
        }
        S::exp_in_place(dec);
        let coef = &mut coef[..d_];
        let yrow = &mut y[row..][..d_];
        for d in 0..d_ {
            coef[d] = drow[d] * urow[d];
            yrow[d] = x.skip[d] * urow[d];
        }
        let (prev, cur) = states.split_at_mut(step * dn);
        let cur = &mut cur[..dn];
        for k in 0..n_ {
            let (bk, ck) = (brow[k], crow[k]);
            let hk = &mut cur[k * d_..][..d_];
            if step % len == 0 {
                for d in 0..d_ {
                    hk[d] = coef[d] * bk;
                    yrow[d] += ck * hk[d];
                }
            } else {
                let pk = &prev[(step - 1) * dn + k * d_..][..d_];
                let ek = &dec[k * d_..][..d_];
                for d in 0..d_ {
                    hk[d] = ek[d] * pk[d] + coef[d] * bk;
                    yrow[d] += ck * hk[d];
                }
            }
        }
    }
    (y, states, decays)
}

struct ScanGrads<S> {
    u: Vec<S>,
    delta: Vec<S>,
    a: Vec<S>,
    b: Vec<S>,
    c: Vec<S>,
    skip: Vec<S>,
}

fn backward_kernel<S: Scalar>(
    dims: &ScanDims,
    x: &ScanInputs<S>,
    states: &[S],
    decays: &[S],
    g: &[S],
) -> ScanGrads<S> {
    let ScanDims {
        batch,
        len,
        channels: d_,
        state: n_,
    } = *dims;
    let dn = d_ * n_;
    let at = transpose(x.a, d_, n_);
    let mut ga_t = vec![S::zero(); dn];
    let mut out = ScanGrads {
        u: vec![S::zero(); x.u.len()],
        delta: vec![S::zero(); x.delta.len()],
        a: Vec::new(),
        b: vec![S::zero(); x.b.len()],
        c: vec![S::zero(); x.c.len()],
        skip: vec![S::zero(); x.skip.len()],
    };
    let mut gh = vec![S::zero(); dn];
    let zeros = vec![S::zero(); dn];
    let mut coef = vec![S::zero(); d_];
    let mut g_dl = vec![S::zero(); d_];
    let mut g_hb = vec![S::zero(); d_];
    let mut ghk = vec![S::zero(); d_];
    for b in 0..batch {
        gh.iter_mut().for_each(|v| *v = S::zero());
        for t in (0..len).rev() {
            let step = b * len + t;
            let row = step * d_;
            let srow = step * n_;
            let grow = &g[row..][..d_];
            let urow = &x.u[row..][..d_];
            let drow = &x.delta[row..][..d_];
            let hs = &states[step * dn..][..dn];
            let hps = if t > 0 {
                &states[(step - 1) * dn..][..dn]
            } else {
                &zeros[..dn]
            };
            let decs = &decays[step * dn..][..dn];
            let (coef, g_dl, g_hb, ghk) = (&mut coef[..d_], &mut g_dl[..d_], &mut g_hb[..d_], &mut ghk[..d_]);
            for d in 0..d_ {
                coef[d] = drow[d] * urow[d];
                g_dl[d] = S::zero();
                g_hb[d] = S::zero();
            }
            for k in 0..n_ {
                let (bk, ck) = (x.b[srow + k], x.c[srow + k]);
                let hk = &hs[k * d_..][..d_];
                let hpk = &hps[k * d_..][..d_];
                let ek = &decs[k * d_..][..d_];
                let ak = &at[k * d_..][..d_];
                let gak = &mut ga_t[k * d_..][..d_];
                let ghs = &mut gh[k * d_..][..d_];
                out.c[srow + k] += dot(grow, hk);
                for d in 0..d_ {
                    let gk = ghs[d] + grow[d] * ck;
                    let g_decay = gk * hpk[d] * ek[d];
                    g_dl[d] += g_decay * ak[d];
                    g_hb[d] += gk * bk;
                    gak[d] += g_decay * drow[d];
                    ghk[d] = gk;
                    ghs[d] = gk * ek[d];
                }
                out.b[srow + k] += dot(ghk, coef);
            }
            for d in 0..d_ {
                out.skip[d] += grow[d] * urow[d];
                out.u[row + d] += grow[d] * x.skip[d] + g_hb[d] * drow[d];
                out.delta[row + d] += g_dl[d] + g_hb[d] * urow[d];
            }
        }
    }
    out.a = transpose(&ga_t, n_, d_);
    out
}

impl<S: Scalar> Graph<S> {
    /// `u, delta: [b, l, d]`, `a: [d, n]`, `b_in, c_out: [b, l, n]`, `skip: [d]`.
    /// Returns `y: [b, l, d]`. `delta` is used as given (callers make it positive).
    pub fn selective_scan(
        &self,
        u: Var,
        delta: Var,
        a: Var,
        b_in: Var,
        c_out: Var,
        skip: Var,
    ) -> Result<Var> {
        let (value, dims, states, decays) = {
            let nodes = self.nodes();
            let us = nodes[u.0].value.shape();
            if us.len() != 3 {
                return Err(Error::shape("selective_scan", us, &[0, 0, 0]));
            }
            let (batch, len, channels) = (us[0], us[1], us[2]);
            let state = nodes[a.0].value.shape().get(1).copied().unwrap_or(0);
            let expect: [(Var, Vec<usize>); 5] = [
                (delta, vec![batch, len, channels]),
                (a, vec![channels, state]),
                (b_in, vec![batch, len, state]),
                (c_out, vec![batch, len, state]),
                (skip, vec![channels]),
            ];
            for (v, s) in &expect {
                if nodes[v.0].value.shape() != s.as_slice() {
                    return Err(Error::shape("selective_scan", nodes[v.0].value.shape(), s));
                }
            }
            let dims = ScanDims {
                batch,
                len,
                channels,
                state,
            };
            let inputs = ScanInputs {
                u: nodes[u.0].value.data(),
                delta: nodes[delta.0].value.data(),
                a: nodes[a.0].value.data(),
                b: nodes[b_in.0].value.data(),
                c: nodes[c_out.0].value.data(),
                skip: nodes[skip.0].value.data(),
            };
            let (y, states, decays) = forward_kernel(&dims, &inputs);
            (Tensor::from_parts(vec![batch, len, channels], y), dims, states, decays)
        };
        Ok(self.push(
            value,
            Op::SelectiveScan {
                inputs: [u, delta, a, b_in, c_out, skip],
                dims,
                states,
                decays,
            },
        ))
    }
}

pub(crate) fn selective_scan_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    inputs: &[Var; 6],
    dims: &ScanDims,
    states: &[S],
    decays: &[S],
    g: &[S],
) {
    let [u, delta, a, b_in, c_out, skip] = *inputs;
    let x = ScanInputs {
        u: nodes[u.0].value.data(),
        delta: nodes[delta.0].value.data(),
        a: nodes[a.0].value.data(),
        b: nodes[b_in.0].value.data(),
        c: nodes[c_out.0].value.data(),
        skip: nodes[skip.0].value.data(),
    };
    let out = backward_kernel(dims, &x, states, decays, g);
    for (v, buf) in [
        (u, out.u),
        (delta, out.delta),
        (a, out.a),
        (b_in, out.b),
        (c_out, out.c),
        (skip, out.skip),
    ] {
        accumulate(nodes, grads, v, |dst| {
            for (x, y) in dst.iter_mut().zip(&buf) {
                *x += *y;
            }
        });
    }
}
