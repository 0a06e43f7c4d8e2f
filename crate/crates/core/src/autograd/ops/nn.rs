use super::shape::split_axis;
use crate::autograd::graph::{accumulate, Grads, Graph, Node, Op, Var};
use crate::autograd::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<S: Scalar> Graph<S> {
    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if axis >= t.rank() {
                return Err(Error::contract(format!("softmax axis {axis} for rank {}", t.rank())));
            }
            let (outer, n, inner) = split_axis(t.shape(), axis);
            let x = t.data();
            let mut y = vec![S::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut m = S::neg_infinity();
                    for j in 0..n {
                        m = m.max(x[at(j)]);
                    }
                    let mut z = S::zero();
                    for j in 0..n {
                        let e = (x[at(j)] - m).fast_exp();
                        y[at(j)] = e;
                        z += e;
                    }
                    let inv = S::one() / z;
                    for j in 0..n {
                        y[at(j)] *= inv;
                    }
                }
            }
            Tensor::from_parts(t.shape().to_vec(), y)
        };
        Ok(self.push(value, Op::Softmax { a, axis }))
    }

    pub fn softmax_last(&self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        self.softmax(a, r - 1)
    }

    /// `x - logsumexp(x)` along the last axis.
    pub fn log_softmax_last(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = *shape.last().expect("rank >= 1");
        let mut mshape = shape.clone();
        *mshape.last_mut().expect("rank >= 1") = 1;
        let maxes = {
            let t = self.value(a);
            let m: Vec<S> = t
                .data()
                .chunks_exact(n)
                .map(|row| row.iter().fold(S::neg_infinity(), |m, v| m.max(*v)))
                .collect();
            Tensor::from_parts(mshape, m)
        };
        let shifted = self.sub(a, self.constant(maxes))?;
        let z = self.sum_axis(self.exp(shifted), shape.len() - 1)?;
        let lse = self.log(z)?;
        self.sub(shifted, lse)
    }

    /// Mean over rows of `-Σ target · log_softmax(logits)`; `target` rows are
    /// probability vectors.
    pub fn cross_entropy(&self, logits: Var, target: Var) -> Result<Var> {
        let shape = self.shape(logits);
        let rows = self.value(logits).len() / shape.last().expect("rank >= 1");
        let lp = self.log_softmax_last(logits)?;
        let s = self.sum(self.mul(lp, target)?);
        Ok(self.scale(s, -1.0 / rows as f64))
    }

    /// Normalizes the last axis, then applies `gamma`/`beta` (both `[c]`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, xhat, rstd) = {
            let nodes = self.nodes();
            let t = &nodes[x.0].value;
            let c = *t.shape().last().expect("rank >= 1");
            let (gs, bs) = (nodes[gamma.0].value.shape(), nodes[beta.0].value.shape());
            if gs != [c] || bs != [c] {
                return Err(Error::shape("layer_norm", t.shape(), gs));
            }
            let (gm, bt) = (nodes[gamma.0].value.data(), nodes[beta.0].value.data());
            let rows = t.len() / c;
            let eps = S::of(LAYER_NORM_EPS);
            let inv_c = S::one() / S::of(c as f64);
            let mut xhat = vec![S::zero(); t.len()];
            let mut rstd = vec![S::zero(); rows];
            let mut y = vec![S::zero(); t.len()];
            for r in 0..rows {
                let row = &t.data()[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<S>() * inv_c;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_c;
                let rs = S::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[r * c + j] = h;
                    y[r * c + j] = h * gm[j] + bt[j];
                }
            }
            (Tensor::from_parts(t.shape().to_vec(), y), xhat, rstd)
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// `x / sqrt(sum(x^2) + eps)` over the last axis.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        let sq = self.square(x);
        let ss = self.sum_axis(sq, r - 1)?;
        let ss = self.add_scalar(ss, 1e-12);
        let norm = self.sqrt(ss)?;
        self.div(x, norm)
    }

    /// Mean absolute difference.
    pub fn l1_loss(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    pub fn mse_loss(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean(d))
    }
}

pub(crate) fn softmax_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    a: Var,
    axis: usize,
    node: &Node<S>,
    g: &[S],
) {
    let y = node.value.data();
    let (outer, n, inner) = split_axis(node.value.shape(), axis);
    accumulate(nodes, grads, a, |ga| {
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut dot = S::zero();
                for j in 0..n {
                    dot += g[at(j)] * y[at(j)];
                }
                for j in 0..n {
                    ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[S],
    rstd: &[S],
    g: &[S],
) {
    let gm = nodes[gamma.0].value.data();
    let c = gm.len();
    let rows = rstd.len();
    accumulate(nodes, grads, gamma, |gg| {
        for r in 0..rows {
            for j in 0..c {
                gg[j] += g[r * c + j] * xhat[r * c + j];
            }
        }
    });
    accumulate(nodes, grads, beta, |gb| {
        for r in 0..rows {
            for j in 0..c {
                gb[j] += g[r * c + j];
            }
        }
    });
    let inv_c = S::one() / S::of(c as f64);
    accumulate(nodes, grads, x, |gx| {
        for r in 0..rows {
            let mut m1 = S::zero();
            let mut m2 = S::zero();
            for j in 0..c {
                let gh = g[r * c + j] * gm[j];
                m1 += gh;
                m2 += gh * xhat[r * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for j in 0..c {
                let gh = g[r * c + j] * gm[j];
                gx[r * c + j] += rstd[r] * (gh - m1 - xhat[r * c + j] * m2);
            }
        }
    });
}
