use crate::autograd::graph::{accumulate, Grads, Graph, Node, Op, Var};
use crate::autograd::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Logical (rows, cols) of a stored row-major matrix and its strides when
/// read transposed or not.
fn view(rows: usize, cols: usize, trans: bool) -> (usize, usize, usize, usize) {
    if trans {
        // stored [cols, rows]
        (rows, cols, 1, rows)
    } else {
        (rows, cols, cols, 1)
    }
}

impl<S: Scalar> Graph<S> {
    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", sa, sb));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![S::zero(); m * n];
            S::gemm(m, k, n, S::one(), ta.data(), k, 1, tb.data(), n, 1, S::zero(), &mut out, n, 1);
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    /// Batched product of `[bt, m, k]` and `[bt, k, n]`; `ta`/`tb` read the
    /// stored operand transposed (stored as `[bt, k, m]` / `[bt, n, k]`).
    pub fn bmm(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes();
            let (xa, xb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (xa.shape(), xb.shape());
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(Error::shape("bmm", sa, sb));
            }
            let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if k != k2 {
                return Err(Error::shape("bmm", sa, sb));
            }
            let bt = sa[0];
            let (_, _, rsa, csa) = view(m, k, ta);
            let (_, _, rsb, csb) = view(k, n, tb);
            let mut out = vec![S::zero(); bt * m * n];
            for i in 0..bt {
                S::gemm(
                    m,
                    k,
                    n,
                    S::one(),
                    &xa.data()[i * m * k..(i + 1) * m * k],
                    rsa,
                    csa,
                    &xb.data()[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    S::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n,
                    1,
                );
            }
            Tensor::from_parts(vec![bt, m, n], out)
        };
        Ok(self.push(value, Op::Bmm { a, b, ta, tb }))
    }

    /// Affine map over the last axis: `x[.., c] @ w[c, d] + bias[d]`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x);
        let c = *shape.last().expect("rank >= 1");
        let rows = shape.iter().product::<usize>() / c;
        let flat = self.reshape(x, &[rows, c])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = bias {
            y = self.add(y, b)?;
        }
        let d = self.shape(w)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = d;
        self.reshape(y, &out_shape)
    }
}

pub(crate) fn matmul_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    a: Var,
    b: Var,
    g: &[S],
) {
    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
    // dA = G @ B^T
    accumulate(nodes, grads, a, |ga| {
        S::gemm(m, n, k, S::one(), g, n, 1, tb.data(), 1, n, S::one(), ga, k, 1)
    });
    // dB = A^T @ G
    accumulate(nodes, grads, b, |gb| {
        S::gemm(k, m, n, S::one(), ta.data(), 1, k, g, n, 1, S::one(), gb, n, 1)
    });
}

pub(crate) fn bmm_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    a: Var,
    b: Var,
    ta: bool,
    tb: bool,
    g: &[S],
) {
    let (xa, xb) = (&nodes[a.0].value, &nodes[b.0].value);
    let (sa, sb) = (xa.shape(), xb.shape());
    let bt = sa[0];
    let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
    let n = if tb { sb[1] } else { sb[2] };
    let (_, _, rsa, csa) = view(m, k, ta);
    let (_, _, rsb, csb) = view(k, n, tb);
    // Logical dA[m,k] = G[m,n] @ B^T ; written into A's storage strides.
    accumulate(nodes, grads, a, |ga| {
        for i in 0..bt {
            S::gemm(
                m,
                n,
                k,
                S::one(),
                &g[i * m * n..(i + 1) * m * n],
                n,
                1,
                &xb.data()[i * k * n..(i + 1) * k * n],
                csb,
                rsb,
                S::one(),
                &mut ga[i * m * k..(i + 1) * m * k],
                rsa,
                csa,
            );
        }
    });
    // Logical dB[k,n] = A^T @ G.
    accumulate(nodes, grads, b, |gb| {
        for i in 0..bt {
            S::gemm(
                k,
                m,
                n,
                S::one(),
                &xa.data()[i * m * k..(i + 1) * m * k],
                csa,
                rsa,
                &g[i * m * n..(i + 1) * m * n],
                n,
                1,
                S::one(),
                &mut gb[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
            );
        }
    });
}
