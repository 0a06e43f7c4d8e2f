//! Layout ops: reshape, row gathers, last-axis concat/narrow, axis sums.

use std::rc::Rc;

use crate::autograd::graph::{accumulate, Grads, Graph, Node, Op, Var};
use crate::autograd::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("rank >= 1")
}

impl<S: Scalar> Graph<S> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let t = self.value(a);
            if numel(shape) != t.len() {
                return Err(Error::shape("reshape", t.shape(), shape));
            }
            Tensor::from_parts(shape.to_vec(), t.data().to_vec())
        };
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Treats `a` as rows of its last axis and picks rows by index; output is
    /// `[index.len(), last]`. Repeated indices are allowed.
    pub fn gather_rows(&self, a: Var, index: Rc<[usize]>) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let c = last_dim(t.shape());
            let rows = t.len() / c;
            if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
                return Err(Error::contract(format!("gather index {bad} out of {rows} rows")));
            }
            let src = t.data();
            let mut out = Vec::with_capacity(index.len() * c);
            for &r in index.iter() {
                out.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
            Tensor::from_parts(vec![index.len(), c], out)
        };
        Ok(self.push(value, Op::GatherRows { a, index }))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let value = {
            let nodes = self.nodes();
            let first = nodes[parts[0].0].value.shape();
            let lead = &first[..first.len() - 1];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let s = nodes[p.0].value.shape();
                if &s[..s.len() - 1] != lead {
                    return Err(Error::shape("concat", first, s));
                }
                widths.push(last_dim(s));
            }
            let rows = numel(lead);
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.0].value.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let c = last_dim(t.shape());
            if len == 0 || start + len > c {
                return Err(Error::contract(format!("narrow [{start}, {}) of axis {c}", start + len)));
            }
            let rows = t.len() / c;
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&t.data()[r * c + start..r * c + start + len]);
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = len;
            Tensor::from_parts(shape, out)
        };
        Ok(self.push(value, Op::Narrow { a, start }))
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = {
            let t = self.value(a);
            let shape = t.shape();
            if axis >= shape.len() {
                return Err(Error::contract(format!("axis {axis} for rank {}", shape.len())));
            }
            let (outer, n, inner) = split_axis(shape, axis);
            let mut out = vec![S::zero(); outer * inner];
            let d = t.data();
            for o in 0..outer {
                for j in 0..n {
                    let base = (o * n + j) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
            let mut s = shape.to_vec();
            s[axis] = 1;
            Tensor::from_parts(s, out)
        };
        Ok(self.push(value, Op::SumAxis { a, axis }))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a)[axis];
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn sum_axis_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    a: Var,
    axis: usize,
    g: &[S],
) {
    let (outer, n, inner) = split_axis(nodes[a.0].value.shape(), axis);
    accumulate(nodes, grads, a, |ga| {
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    ga[base + i] += g[o * inner + i];
                }
            }
        }
    });
}

pub(crate) fn gather_rows_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    a: Var,
    index: &[usize],
    g: &[S],
) {
    let c = last_dim(nodes[a.0].value.shape());
    accumulate(nodes, grads, a, |ga| {
        for (k, &r) in index.iter().enumerate() {
            for j in 0..c {
                ga[r * c + j] += g[k * c + j];
            }
        }
    });
}

pub(crate) fn concat_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    parts: &[Var],
    node: &Node<S>,
    g: &[S],
) {
    let total = last_dim(node.value.shape());
    let rows = node.value.len() / total;
    let mut offset = 0;
    for p in parts {
        let w = last_dim(nodes[p.0].value.shape());
        accumulate(nodes, grads, *p, |gp| {
            for r in 0..rows {
                for j in 0..w {
                    gp[r * w + j] += g[r * total + offset + j];
                }
            }
        });
        offset += w;
    }
}

pub(crate) fn narrow_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    a: Var,
    start: usize,
    node: &Node<S>,
    g: &[S],
) {
    let c = last_dim(nodes[a.0].value.shape());
    let len = last_dim(node.value.shape());
    let rows = node.value.len() / len;
    accumulate(nodes, grads, a, |ga| {
        for r in 0..rows {
            for j in 0..len {
                ga[r * c + start + j] += g[r * len + j];
            }
        }
    });
}
