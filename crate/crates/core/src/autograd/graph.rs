use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::ops::conv::ConvGeom;
use super::ops::resample::ResampleTable;
use super::ops::scan::ScanDims;
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Silu,
    Relu,
    Softplus,
    Abs,
    Square,
    Sqrt,
}

/// Recorded operation together with whatever the backward rule needs.
pub(crate) enum Op<S> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Scale {
        a: Var,
        c: S,
    },
    Shift {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    SumAxis {
        a: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape {
        a: Var,
    },
    GatherRows {
        a: Var,
        index: Rc<[usize]>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Narrow {
        a: Var,
        start: usize,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resample {
        a: Var,
        table: Rc<ResampleTable>,
    },
    SelectiveScan {
        inputs: [Var; 6],
        dims: ScanDims,
        states: Vec<S>,
        decays: Vec<S>,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::Unary { a, .. }
            | Op::Scale { a, .. }
            | Op::Shift { a }
            | Op::SumAll { a }
            | Op::SumAxis { a, .. }
            | Op::Reshape { a }
            | Op::GatherRows { a, .. }
            | Op::Narrow { a, .. }
            | Op::Softmax { a, .. }
            | Op::Resample { a, .. } => vec![*a],
            Op::Concat { parts } => parts.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::SelectiveScan { inputs, .. } => inputs.to_vec(),
        }
    }
}

pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// How [`Graph::backward_with`] treats gradients left over from an earlier pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Refuse to run when gradients are already populated.
    Fresh,
    /// Add into existing gradients.
    Accumulate,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    populated: bool,
}

/// Computation tape for reverse-mode differentiation.
///
/// Every operation appends a node; `backward` replays the backward rules in
/// reverse recording order. The tape is single-threaded; independent graphs
/// may be used from different threads.
pub struct Graph<S: Scalar> {
    inner: RefCell<Inner<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) type Grads<S> = [Option<Vec<S>>];

/// Adds into an input's gradient buffer, allocating it on first use. Skips
/// inputs that do not require gradients.
pub(crate) fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    v: Var,
    f: impl FnOnce(&mut [S]),
) {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.len()]);
    f(buf);
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
                populated: false,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn nodes(&self) -> Ref<'_, [Node<S>]> {
        Ref::map(self.inner.borrow(), |i| i.nodes.as_slice())
    }

    pub(crate) fn push(&self, value: Tensor<S>, op: Op<S>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| inner.nodes[v.0].requires_grad);
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<S>) -> Var {
        self.leaf_inner(t, false, None)
    }

    /// Leaf whose gradient is tracked when `t.requires_grad()` is set.
    pub fn leaf(&self, t: Tensor<S>) -> Var {
        let rg = t.requires_grad();
        self.leaf_inner(t, rg, None)
    }

    /// Differentiable input leaf.
    pub fn input(&self, t: Tensor<S>) -> Var {
        self.leaf_inner(t, true, None)
    }

    /// Leaf bound to a stored parameter. Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var {
        let p = store.get(id);
        let trainable = !p.frozen;
        let mut t = p.value.clone();
        t.zero_grad();
        self.leaf_inner(t, trainable, trainable.then_some(id))
    }

    fn leaf_inner(&self, mut t: Tensor<S>, requires_grad: bool, param: Option<ParamId>) -> Var {
        t.zero_grad();
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Var(id)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<S>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<S> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after `backward`; intermediate gradients are not kept.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(v.0)?.as_ref()?;
        let shape = inner.nodes[v.0].value.shape().to_vec();
        Some(Tensor::from_parts(shape, g.clone()))
    }

    pub fn clear_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.grads.clear();
        inner.populated = false;
    }

    pub fn backward(&self, loss: Var) -> Result<()> {
        self.backward_with(loss, GradMode::Fresh)
    }

    pub fn backward_with(&self, loss: Var, mode: GradMode) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        if inner.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                inner.nodes[loss.0].value.shape()
            )));
        }
        if inner.populated && mode == GradMode::Fresh {
            return Err(Error::contract(
                "gradients already populated; clear them or use GradMode::Accumulate",
            ));
        }
        let n = inner.nodes.len();
        inner.grads.resize_with(n, || None);
        let nodes = &inner.nodes;
        let grads = &mut inner.grads;
        // Each pass propagates its own seed; gradients kept from an earlier
        // pass are only added to, never re-propagated.
        let mut pending: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        pending[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !nodes[i].requires_grad {
                continue;
            }
            backward_node(nodes, i, &g, &mut pending);
            if !matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            match &mut grads[i] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        inner.populated = true;
        Ok(())
    }

    /// Adds the gradients of all parameter leaves into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore<S>) {
        let inner = self.inner.borrow();
        for (node, g) in inner.nodes.iter().zip(&inner.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                let p = store.get_mut(id);
                if p.frozen {
                    continue;
                }
                for (a, b) in p.value.grad_mut().iter_mut().zip(g) {
                    *a += *b;
                }
            }
        }
    }
}

fn backward_node<S: Scalar>(nodes: &[Node<S>], i: usize, g: &[S], grads: &mut Grads<S>) {
    use super::ops::{conv, elementwise, linalg, nn, resample, scan, shape};
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => elementwise::binary_backward(nodes, grads, *kind, *a, *b, node, g),
        Op::Unary { kind, a } => elementwise::unary_backward(nodes, grads, *kind, *a, node, g),
        Op::Scale { a, c } => accumulate(nodes, grads, *a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += *y * *c;
            }
        }),
        Op::Shift { a } => accumulate(nodes, grads, *a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += *y;
            }
        }),
        Op::SumAll { a } => accumulate(nodes, grads, *a, |ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        Op::SumAxis { a, axis } => shape::sum_axis_backward(nodes, grads, *a, *axis, g),
        Op::MatMul { a, b } => linalg::matmul_backward(nodes, grads, *a, *b, g),
        Op::Bmm { a, b, ta, tb } => linalg::bmm_backward(nodes, grads, *a, *b, *ta, *tb, g),
        Op::Reshape { a } => accumulate(nodes, grads, *a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += *y;
            }
        }),
        Op::GatherRows { a, index } => shape::gather_rows_backward(nodes, grads, *a, index, g),
        Op::Concat { parts } => shape::concat_backward(nodes, grads, parts, node, g),
        Op::Narrow { a, start } => shape::narrow_backward(nodes, grads, *a, *start, node, g),
        Op::Softmax { a, axis } => nn::softmax_backward(nodes, grads, *a, *axis, node, g),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => nn::layer_norm_backward(nodes, grads, *x, *gamma, *beta, xhat, rstd, g),
        Op::Conv2d { x, w, b, geom } => conv::conv2d_backward(nodes, grads, *x, *w, *b, geom, g),
        Op::ConvTranspose2d { x, w, b, geom } => {
            conv::conv_transpose2d_backward(nodes, grads, *x, *w, *b, geom, g)
        }
        Op::Resample { a, table } => resample::resample_backward(nodes, grads, *a, table, g),
        Op::SelectiveScan {
            inputs,
            dims,
            states,
            decays,
        } => scan::selective_scan_backward(nodes, grads, inputs, dims, states, decays, g),
    }
}
