//! Broadcasting binary ops, pointwise unary ops and reductions.

use crate::autograd::graph::{accumulate, BinaryKind, Grads, Graph, Node, Op, UnaryKind, Var};
use crate::autograd::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Right-aligned broadcast of two shapes to a common output shape.
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn strides_for(shape: &[usize], rank: usize, out: &[usize]) -> Vec<usize> {
    let pad = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[pad + d] = if shape[d] == 1 && out[pad + d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            out[i] = match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::shape(op, a, b)),
            };
        }
        let sa = strides_for(a, rank, &out);
        let sb = strides_for(b, rank, &out);
        Ok(Broadcast { out, sa, sb })
    }

    /// Visits `(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        let total = numel(&self.out);
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = self.out[rank - 1];
        let (la, lb) = (self.sa[rank - 1], self.sb[rank - 1]);
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut o = 0;
        while o < total {
            for j in 0..last {
                f(o + j, ia + j * la, ib + j * lb);
            }
            o += last;
            // advance outer dims
            let mut d = rank - 1;
            while d > 0 {
                d -= 1;
                counter[d] += 1;
                ia += self.sa[d];
                ib += self.sb[d];
                if counter[d] < self.out[d] {
                    break;
                }
                ia -= self.sa[d] * counter[d];
                ib -= self.sb[d] * counter[d];
                counter[d] = 0;
            }
        }
    }
}

fn apply_binary<S: Scalar>(kind: BinaryKind, x: S, y: S) -> S {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
        BinaryKind::Div => x / y,
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).fast_exp())
    } else {
        let e = x.fast_exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).fast_exp().ln_1p()
}

impl<S: Scalar> Graph<S> {
    fn binary(&self, kind: BinaryKind, op: &'static str, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if kind == BinaryKind::Div && tb.data().iter().any(|v| *v == S::zero()) {
                return Err(Error::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
            if ta.shape() == tb.shape() {
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| apply_binary(kind, *x, *y))
                    .collect();
                Tensor::from_parts(ta.shape().to_vec(), data)
            } else {
                let bc = Broadcast::new(op, ta.shape(), tb.shape())?;
                let mut data = vec![S::zero(); numel(&bc.out)];
                let (da, db) = (ta.data(), tb.data());
                bc.for_each(|o, i, j| data[o] = apply_binary(kind, da[i], db[j]));
                Tensor::from_parts(bc.out, data)
            }
        };
        Ok(self.push(value, Op::Binary { kind, a, b }))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    /// Errors when any divisor element is exactly zero.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    fn unary(&self, kind: UnaryKind, a: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes();
            let t = &nodes[a.0].value;
            match kind {
                UnaryKind::Log if t.data().iter().any(|v| *v <= S::zero()) => {
                    return Err(Error::Domain {
                        op: "log",
                        detail: "nonpositive input".into(),
                    })
                }
                UnaryKind::Sqrt if t.data().iter().any(|v| *v < S::zero()) => {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: "negative input".into(),
                    })
                }
                _ => {}
            }
            let f: fn(S) -> S = match kind {
                UnaryKind::Neg => |x| -x,
                UnaryKind::Exp => |x| x.fast_exp(),
                UnaryKind::Log => |x| x.ln(),
                UnaryKind::Sigmoid => sigmoid,
                UnaryKind::Silu => |x| x * sigmoid(x),
                UnaryKind::Relu => |x| x.max(S::zero()),
                UnaryKind::Softplus => softplus,
                UnaryKind::Abs => |x| x.abs(),
                UnaryKind::Square => |x| x * x,
                UnaryKind::Sqrt => |x| x.sqrt(),
            };
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
        };
        Ok(self.push(value, Op::Unary { kind, a }))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a).expect("total")
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a).expect("total")
    }

    /// Errors on nonpositive inputs.
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a).expect("total")
    }

    pub fn silu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Silu, a).expect("total")
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a).expect("total")
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a).expect("total")
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a).expect("total")
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a).expect("total")
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let value = {
            let t = self.value(a);
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| *x * c).collect())
        };
        self.push(value, Op::Scale { a, c })
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let c = S::of(c);
        let value = {
            let t = self.value(a);
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| *x + c).collect())
        };
        self.push(value, Op::Shift { a })
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }
}

pub(crate) fn binary_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    kind: BinaryKind,
    a: Var,
    b: Var,
    node: &Node<S>,
    g: &[S],
) {
    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
    let (da, db) = (ta.data(), tb.data());
    let out = node.value.data();
    if ta.shape() == tb.shape() {
        accumulate(nodes, grads, a, |ga| match kind {
            BinaryKind::Add | BinaryKind::Sub => ga.iter_mut().zip(g).for_each(|(x, y)| *x += *y),
            BinaryKind::Mul => {
                for i in 0..g.len() {
                    ga[i] += g[i] * db[i];
                }
            }
            BinaryKind::Div => {
                for i in 0..g.len() {
                    ga[i] += g[i] / db[i];
                }
            }
        });
        accumulate(nodes, grads, b, |gb| match kind {
            BinaryKind::Add => gb.iter_mut().zip(g).for_each(|(x, y)| *x += *y),
            BinaryKind::Sub => gb.iter_mut().zip(g).for_each(|(x, y)| *x -= *y),
            BinaryKind::Mul => {
                for i in 0..g.len() {
                    gb[i] += g[i] * da[i];
                }
            }
            BinaryKind::Div => {
                for i in 0..g.len() {
                    gb[i] -= g[i] * out[i] / db[i];
                }
            }
        });
        return;
    }
    let bc = Broadcast::new("broadcast", ta.shape(), tb.shape()).expect("checked in forward");
    accumulate(nodes, grads, a, |ga| {
        bc.for_each(|o, i, j| {
            ga[i] += match kind {
                BinaryKind::Add | BinaryKind::Sub => g[o],
                BinaryKind::Mul => g[o] * db[j],
                BinaryKind::Div => g[o] / db[j],
            }
        })
    });
    accumulate(nodes, grads, b, |gb| {
        bc.for_each(|o, i, j| {
            gb[j] += match kind {
                BinaryKind::Add => g[o],
                BinaryKind::Sub => -g[o],
                BinaryKind::Mul => g[o] * da[i],
                BinaryKind::Div => -g[o] * out[o] / db[j],
            }
        })
    });
}

pub(crate) fn unary_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    kind: UnaryKind,
    a: Var,
    node: &Node<S>,
    g: &[S],
) {
    let x = nodes[a.0].value.data();
    let y = node.value.data();
    let one = S::one();
    let two = S::of(2.0);
    accumulate(nodes, grads, a, |ga| {
        for i in 0..g.len() {
            let d = match kind {
                UnaryKind::Neg => -one,
                UnaryKind::Exp => y[i],
                UnaryKind::Log => one / x[i],
                UnaryKind::Sigmoid => y[i] * (one - y[i]),
                UnaryKind::Silu => {
                    let s = sigmoid(x[i]);
                    s * (one + x[i] * (one - s))
                }
                UnaryKind::Relu => {
                    if x[i] > S::zero() {
                        one
                    } else {
                        S::zero()
                    }
                }
                UnaryKind::Softplus => sigmoid(x[i]),
                UnaryKind::Abs => {
                    if x[i] > S::zero() {
                        one
                    } else if x[i] < S::zero() {
                        -one
                    } else {
                        S::zero()
                    }
                }
                UnaryKind::Square => two * x[i],
                UnaryKind::Sqrt => {
                    if y[i] > S::zero() {
                        one / (two * y[i])
                    } else {
                        S::zero()
                    }
                }
            };
            ga[i] += g[i] * d;
        }
    });
}
