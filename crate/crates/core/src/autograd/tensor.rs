use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Floating-point element type of the engine.
///
/// Precision is chosen when a graph is built: `f32` for training, `f64` for
/// finite-difference verification.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a @ b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `exp`, possibly by a faster approximation accurate to a few ulps.
    #[inline(always)]
    fn fast_exp(self) -> Self {
        self.exp()
    }

    /// Elementwise [`Scalar::fast_exp`] over a buffer.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.fast_exp();
        }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Branch-free `exp` for f32: range reduction by `ln 2` and a degree-6
/// polynomial, about one ulp of relative error. Vectorizes in slice loops.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0;
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // The low mantissa bits of `shifted` hold `n`; move them to the exponent.
    let bits = shifted.to_bits().wrapping_sub(ROUND.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(bits)
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $gemm:path $(, $exp:path)?) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;
$(
            #[inline(always)]
            fn fast_exp(self) -> Self {
                $exp(self)
            }
)?

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs buffer too small");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs buffer too small");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: out buffer too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: bounds of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, exp_f32);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: S) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self::from_parts(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::one())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self::from_parts(shape, data)
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<S> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn set_grad(&mut self, grad: Option<Vec<S>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::shape("set_grad", &self.shape, &[g.len()]));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn stack_batch(parts: &[&Tensor<S>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::contract("empty batch"))?;
        let tail = &first.shape()[1..];
        let mut shape = first.shape().to_vec();
        shape[0] = 0;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.len()).sum());
        for t in parts {
            if t.rank() == 0 || &t.shape()[1..] != tail {
                return Err(Error::shape("stack_batch", first.shape(), t.shape()));
            }
            shape[0] += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max))
    }
}
