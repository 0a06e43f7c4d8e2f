//! NHWC convolutions through im2col/col2im and GEMM.

use crate::autograd::graph::{accumulate, Grads, Graph, Node, Op, Var};
use crate::autograd::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zeros,
    Reflect,
}

/// Geometry shared by a convolution and its transpose: a `k x k` window
/// sliding with `stride` over an image of `h x w x c` (padded by `pad`)
/// visits an `oh x ow` grid.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
    pub padding: Padding,
}

impl ConvGeom {
    fn col_width(&self) -> usize {
        self.k * self.k * self.c
    }

    fn grid(&self) -> usize {
        self.oh * self.ow
    }

    fn source(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            return Some(i as usize);
        }
        match self.padding {
            Padding::Zeros => None,
            Padding::Reflect => {
                let n = n as isize;
                let r = if i < 0 { -i } else { 2 * (n - 1) - i };
                (0..n).contains(&r).then_some(r as usize)
            }
        }
    }

    fn im2col<S: Scalar>(&self, img: &[S], cols: &mut [S]) {
        let cw = self.col_width();
        cols.iter_mut().for_each(|v| *v = S::zero());
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &mut cols[(oy * self.ow + ox) * cw..][..cw];
                for ky in 0..self.k {
                    let Some(iy) = self.source((oy * self.stride + ky) as isize - self.pad as isize, self.h)
                    else {
                        continue;
                    };
                    for kx in 0..self.k {
                        let Some(ix) =
                            self.source((ox * self.stride + kx) as isize - self.pad as isize, self.w)
                        else {
                            continue;
                        };
                        let dst = (ky * self.k + kx) * self.c;
                        let src = (iy * self.w + ix) * self.c;
                        row[dst..dst + self.c].copy_from_slice(&img[src..src + self.c]);
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], img: &mut [S]) {
        let cw = self.col_width();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = &cols[(oy * self.ow + ox) * cw..][..cw];
                for ky in 0..self.k {
                    let Some(iy) = self.source((oy * self.stride + ky) as isize - self.pad as isize, self.h)
                    else {
                        continue;
                    };
                    for kx in 0..self.k {
                        let Some(ix) =
                            self.source((ox * self.stride + kx) as isize - self.pad as isize, self.w)
                        else {
                            continue;
                        };
                        let src = (ky * self.k + kx) * self.c;
                        let dst = (iy * self.w + ix) * self.c;
                        for j in 0..self.c {
                            img[dst + j] += row[src + j];
                        }
                    }
                }
            }
        }
    }
}

fn check_stride(stride: usize) -> Result<()> {
    if stride < 1 {
        return Err(Error::Parameter(format!("stride must be >= 1, got {stride}")));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    /// Cross-correlation of `x [b, h, w, cin]` with `w [k, k, cin, cout]`.
    pub fn conv2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Var> {
        check_stride(stride)?;
        let (value, geom) = {
            let nodes = self.nodes();
            let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (xt.shape(), wt.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[3] {
                return Err(Error::shape("conv2d", xs, ws));
            }
            let k = ws[0];
            if k > xs[1] + 2 * pad || k > xs[2] + 2 * pad {
                return Err(Error::shape("conv2d", xs, ws));
            }
            if padding == Padding::Reflect && (pad >= xs[1] || pad >= xs[2]) {
                return Err(Error::Parameter("reflect padding wider than the image".into()));
            }
            let geom = ConvGeom {
                batch: xs[0],
                h: xs[1],
                w: xs[2],
                c: xs[3],
                k,
                stride,
                pad,
                oh: (xs[1] + 2 * pad - k) / stride + 1,
                ow: (xs[2] + 2 * pad - k) / stride + 1,
                cout: ws[3],
                padding,
            };
            if let Some(b) = b {
                if nodes[b.0].value.shape() != [geom.cout] {
                    return Err(Error::shape("conv2d bias", nodes[b.0].value.shape(), &[geom.cout]));
                }
            }
            let (cw, grid, co) = (geom.col_width(), geom.grid(), geom.cout);
            let img_len = geom.h * geom.w * geom.c;
            let mut cols = vec![S::zero(); grid * cw];
            let mut out = vec![S::zero(); geom.batch * grid * co];
            for bi in 0..geom.batch {
                geom.im2col(&xt.data()[bi * img_len..][..img_len], &mut cols);
                let o = &mut out[bi * grid * co..][..grid * co];
                if let Some(b) = b {
                    let bias = nodes[b.0].value.data();
                    for r in 0..grid {
                        o[r * co..(r + 1) * co].copy_from_slice(bias);
                    }
                }
                let beta = if b.is_some() { S::one() } else { S::zero() };
                S::gemm(grid, cw, co, S::one(), &cols, cw, 1, wt.data(), co, 1, beta, o, co, 1);
            }
            (
                Tensor::from_parts(vec![geom.batch, geom.oh, geom.ow, co], out),
                geom,
            )
        };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution of `x [b, h, w, cin]` with `w [cin, k, k, cout]`;
    /// output side is `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        check_stride(stride)?;
        let (value, geom) = {
            let nodes = self.nodes();
            let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
            let (xs, ws) = (xt.shape(), wt.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[1] != ws[2] || ws[0] != xs[3] {
                return Err(Error::shape("conv_transpose2d", xs, ws));
            }
            let k = ws[1];
            let full_h = (xs[1] - 1) * stride + k;
            let full_w = (xs[2] - 1) * stride + k;
            if 2 * pad >= full_h || 2 * pad >= full_w {
                return Err(Error::Parameter("transposed-conv padding too large".into()));
            }
            let geom = ConvGeom {
                batch: xs[0],
                h: full_h - 2 * pad,
                w: full_w - 2 * pad,
                c: ws[3],
                k,
                stride,
                pad,
                oh: xs[1],
                ow: xs[2],
                cout: ws[3],
                padding: Padding::Zeros,
            };
            let cin = xs[3];
            let (cw, grid) = (geom.col_width(), geom.grid());
            let img_len = geom.h * geom.w * geom.c;
            let mut cols = vec![S::zero(); grid * cw];
            let mut out = vec![S::zero(); geom.batch * img_len];
            for bi in 0..geom.batch {
                let xb = &xt.data()[bi * grid * cin..][..grid * cin];
                S::gemm(grid, cin, cw, S::one(), xb, cin, 1, wt.data(), cw, 1, S::zero(), &mut cols, cw, 1);
                let o = &mut out[bi * img_len..][..img_len];
                geom.col2im(&cols, o);
            }
            if let Some(b) = b {
                let bias = nodes[b.0].value.data();
                if bias.len() != geom.c {
                    return Err(Error::shape("conv_transpose2d bias", &[bias.len()], &[geom.c]));
                }
                for px in out.chunks_mut(geom.c) {
                    for (v, bb) in px.iter_mut().zip(bias) {
                        *v += *bb;
                    }
                }
            }
            (
                Tensor::from_parts(vec![geom.batch, geom.h, geom.w, geom.c], out),
                geom,
            )
        };
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }))
    }
}

fn bias_backward<S: Scalar>(nodes: &[Node<S>], grads: &mut Grads<S>, b: Option<Var>, c: usize, g: &[S]) {
    if let Some(b) = b {
        accumulate(nodes, grads, b, |gb| {
            for px in g.chunks(c) {
                for (x, y) in gb.iter_mut().zip(px) {
                    *x += *y;
                }
            }
        });
    }
}

pub(crate) fn conv2d_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &[S],
) {
    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
    let (cw, grid, co) = (geom.col_width(), geom.grid(), geom.cout);
    let img_len = geom.h * geom.w * geom.c;
    bias_backward(nodes, grads, b, co, g);
    let mut cols = vec![S::zero(); grid * cw];
    accumulate(nodes, grads, w, |gw| {
        for bi in 0..geom.batch {
            geom.im2col(&xt.data()[bi * img_len..][..img_len], &mut cols);
            let gb = &g[bi * grid * co..][..grid * co];
            // dW[cw, co] += cols^T @ g
            S::gemm(cw, grid, co, S::one(), &cols, 1, cw, gb, co, 1, S::one(), gw, co, 1);
        }
    });
    accumulate(nodes, grads, x, |gx| {
        for bi in 0..geom.batch {
            let gb = &g[bi * grid * co..][..grid * co];
            // dcols[grid, cw] = g @ W^T
            S::gemm(grid, co, cw, S::one(), gb, co, 1, wt.data(), 1, co, S::zero(), &mut cols, cw, 1);
            geom.col2im(&cols, &mut gx[bi * img_len..][..img_len]);
        }
    });
}

pub(crate) fn conv_transpose2d_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: &ConvGeom,
    g: &[S],
) {
    let (xt, wt) = (&nodes[x.0].value, &nodes[w.0].value);
    let cin = xt.shape()[3];
    let (cw, grid) = (geom.col_width(), geom.grid());
    let img_len = geom.h * geom.w * geom.c;
    bias_backward(nodes, grads, b, geom.c, g);
    let mut cols = vec![S::zero(); grid * cw];
    let mut per_batch = Vec::with_capacity(geom.batch);
    for bi in 0..geom.batch {
        geom.im2col(&g[bi * img_len..][..img_len], &mut cols);
        per_batch.push(cols.clone());
    }
    accumulate(nodes, grads, w, |gw| {
        for (bi, dc) in per_batch.iter().enumerate() {
            let xb = &xt.data()[bi * grid * cin..][..grid * cin];
            // dW[cin, cw] += x^T @ dcols
            S::gemm(cin, grid, cw, S::one(), xb, 1, cin, dc, cw, 1, S::one(), gw, cw, 1);
        }
    });
    accumulate(nodes, grads, x, |gx| {
        for (bi, dc) in per_batch.iter().enumerate() {
            // dx[grid, cin] = dcols @ W^T
            let o = &mut gx[bi * grid * cin..][..grid * cin];
            S::gemm(grid, cw, cin, S::one(), dc, cw, 1, wt.data(), 1, cw, S::one(), o, cin, 1);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![1, 3, 4, 1], |i| i as f64 * 0.5));
        let w = g.constant(Tensor::ones(vec![1, 1, 1, 1]));
        let y = g.conv2d(x, w, None, 1, 0, Padding::Zeros).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn averaging_kernel_keeps_constant_with_reflect() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 5, 6, 1], 0.3));
        let w = g.constant(Tensor::full(vec![3, 3, 1, 1], 1.0 / 9.0));
        let y = g.conv2d(x, w, None, 1, 1, Padding::Reflect).unwrap();
        assert_eq!(g.shape(y), vec![1, 5, 6, 1]);
        assert!(g.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        // zero padding darkens the border
        let z = g.conv2d(x, w, None, 1, 1, Padding::Zeros).unwrap();
        assert!((g.value(z).data()[0] - 0.3 * 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn zero_stride_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 4, 4, 1]));
        let w = g.constant(Tensor::zeros(vec![3, 3, 1, 1]));
        assert!(matches!(g.conv2d(x, w, None, 0, 1, Padding::Zeros), Err(Error::Parameter(_))));
        let wt = g.constant(Tensor::zeros(vec![1, 2, 2, 1]));
        assert!(g.conv_transpose2d(x, wt, None, 0, 0).is_err());
    }

    #[test]
    fn stride_two_shapes_invert() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 8, 6, 3]));
        let w = g.constant(Tensor::zeros(vec![3, 3, 3, 5]));
        let d = g.conv2d(x, w, None, 2, 1, Padding::Zeros).unwrap();
        assert_eq!(g.shape(d), vec![2, 4, 3, 5]);
        let wt = g.constant(Tensor::zeros(vec![5, 2, 2, 3]));
        let u = g.conv_transpose2d(d, wt, None, 2, 0).unwrap();
        assert_eq!(g.shape(u), vec![2, 8, 6, 3]);
    }

    #[test]
    fn transposed_conv_scatters_kernel() {
        // one input pixel, 2x2 kernel, stride 2 -> the kernel itself
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![1, 1, 1, 1], &[2.0]).unwrap());
        let w = g.constant(Tensor::from_f64(vec![1, 2, 2, 1], &[1., 2., 3., 4.]).unwrap());
        let y = g.conv_transpose2d(x, w, None, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);
    }
}
