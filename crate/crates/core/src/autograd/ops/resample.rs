//! Separable spatial resampling of NHWC maps (bilinear, adaptive average).

use std::rc::Rc;

use crate::autograd::graph::{accumulate, Grads, Graph, Node, Op, Var};
use crate::autograd::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

type Taps = Vec<Vec<(usize, f64)>>;

/// Per-axis interpolation taps; output pixel `(oy, ox)` reads
/// `sum_y sum_x wy * wx * in[iy, ix]`.
pub struct ResampleTable {
    pub(crate) batch: usize,
    pub(crate) h: usize,
    pub(crate) w: usize,
    pub(crate) c: usize,
    pub(crate) ys: Taps,
    pub(crate) xs: Taps,
}

/// Align-corners-false bilinear taps (the half-pixel convention).
fn bilinear_taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = pos - i0 as f64;
            if i0 == i1 || l == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - l), (i1, l)]
            }
        })
        .collect()
}

/// Adaptive average pooling taps: bin `o` covers `[floor(o*src/dst), ceil((o+1)*src/dst))`.
fn average_taps(src: usize, dst: usize) -> Taps {
    (0..dst)
        .map(|o| {
            let start = o * src / dst;
            let end = ((o + 1) * src).div_ceil(dst);
            let wgt = 1.0 / (end - start) as f64;
            (start..end).map(|i| (i, wgt)).collect()
        })
        .collect()
}

impl<S: Scalar> Graph<S> {
    fn resample(&self, a: Var, oh: usize, ow: usize, taps: fn(usize, usize) -> Taps) -> Result<Var> {
        if oh == 0 || ow == 0 {
            return Err(Error::Parameter("resample target must be at least 1x1".into()));
        }
        let shape = self.shape(a);
        if shape.len() != 4 {
            return Err(Error::shape("resample", &shape, &[0, oh, ow, 0]));
        }
        let table = ResampleTable {
            batch: shape[0],
            h: shape[1],
            w: shape[2],
            c: shape[3],
            ys: taps(shape[1], oh),
            xs: taps(shape[2], ow),
        };
        let value = {
            let t = self.value(a);
            let (h, w, c) = (table.h, table.w, table.c);
            let x = t.data();
            let mut out = vec![S::zero(); table.batch * oh * ow * c];
            for b in 0..table.batch {
                for (oy, ty) in table.ys.iter().enumerate() {
                    for (ox, tx) in table.xs.iter().enumerate() {
                        let o = &mut out[((b * oh + oy) * ow + ox) * c..][..c];
                        for &(iy, wy) in ty {
                            for &(ix, wx) in tx {
                                let wgt = S::of(wy * wx);
                                let src = &x[((b * h + iy) * w + ix) * c..][..c];
                                for j in 0..c {
                                    o[j] += wgt * src[j];
                                }
                            }
                        }
                    }
                }
            }
            Tensor::from_parts(vec![table.batch, oh, ow, c], out)
        };
        Ok(self.push(
            value,
            Op::Resample {
                a,
                table: Rc::new(table),
            },
        ))
    }

    /// Bilinear resize of `[b, h, w, c]` to `[b, oh, ow, c]`, align_corners = false.
    pub fn bilinear_resize(&self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        self.resample(a, oh, ow, bilinear_taps)
    }

    pub fn adaptive_avg_pool(&self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        self.resample(a, oh, ow, average_taps)
    }
}

pub(crate) fn resample_backward<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut Grads<S>,
    a: Var,
    table: &ResampleTable,
    g: &[S],
) {
    let (h, w, c) = (table.h, table.w, table.c);
    let (oh, ow) = (table.ys.len(), table.xs.len());
    accumulate(nodes, grads, a, |ga| {
        for b in 0..table.batch {
            for (oy, ty) in table.ys.iter().enumerate() {
                for (ox, tx) in table.xs.iter().enumerate() {
                    let go = &g[((b * oh + oy) * ow + ox) * c..][..c];
                    for &(iy, wy) in ty {
                        for &(ix, wx) in tx {
                            let wgt = S::of(wy * wx);
                            let dst = &mut ga[((b * h + iy) * w + ix) * c..][..c];
                            for j in 0..c {
                                dst[j] += wgt * go[j];
                            }
                        }
                    }
                }
            }
        }
    });
}
