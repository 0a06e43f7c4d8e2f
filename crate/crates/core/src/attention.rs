//! Short-range path: single-head self-attention inside non-overlapping windows.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Init, ParamId, ParamStore, Scalar, Var};
use crate::error::{Error, Result};

fn check_divisible(h: usize, w: usize, m: usize) -> Result<()> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::contract(format!(
            "feature map {h}x{w} not divisible by window {m}"
        )));
    }
    Ok(())
}

/// Row index (into the flattened `[b*h*w, c]` map) of every token in window order.
pub fn partition_index(b: usize, h: usize, w: usize, m: usize) -> Result<Vec<usize>> {
    check_divisible(h, w, m)?;
    let mut idx = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        idx.push((bi * h + wy * m + iy) * w + wx * m + ix);
                    }
                }
            }
        }
    }
    Ok(idx)
}

pub fn inverse_index(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (pos, &src) in index.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

fn dims4(g: &Graph<impl Scalar>, x: Var) -> Result<[usize; 4]> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape("feature map", &s, &[0, 0, 0, 0]));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// `[b, h, w, c] -> [b * n_windows, m*m, c]`.
pub fn window_partition<S: Scalar>(g: &Graph<S>, x: Var, m: usize) -> Result<Var> {
    let [b, h, w, c] = dims4(g, x)?;
    let idx = partition_index(b, h, w, m)?;
    let rows = g.gather_rows(x, Rc::from(idx))?;
    g.reshape(rows, &[b * (h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`] for a map of shape `[b, h, w, _]`.
pub fn window_merge<S: Scalar>(
    g: &Graph<S>,
    windows: Var,
    b: usize,
    h: usize,
    w: usize,
    m: usize,
) -> Result<Var> {
    let s = g.shape(windows);
    let c = *s.last().expect("rank >= 1");
    let inv = inverse_index(&partition_index(b, h, w, m)?);
    let rows = g.gather_rows(windows, Rc::from(inv))?;
    g.reshape(rows, &[b, h, w, c])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub window: usize,
    pub dim_k: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttentionParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        c: usize,
        dim_k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mk = |p: &str| {
            store.init(
                format!("{name}.{p}"),
                &[c, dim_k],
                Init::Uniform { fan_in: c, gain: 1.0 },
                rng,
            )
        };
        Ok(AttentionParams {
            wq: mk("wq")?,
            wk: mk("wk")?,
            wv: mk("wv")?,
        })
    }
}

pub struct AttentionOutput {
    /// `[b, h, w, dim_k]`.
    pub out: Var,
    /// `[b * n_windows, m*m, m*m]`, rows sum to one.
    pub weights: Var,
}

/// `Softmax(Q Kᵀ / √d_k) V` per window, merged back to the spatial layout.
pub fn window_attention<S: Scalar>(
    g: &Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    cfg: WindowConfig,
    p: &AttentionParams,
) -> Result<AttentionOutput> {
    let [b, h, w, _] = dims4(g, x)?;
    let m = cfg.window;
    let xw = window_partition(g, x, m)?;
    let q = g.linear(xw, g.param(store, p.wq), None)?;
    let k = g.linear(xw, g.param(store, p.wk), None)?;
    let v = g.linear(xw, g.param(store, p.wv), None)?;
    let dk = *g.shape(q).last().expect("rank 3");
    if dk != cfg.dim_k {
        return Err(Error::shape("window_attention", &[cfg.dim_k], &[dk]));
    }
    let scores = g.bmm(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax_last(scores)?;
    let out = g.bmm(weights, v, false, false)?;
    let out = window_merge(g, out, b, h, w, m)?;
    Ok(AttentionOutput { out, weights })
}

/// Mean attention weight per integer-rounded Euclidean token distance.
#[derive(Clone, Debug, Default)]
pub struct DistanceProfile {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl DistanceProfile {
    /// Adds captured weights `[n_windows, m*m, m*m]` of square `m×m` windows.
    pub fn add(&mut self, weights: &[f64], m: usize) -> Result<()> {
        let l = m * m;
        if l == 0 || weights.is_empty() || weights.len() % (l * l) != 0 {
            return Err(Error::contract(format!(
                "attention capture of {} values does not match window {m}",
                weights.len()
            )));
        }
        let max_bin = (((m - 1) * (m - 1) * 2) as f64).sqrt().round() as usize;
        if self.sums.len() <= max_bin {
            self.sums.resize(max_bin + 1, 0.0);
            self.counts.resize(max_bin + 1, 0);
        }
        let bins: Vec<usize> = (0..l * l)
            .map(|qk| {
                let (q, k) = (qk / l, qk % l);
                let dy = (q / m) as f64 - (k / m) as f64;
                let dx = (q % m) as f64 - (k % m) as f64;
                dy.hypot(dx).round() as usize
            })
            .collect();
        for win in weights.chunks_exact(l * l) {
            for (wv, &bin) in win.iter().zip(&bins) {
                self.sums[bin] += wv;
                self.counts[bin] += 1;
            }
        }
        Ok(())
    }

    /// `(distance, mean_weight)` for every distance with at least one pair.
    pub fn bins(&self) -> Result<Vec<(usize, f64)>> {
        if self.counts.iter().all(|c| *c == 0) {
            return Err(Error::contract("empty attention capture"));
        }
        Ok(self
            .sums
            .iter()
            .zip(&self.counts)
            .enumerate()
            .filter(|(_, (_, c))| **c > 0)
            .map(|(d, (s, c))| (d, s / *c as f64))
            .collect())
    }

    /// Fraction of the profile's total mean weight at distances ≥ `from`.
    pub fn tail_mass(&self, from: usize) -> Result<f64> {
        let bins = self.bins()?;
        let total: f64 = bins.iter().map(|(_, w)| w).sum();
        let tail: f64 = bins.iter().filter(|(d, _)| *d >= from).map(|(_, w)| w).sum();
        Ok(tail / total)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "distance,mean_weight")?;
        for (d, w) in self.bins()? {
            writeln!(f, "{d},{w}")?;
        }
        f.flush()?;
        Ok(())
    }
}
