//! Central finite-difference verification of backward rules (64-bit).

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    /// Max over elements of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    /// with `floor = 1e-3 * max|numeric|` over every checked element (and at
    /// least 1e-10).
    pub max_rel_err: f64,
}

impl GradCheckReport {
    fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Self {
        let scale = pairs
            .iter()
            .flat_map(|(_, n)| n.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-10);
        let mut r = GradCheckReport::default();
        for (analytic, numeric) in pairs {
            for (a, n) in analytic.iter().zip(numeric) {
                let abs = (a - n).abs();
                let rel = abs / a.abs().max(n.abs()).max(floor);
                r.max_abs_err = r.max_abs_err.max(abs);
                r.max_rel_err = r.max_rel_err.max(rel);
                r.checked += 1;
            }
        }
        r
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::contract("gradient check needs a scalar function"));
    }
    Ok(t.data()[0])
}

/// Checks d f / d inputs where `f` builds a scalar from the given input leaves.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;
    let mut pairs = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[i])
            .map(|t| t.into_data())
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut numeric = vec![0.0; t.len()];
        for j in 0..t.len() {
            let eval = |delta: f64| -> Result<f64> {
                let g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, src)| {
                        let mut c = src.clone();
                        if k == i {
                            c.data_mut()[j] += delta;
                        }
                        g2.constant(c)
                    })
                    .collect();
                let o = f(&g2, &vs)?;
                scalar_of(&g2, o)
            };
            numeric[j] = (eval(step)? - eval(-step)?) / (2.0 * step);
        }
        pairs.push((analytic, numeric));
    }
    Ok(GradCheckReport::from_pairs(&pairs))
}

/// Checks d f / d params for every trainable parameter of `store`, sampling at
/// most `per_tensor` evenly spaced elements of each tensor.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    step: f64,
    per_tensor: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    g.backward(out)?;
    let mut grads = store.clone();
    grads.zero_grads();
    g.write_param_grads(&mut grads);
    let mut pairs = Vec::new();
    let mut work = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let n = p.value.len();
        let stride = n.div_ceil(per_tensor.max(1)).max(1);
        let picks: Vec<usize> = (0..n).step_by(stride).collect();
        let full = grads
            .get(id)
            .value
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let analytic: Vec<f64> = picks.iter().map(|&j| full[j]).collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let orig = work.get(id).value.data()[j];
            let mut eval = |v: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[j] = v;
                let g2 = Graph::new();
                let o = f(&g2, &work)?;
                scalar_of(&g2, o)
            };
            let up = eval(orig + step)?;
            let down = eval(orig - step)?;
            work.get_mut(id).value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        pairs.push((analytic, numeric));
    }
    Ok(GradCheckReport::from_pairs(&pairs))
}

/// Random projection `sum(out * r)` turning a tensor output into a scalar.
pub fn project(g: &Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    use rand::{RngExt, SeedableRng};
    let shape = g.shape(out);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}
