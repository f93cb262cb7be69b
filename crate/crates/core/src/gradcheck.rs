//! Central finite-difference checks of graph gradients (float64).
//!
//! The error for one tensor is `|g_analytic - g_numeric|_2 / max(|g_analytic|_2, |g_numeric|_2)`
//! over the checked entries; a check reports the worst tensor. The denominator is floored at
//! `GRAD_FLOOR` so tensors with an exactly zero gradient (biases ahead of a normalization)
//! measure finite-difference noise against a sane scale.

use ndarray::ArrayD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub entries: usize,
}

impl GradCheck {
    fn merge(&mut self, name: &str, err: f64, entries: usize) {
        self.entries += entries;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = name.to_string();
        }
    }
}

/// Smallest gradient norm used as the error denominator.
pub const GRAD_FLOOR: f64 = 1e-3;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(GRAD_FLOOR)
}

fn pick(len: usize, max_entries: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max_entries {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max_entries).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks gradients with respect to free inputs.
pub fn check_inputs<F>(inputs: &[ArrayD<f64>], f: F, eps: f64, max_entries: usize, seed: u64) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[ArrayD<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.input(v.clone())).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.input(v.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(&g, *v);
        let idx = pick(inputs[i].len(), max_entries, &mut rng);
        let mut vals = inputs.to_vec();
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &k in &idx {
            let orig = inputs[i].as_slice().unwrap()[k];
            vals[i].as_slice_mut().unwrap()[k] = orig + eps;
            let up = eval(&vals);
            vals[i].as_slice_mut().unwrap()[k] = orig - eps;
            let down = eval(&vals);
            vals[i].as_slice_mut().unwrap()[k] = orig;
            n.push((up - down) / (2.0 * eps));
            a.push(analytic.as_slice().unwrap()[k]);
        }
        report.merge(&format!("input{i}"), rel_error(&a, &n), idx.len());
    }
    report
}

/// Checks gradients with respect to every unfrozen parameter in `store`.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, eps: f64, max_entries: usize, seed: u64) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let out = f(&mut g, s);
        g.scalar(out)
    };
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let analytic = grads.param(id).cloned().unwrap_or_else(|| ArrayD::zeros(p.value.raw_dim()));
        let idx = pick(p.value.len(), max_entries, &mut rng);
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &k in &idx {
            let orig = p.value.as_slice().unwrap()[k];
            work.value_mut(id).as_slice_mut().unwrap()[k] = orig + eps;
            let up = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[k] = orig - eps;
            let down = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[k] = orig;
            n.push((up - down) / (2.0 * eps));
            a.push(analytic.as_slice().unwrap()[k]);
        }
        report.merge(&p.name, rel_error(&a, &n), idx.len());
    }
    report
}
