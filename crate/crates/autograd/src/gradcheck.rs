//! Central finite-difference gradient checks against the reverse sweep.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]: below it the comparison is
/// effectively absolute at `1e-3 × tolerance`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_err: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = err;
            self.worst = format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", label());
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks d f / d inputs for a scalar-valued `f`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<'g>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = ins.iter().map(|t| g.input(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };
    let mut work = inputs.to_vec();
    let mut report = GradReport::new();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            report.record(|| format!("input {i}[{j}]"), analytic[i].data()[j], numeric);
        }
    }
    Ok(report)
}

/// Checks d f / d parameters. With `per_param = Some(n)` only `n` randomly
/// chosen entries of each parameter are perturbed.
pub fn check_params<F>(store: &ParamStore, f: F, per_param: Option<usize>, seed: u64) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph<'g>) -> Result<Var<'g>>,
{
    let grads = {
        let g = Graph::with_params(store);
        let loss = f(&g)?;
        let grads = g.backward(loss)?;
        store
            .iter()
            .map(|(id, p)| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect::<Vec<_>>()
    };
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradReport::new();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).numel();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in picks {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + STEP;
            let plus = f(&Graph::with_params(&work))?.item();
            work.value_mut(id).data_mut()[j] = orig - STEP;
            let minus = f(&Graph::with_params(&work))?.item();
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let name = &store.get(id).name;
            report.record(|| format!("{name}[{j}]"), grads[id.index()].data()[j], numeric);
        }
    }
    Ok(report)
}
