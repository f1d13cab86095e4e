//! Central-difference verification of reverse-mode gradients, in `f64`.

use std::collections::BTreeMap;

use super::graph::{Eager, Graph};
use super::params::ParamStore;
use super::Backend;
use crate::error::{Error, Result};

/// A deterministic scalar function of the parameters in a store.
///
/// Generic over the backend so the same definition runs on the tape
/// (analytic gradient) and eagerly (finite differences).
pub trait Objective {
    fn eval<B: Backend<Elem = f64>>(&self, b: &mut B) -> Result<B::Value>;
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_a - g_n| / max(|g_a|, |g_n|, 1e-8)` over all checked entries.
    pub max_rel_error: f64,
    pub offending_param: Option<String>,
    pub offending_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Worst relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions {
    /// Check only these parameters (all when `None`).
    pub only: Option<Vec<String>>,
    /// Evenly subsample tensors larger than this many entries.
    pub max_entries_per_param: Option<usize>,
}

fn eval_at<O: Objective>(f: &O, params: &ParamStore<f64>) -> Result<f64> {
    let mut b = Eager::new(params);
    let out = f.eval(&mut b)?;
    b.value(&out).item()
}

/// Checks every entry of every parameter.
pub fn grad_check<O: Objective>(f: &O, params: &ParamStore<f64>, eps: f64) -> Result<GradCheckReport> {
    grad_check_with(f, params, eps, &GradCheckOptions::default())
}

pub fn grad_check_with<O: Objective>(
    f: &O,
    params: &ParamStore<f64>,
    eps: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", format!("eps must be positive, got {eps}")));
    }
    let first = eval_at(f, params)?;
    let second = eval_at(f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new(params);
    let loss = f.eval(&mut g)?;
    let analytic = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        offending_param: None,
        offending_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        per_param: BTreeMap::new(),
        entries_checked: 0,
    };
    let mut work = params.clone();
    for (name, tensor) in params.iter() {
        if let Some(only) = &opts.only {
            if !only.contains(name) {
                continue;
            }
        }
        let n = tensor.numel();
        let step = match opts.max_entries_per_param {
            Some(m) if n > m => n.div_ceil(m),
            _ => 1,
        };
        // parameters the objective never touched have zero analytic gradient
        let ga_all = analytic.get(name).map(|t| t.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(step) {
            let orig = tensor.data()[i];
            work.set_entry(name, i, orig + eps)?;
            let plus = eval_at(f, &work)?;
            work.set_entry(name, i, orig - eps)?;
            let minus = eval_at(f, &work)?;
            work.set_entry(name, i, orig)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let ga = ga_all[i];
            let rel = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.offending_param = Some(name.clone());
                report.offending_index = i;
                report.analytic = ga;
                report.numeric = numeric;
            }
        }
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Square;
    impl Objective for Square {
        fn eval<B: Backend<Elem = f64>>(&self, b: &mut B) -> Result<B::Value> {
            let w = b.param("w")?;
            let y = b.mul(&w, &w)?;
            b.sum(&y)
        }
    }

    #[test]
    fn quadratic() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(3.0f64));
        p.insert("unused", Tensor::scalar(1.0f64));
        let r = grad_check(&Square, &p, 1e-5).unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-8 || r.max_rel_error == 0.0);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        // independent parameter: both gradients zero
        assert_eq!(r.per_param["unused"], 0.0);
    }

    struct Flaky(std::cell::Cell<f64>);
    impl Objective for Flaky {
        fn eval<B: Backend<Elem = f64>>(&self, b: &mut B) -> Result<B::Value> {
            self.0.set(self.0.get() + 1.0);
            let w = b.param("w")?;
            let c = b.constant(Tensor::scalar(self.0.get()));
            let y = b.mul(&w, &c)?;
            b.sum(&y)
        }
    }

    #[test]
    fn nondeterminism_is_detected() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(1.0f64));
        let err = grad_check(&Flaky(Default::default()), &p, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
