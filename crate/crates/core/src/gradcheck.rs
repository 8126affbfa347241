//! Central finite-difference verification of analytic gradients.

use indexmap::IndexMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Module;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// up to rounding do not produce spurious failures.
    pub abs_floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_per_param: Option<usize>,
    /// Fail if more than this fraction of coordinates had to be skipped
    /// because the perturbation crossed a kink.
    pub max_skip_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            max_per_param: None,
            max_skip_fraction: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub loss: f64,
    pub skip_fraction: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Analytic gradients of every trainable parameter bound by `build`.
pub fn analytic_gradients<M, F>(model: &M, build: &mut F) -> Result<(f64, IndexMap<String, Vec<f64>>)>
where
    M: Module,
    F: FnMut(&mut Graph, &M) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, model)?;
    g.backward(loss)?;
    let mut out = IndexMap::new();
    for (name, v) in g.bindings() {
        let Some(entry) = model.find(name) else { continue };
        if !entry.trainable {
            continue;
        }
        let grad = g
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; entry.tensor.numel()]);
        out.insert(name.to_owned(), grad);
    }
    Ok((g.item(loss), out))
}

fn evaluate<M, F>(model: &M, build: &mut F) -> Result<(f64, u64)>
where
    M: Module,
    F: FnMut(&mut Graph, &M) -> Result<Var>,
{
    let mut g = Graph::with_kink_tracking();
    let loss = build(&mut g, model)?;
    Ok((g.item(loss), g.kink_signature()))
}

/// Compares analytic gradients from the graph against central differences.
pub fn check_gradients<M, F>(model: &mut M, mut build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Module,
    F: FnMut(&mut Graph, &M) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(model, &mut build)?;
    check_against(model, build, &analytic, opts)
}

/// Compares the supplied `analytic` gradients against central differences
/// of `build`. Coordinates whose `+step` or `-step` evaluation takes a
/// different branch at any kink than the unperturbed loss are skipped.
pub fn check_against<M, F>(
    model: &mut M,
    mut build: F,
    analytic: &IndexMap<String, Vec<f64>>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Module,
    F: FnMut(&mut Graph, &M) -> Result<Var>,
{
    let (loss0, sig0) = evaluate(model, &mut build)?;
    let (loss1, sig1) = evaluate(model, &mut build)?;
    if loss0.to_bits() != loss1.to_bits() || sig0 != sig1 {
        return Err(Error::Invalid(format!(
            "loss closure is not deterministic: {loss0:e} then {loss1:e}"
        )));
    }

    let h = opts.step;
    let mut params = Vec::new();
    let mut total = 0usize;
    let mut skipped = 0usize;
    for (name, grad) in analytic {
        let numel = grad.len();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < numel => (0..k).map(|j| j * numel / k).collect(),
            _ => (0..numel).collect(),
        };
        let mut pc = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in indices {
            let orig = model
                .find(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?
                .tensor
                .data()[i];
            let mut at = |model: &mut M, v: f64| -> Result<(f64, u64)> {
                model.find_mut(name).expect("present").tensor.data_mut()[i] = v;
                evaluate(model, &mut build)
            };
            let plus = at(model, orig + h);
            let minus = at(model, orig - h);
            model.find_mut(name).expect("present").tensor.data_mut()[i] = orig;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            total += 1;
            if sp != sig0 || sm != sig0 {
                pc.skipped_kinks += 1;
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            pc.checked += 1;
            if rel > pc.max_rel_err || pc.checked == 1 {
                pc.max_rel_err = pc.max_rel_err.max(rel);
                pc.worst_index = i;
                pc.worst_analytic = a;
                pc.worst_numeric = numeric;
            }
        }
        params.push(pc);
    }
    let skip_fraction = if total == 0 { 0.0 } else { skipped as f64 / total as f64 };
    let passed = total > 0
        && skip_fraction <= opts.max_skip_fraction
        && params.iter().all(|p| p.max_rel_err <= opts.tol);
    Ok(GradCheckReport {
        params,
        tol: opts.tol,
        loss: loss0,
        skip_fraction,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(), true)
            .unwrap();
        s
    }

    fn quadratic(g: &mut Graph, s: &ParamStore) -> Result<Var> {
        let w = g.param(s, "w")?;
        let sq = g.mul(w, w)?;
        let sc = g.scale(sq, 1.5);
        Ok(g.sum(sc))
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let mut s = quadratic_store();
        let opts = GradCheckOptions {
            tol: 1e-6,
            ..Default::default()
        };
        let r = check_gradients(&mut s, quadratic, &opts).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked(), 3);
        // parameters are restored
        assert_eq!(s.get("w").unwrap().tensor.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut s = quadratic_store();
        let (_, mut grads) = analytic_gradients(&s, &mut quadratic).unwrap();
        grads.get_mut("w").unwrap()[1] *= 1.01;
        let r = check_against(&mut s, quadratic, &grads, &GradCheckOptions::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst().unwrap().worst_index, 1);
    }

    #[test]
    fn nondeterministic_closure_rejected() {
        let mut s = quadratic_store();
        let mut calls = 0;
        let build = |g: &mut Graph, s: &ParamStore| {
            calls += 1;
            let w = g.param(s, "w")?;
            let t = g.sum(w);
            Ok(g.add_scalar(t, calls as f64))
        };
        let err = check_gradients(&mut s, build, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

}
