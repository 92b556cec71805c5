//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, ParamStore, Tensor, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over the
    /// elements whose absolute error exceeds the absolute tolerance.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Tolerances used across the crate: an element passes if either its
/// relative error is ≤ `rel` or its absolute error is ≤ `abs`.
#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            rel: 1e-4,
            abs: 1e-6,
        }
    }
}

/// Compares the reverse-mode gradient of `f` with central differences of
/// step `h`, for every element of every input.
///
/// `f` receives a fresh graph and leaf handles for `inputs` and must return a
/// one-element loss. When `dropout_seed` is set the graph runs in training
/// mode with that seed for every evaluation, so random masks are identical
/// across the perturbed evaluations.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    h: f64,
    tol: Tolerance,
    dropout_seed: Option<u64>,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let fresh = || match dropout_seed {
        Some(seed) => Graph::training(seed),
        None => Graph::new(),
    };
    let eval = |values: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = fresh();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut g = fresh();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(i, e, analytic.data()[e], numeric, tol);
        }
    }
    Ok(report)
}

/// Finite-difference check of parameter gradients.
///
/// `f` builds a loss from the store. With `sample = Some((k, seed))` at most
/// `k` randomly chosen elements of each parameter are perturbed.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    f: F,
    h: f64,
    tol: Tolerance,
    dropout_seed: Option<u64>,
    sample: Option<(usize, u64)>,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, NumericsError>,
{
    let fresh = || match dropout_seed {
        Some(seed) => Graph::training(seed),
        None => Graph::new(),
    };
    let mut g = fresh();
    let loss = f(&mut g, store)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, grad) in grads.params() {
        analytic[id.index()] = Some(grad.to_vec());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(sample.map_or(0, |s| s.1));
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        failures: Vec::new(),
    };
    let mut work = store.clone();
    for id in store.ids() {
        let numel = store.get(id).numel();
        let mut elems: Vec<usize> = (0..numel).collect();
        if let Some((k, _)) = sample {
            elems.shuffle(&mut rng);
            elems.truncate(k);
        }
        for e in elems {
            let orig = store.get(id).data()[e];
            let mut eval = |x: f64| -> Result<f64, NumericsError> {
                work.get_mut(id).data_mut()[e] = x;
                let mut g = fresh();
                let l = f(&mut g, &work)?;
                Ok(g.value(l).item())
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.index()].as_ref().map_or(0.0, |v| v[e]);
            report.record(id.index(), e, a, numeric, tol);
        }
    }
    Ok(report)
}

impl GradCheckReport {
    fn record(
        &mut self,
        input: usize,
        element: usize,
        analytic: f64,
        numeric: f64,
        tol: Tolerance,
    ) {
        let abs_err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs_err);
        if abs_err > tol.abs {
            self.max_rel_err = self.max_rel_err.max(rel_err);
            if rel_err > tol.rel {
                self.failures.push(GradMismatch {
                    input,
                    element,
                    analytic,
                    numeric,
                });
            }
        }
    }
}
