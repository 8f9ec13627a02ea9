use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{invalid, NestError, Result};

/// Magnitude below which gradient entries are compared absolutely rather than relatively.
pub const GRAD_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TensorGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub per_tensor: Vec<TensorGradError>,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn worst(&self) -> Option<&TensorGradError> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − n| / max(|a|, |n|, GRAD_ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_ABS_FLOOR)
}

fn eval<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(NestError::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// finite differences, entry by entry, for every tensor in `store`.
pub fn gradient_check<F>(store: &mut ParamStore, eps: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(invalid(format!("finite-difference step {eps} outside [1e-6, 1e-4]")));
    }
    store.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    if !g.scalar(out).is_finite() {
        return Err(NestError::NonFinite("objective".into()));
    }
    g.backward(out, store)?;
    drop(g);

    let mut per_tensor = Vec::with_capacity(store.len());
    let mut entries = 0;
    for idx in 0..store.len() {
        let (name, t) = store.by_index(idx);
        let name = name.to_string();
        let analytic: Vec<f64> = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.by_index(idx).1.data()[j];
            store.by_index_mut(idx).1.data_mut()[j] = orig + eps;
            let up = eval(&mut f, store)?;
            store.by_index_mut(idx).1.data_mut()[j] = orig - eps;
            let down = eval(&mut f, store)?;
            store.by_index_mut(idx).1.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
            entries += 1;
        }
        per_tensor.push(TensorGradError {
            name,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = per_tensor.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        eps,
        tol,
        per_tensor,
        max_rel_err,
        entries_checked: entries,
    })
}
