//! Central finite-difference gradient verification.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of the backward implementation it checks.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::NumericsError;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor of the relative error, so that near-zero gradients
    /// are compared on an absolute scale of `rel_tol * floor`.
    pub floor: f64,
    /// Check at most this many entries per parameter (evenly strided).
    pub max_entries_per_param: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            floor: 1e-3,
            max_entries_per_param: usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, cfg: &GradCheckConfig) -> bool {
        self.max_rel_error <= cfg.rel_tol
    }
}

/// Compares backward-pass gradients of the scalar produced by `loss` with
/// central differences over the entries of every parameter in `store`.
pub fn check_gradients<F>(store: &ParamStore, loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport, NumericsError>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var, NumericsError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let out = loss(&mut g)?;
        g.backward(out)?
    };
    let eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let mut g = Graph::new(s);
        let out = loss(&mut g)?;
        Ok(g.value(out).item())
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for id in store.ids() {
        let n = store.value(id).len();
        let stride = n.div_ceil(cfg.max_entries_per_param.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + cfg.step;
            let up = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig - cfg.step;
            let down = eval(&probe)?;
            probe.value_mut(id).data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * cfg.step);
            let exact = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let denom = exact.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (exact - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k, exact, numeric));
                }
            }
        }
    }
    Ok(report)
}
