//! Central finite-difference gradient checking.
//!
//! The numeric side only runs forward passes, so it is independent of the
//! backward implementation it checks.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{GradMode, Graph, Var};
use crate::params::ParamStore;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Relative error with a small floor so that near-zero gradients compare on
/// an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare analytic gradients of `loss` against central differences for
/// every scalar of every parameter. `stride` > 1 checks a deterministic
/// subset of entries per parameter.
pub fn check_params<F>(store: &mut ParamStore, step: f64, stride: usize, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic: Vec<Option<crate::Mat>> = {
        let mut g = Graph::new(store, GradMode::All);
        let l = loss(&mut g)?;
        g.backward(l).into_param_grads()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, GradMode::None);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).data.len();
        let stride = stride.max(1);
        let mut i = id.0 % stride;
        while i < n {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + step;
            let plus = eval(store)?;
            store.value_mut(id).data[i] = orig - step;
            let minus = eval(store)?;
            store.value_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g.data[i]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                if e >= report.max_rel_err {
                    report.worst = Some((store.get(id).name.clone(), i, a, numeric));
                }
            }
            i += stride;
        }
    }
    Ok(report)
}
