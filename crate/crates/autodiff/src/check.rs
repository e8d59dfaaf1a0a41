//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it shares no code
//! with the reverse sweep it is checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

/// Denominator floor for relative error, so entries whose true gradient is
/// near zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

fn eval(f: &impl Fn(&mut Graph, &ParamStore) -> Result<Var>, params: &ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.value(loss).item()
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps`, over every entry of every parameter.
pub fn check_gradients(
    params: &ParamStore,
    eps: f64,
    f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss, params)?;
    drop(g);

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let grad = analytic.get(&name).expect("backward covers every parameter");
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = orig + eps;
            let plus = eval(&f, &probe)?;
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = orig - eps;
            let minus = eval(&f, &probe)?;
            probe.get_mut(&name).expect("cloned store").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
