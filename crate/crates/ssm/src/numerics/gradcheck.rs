//! Central-difference gradient verification, independent of the tape.

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Per-parameter outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checks analytic gradients against central differences.
///
/// `loss_fn(store, accumulate)` evaluates the scalar loss; when
/// `accumulate` is true it must also write analytic gradients into the
/// store. The function must be deterministic: two plain evaluations
/// that disagree abort with a determinism error.
///
/// Relative error per entry: `|analytic - fd| / max(1, |fd|)`.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must lie in [1e-6, 1e-4], got {h}"
        )));
    }
    let l0 = loss_fn(store, false)?;
    let l1 = loss_fn(store, false)?;
    if l0 != l1 {
        return Err(Error::Determinism(l0, l1));
    }

    store.zero_grads();
    loss_fn(store, true)?;
    let analytic: Vec<(String, Vec<f64>, bool)> = store
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec(), p.trainable))
        .collect();

    let mut per_param = Vec::new();
    for (name, grad, trainable) in analytic {
        if !trainable {
            continue;
        }
        let mut max_rel = 0.0;
        let mut worst = 0;
        for j in 0..grad.len() {
            let orig = store.by_name(&name)?.value.data()[j];
            store.by_name_mut(&name)?.value.data_mut()[j] = orig + h;
            let lp = loss_fn(store, false)?;
            store.by_name_mut(&name)?.value.data_mut()[j] = orig - h;
            let lm = loss_fn(store, false)?;
            store.by_name_mut(&name)?.value.data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = j;
            }
        }
        per_param.push(ParamCheck {
            name,
            max_rel_err: max_rel,
            worst_index: worst,
        });
    }

    let (max_rel_err, worst_param) = per_param
        .iter()
        .map(|c| (c.max_rel_err, c.name.clone()))
        .fold((0.0, String::new()), |acc, x| if x.0 > acc.0 { x } else { acc });
    Ok(GradCheckReport {
        per_param,
        max_rel_err,
        worst_param,
    })
}
