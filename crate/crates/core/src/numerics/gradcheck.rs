use super::params::ParamSet;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub per_param: Vec<ParamGradError>,
    pub tol: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

/// Compares analytic gradients against central differences.
///
/// `loss` must zero nothing itself: it receives the parameter set with cleared
/// gradient accumulators, returns the loss and leaves the analytic gradient
/// in the accumulators. Only parameters whose name passes `select` are
/// perturbed.
pub fn grad_check<F>(
    mut loss: F,
    params: &mut ParamSet,
    select: impl Fn(&str) -> bool,
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: FnMut(&mut ParamSet) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    params.zero_grads();
    let base = loss(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let analytic = params.clone();

    let names: Vec<String> = params.names().filter(|n| select(n)).map(str::to_string).collect();
    let mut per_param = Vec::with_capacity(names.len());
    for name in names {
        let n = params.value(&name)?.len();
        let mut worst = ParamGradError {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = params.value(&name)?.data()[i];
            params.value_mut(&name)?.data_mut()[i] = orig + h;
            let up = loss(params)?;
            params.value_mut(&name)?.data_mut()[i] = orig - h;
            let down = loss(params)?;
            params.value_mut(&name)?.data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite("loss".into()));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.grad(&name)?.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > worst.max_rel_err {
                worst = ParamGradError {
                    name: name.clone(),
                    max_rel_err: rel,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_param.push(worst);
    }
    params.zero_grads();
    Ok(GradReport { per_param, tol })
}
