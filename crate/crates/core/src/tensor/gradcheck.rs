use super::{ParamId, ParamSet};
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h` for coordinate `index` of `x`. The input is
/// restored before returning.
pub fn central_difference(
    x: &mut [f64],
    index: usize,
    step: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let orig = x[index];
    x[index] = orig + step;
    let plus = f(x);
    x[index] = orig - step;
    let minus = f(x);
    x[index] = orig;
    (plus - minus) / (2.0 * step)
}

/// Outcome of comparing analytic parameter gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDifference {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl FiniteDifference {
    /// Checks `coords` of `params`, whose `grad` fields must already hold the
    /// analytic gradient of `loss`.
    pub fn check(
        params: &mut ParamSet<f64>,
        coords: &[(ParamId, usize)],
        step: f64,
        mut loss: impl FnMut(&ParamSet<f64>) -> Result<f64>,
    ) -> Result<Self> {
        let mut report = FiniteDifference {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        };
        for &(id, index) in coords {
            let analytic = params
                .get(id)
                .tensor
                .grad()
                .map(|g| g[index])
                .unwrap_or(0.0);
            let orig = params.get(id).tensor.data()[index];
            params.get_mut(id).tensor.data_mut()[index] = orig + step;
            let plus = loss(params)?;
            params.get_mut(id).tensor.data_mut()[index] = orig - step;
            let minus = loss(params)?;
            params.get_mut(id).tensor.data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numeric("finite difference"));
            }
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), index, analytic, numeric));
            }
        }
        Ok(report)
    }
}
