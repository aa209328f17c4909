//! Central finite-difference checks for analytic gradients.

use crate::params::ParameterSet;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub relative_error: f64,
    pub absolute_error: f64,
    pub analytic_norm: f64,
}

/// Differences below this are central-difference noise, not gradient errors.
pub const ABSOLUTE_FLOOR: f64 = 1e-9;

impl TensorCheck {
    pub fn passes(&self, relative_tol: f64) -> bool {
        self.relative_error <= relative_tol || self.absolute_error <= ABSOLUTE_FLOOR
    }
}

/// Perturbs every entry of `params` by `±eps`, evaluates `loss`, and compares
/// the central difference against `analytic` tensor by tensor. The relative
/// error of a tensor is `‖a − n‖ / max(‖a‖, ‖n‖)` (zero when both vanish);
/// tensors whose true gradient is identically zero are judged on the
/// absolute error instead.
pub fn check_gradients<F>(params: &mut ParameterSet, analytic: &ParameterSet, eps: f64, mut loss: F) -> Vec<TensorCheck>
where
    F: FnMut(&ParameterSet) -> f64,
{
    let mut out = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let mut diff_sq = 0.0;
        let mut num_sq = 0.0;
        let mut ana_sq = 0.0;
        for j in 0..params.tensor(idx).len() {
            let orig = params.tensor(idx).data()[j];
            params.tensor_mut(idx).data_mut()[j] = orig + eps;
            let plus = loss(params);
            params.tensor_mut(idx).data_mut()[j] = orig - eps;
            let minus = loss(params);
            params.tensor_mut(idx).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.tensor(idx).data()[j];
            diff_sq += (a - numeric) * (a - numeric);
            num_sq += numeric * numeric;
            ana_sq += a * a;
        }
        let denom = ana_sq.sqrt().max(num_sq.sqrt());
        let relative_error = if denom == 0.0 { 0.0 } else { diff_sq.sqrt() / denom };
        out.push(TensorCheck {
            name: params.name(idx).to_string(),
            relative_error,
            absolute_error: diff_sq.sqrt(),
            analytic_norm: ana_sq.sqrt(),
        });
    }
    out
}
