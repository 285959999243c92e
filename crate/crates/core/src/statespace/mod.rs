//! Maximum-likelihood training on noisy `(q, q')` observations,
//! forecasting, and RMSE/energy evaluation.

mod eval;
mod train;

use std::f64::consts::PI;

pub use eval::{
    evaluate, evaluation_trajectories, forecast, forecast_bound, write_metrics_csv, Metrics,
    EVAL_SEED_OFFSET, HORIZON, RK4_SUBSTEPS,
};
pub use train::{
    initial_fit, initial_from_observations, load_state_fit, save_state_fit, train_mle, GridPoint,
    StateHyper, StateObjective, StateSpaceFit,
};

use crate::diff::{DiffError, Result as DiffResult, Tensor, Var};

/// `sum_i log N(y_i | x_i, sigma2)` over every element of `y`.
pub fn gaussian_loglik(y: &Tensor, x: &Tensor, sigma2: f64) -> crate::Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(crate::Error::InvalidArgument(format!(
            "noise variance must be positive, got {sigma2}"
        )));
    }
    if y.shape() != x.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "gaussian_loglik",
            lhs: y.shape().to_vec(),
            rhs: x.shape().to_vec(),
        }
        .into());
    }
    let ss: f64 = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let n = y.len() as f64;
    Ok(-0.5 * n * (2.0 * PI * sigma2).ln() - 0.5 * ss / sigma2)
}

/// Tape form of [`gaussian_loglik`] from a summed squared residual over
/// `n` scalars and `log sigma`.
pub fn gaussian_loglik_from_ss<'t>(
    sum_sq: Var<'t>,
    n: usize,
    log_sigma: Var<'t>,
) -> DiffResult<Var<'t>> {
    let n = n as f64;
    let precision = log_sigma.scale(-2.0)?.exp()?;
    let fit = sum_sq.mul(precision)?.scale(-0.5)?;
    let norm = log_sigma.scale(-n)?.shift(-0.5 * n * (2.0 * PI).ln())?;
    fit.add(norm)
}
