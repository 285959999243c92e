//! Variational autoencoder over 28x28 frame sequences with an integrator
//! network (or residual recurrent network) as latent dynamics, plus a
//! dynamics-free 2-D VAE.

mod eval;
mod layers;
mod model;
mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use eval::{
    embed_frames, evaluate_pixels, forecast_pixels, score_frames, write_embedding_csv,
    EmbeddingRow, PixelForecast, PixelMetrics, FRAME_RATE,
};
pub use layers::{BoundGru, BoundLinear, Gru, Linear};
pub use model::{
    stack_windows, BoundPixel, Decoder, ElboTerms, Encoder, Likelihood, PixelKind, PixelModel,
    GAUSSIAN_VARIANCE, LATENT_DIM, LATENT_H,
};
pub use train::{elbo, load_pixel_model, save_pixel_model, train_vae, PixelFit};

use crate::diff::{Result as DiffResult, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PixelHyper {
    /// Width of the encoder, decoder and dynamics hidden layers.
    pub width: usize,
    pub gru_hidden: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a better epoch ELBO.
    pub patience: usize,
    /// Windows per gradient step.
    pub batch_windows: usize,
    pub seed: u64,
    pub fixed_mass: bool,
    pub likelihood: Likelihood,
}

impl Default for PixelHyper {
    fn default() -> Self {
        Self {
            width: 1000,
            gru_hidden: 50,
            lr: 3e-4,
            max_epochs: 6000,
            patience: 200,
            batch_windows: 17,
            seed: 0,
            fixed_mass: false,
            likelihood: Likelihood::Bernoulli,
        }
    }
}

/// `KL(N(m, diag s2) || N(0, I))`.
pub fn kl_initial(m: &[f64], s2: &[f64]) -> Result<f64> {
    if m.len() != s2.len() {
        return Err(Error::InvalidArgument("mean and variance lengths differ".into()));
    }
    if let Some(bad) = s2.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidArgument(format!("variance must be positive, got {bad}")));
    }
    Ok(0.5 * m.iter().zip(s2).map(|(m, s)| s + m * m - 1.0 - s.ln()).sum::<f64>())
}

/// Row-wise KL `(B, 1)` from `(B, d)` means and log-variances.
pub fn kl_initial_var<'t>(mean: Var<'t>, logvar: Var<'t>) -> DiffResult<Var<'t>> {
    let d = mean.dims2().1 as f64;
    logvar
        .exp()?
        .add(mean.square()?)?
        .sub(logvar)?
        .sum_cols()?
        .shift(-d)?
        .scale(0.5)
}

/// Reparameterized draw `m + s * eps`.
pub fn sample_initial<R: Rng + ?Sized>(m: &[f64], s2: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if m.len() != s2.len() || s2.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("bad posterior moments".into()));
    }
    Ok(m
        .iter()
        .zip(s2)
        .map(|(m, s)| m + s.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect())
}
