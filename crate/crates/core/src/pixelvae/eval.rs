use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{stack_windows, PixelKind, PixelModel, LATENT_DIM};
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{ModelKind, PhaseState};
use crate::physics::{FRAME_PIXELS, WINDOW};

/// Frames per second of every pixel sequence.
pub const FRAME_RATE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelForecast {
    /// `(n, 784)` decoder means.
    pub frames: Tensor,
    /// `(n, 784)` decoder logits.
    pub logits: Tensor,
    /// `(n, 2)` flattened latent states, starting at the posterior mean.
    pub latent: Tensor,
    pub clamp_events: usize,
}

impl PixelForecast {
    /// `max_t |x_t| / |x_1|` over the latent path.
    pub fn norm_ratio(&self) -> f64 {
        let norm = |i: usize| self.latent.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        let n0 = norm(0);
        let max = (0..self.latent.dims2().0).map(norm).fold(0.0, f64::max);
        max / n0
    }
}

fn n_frames(duration: f64) -> Result<usize> {
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::InvalidArgument(format!("bad forecast duration {duration}")));
    }
    Ok(((duration * FRAME_RATE).round() as usize).max(1))
}

fn context_len(model: &PixelModel) -> usize {
    if model.is_sequence() {
        WINDOW
    } else {
        1
    }
}

/// Infers the initial state from the first frames of `context` (10 for
/// sequence models, 1 for the plain VAE), sets it to the posterior mean
/// and unrolls for `duration` seconds at 10 frames per second.
pub fn forecast_pixels(model: &PixelModel, context: &Tensor, duration: f64) -> Result<PixelForecast> {
    let n = n_frames(duration)?;
    let len = context_len(model);
    let (rows, cols) = context.dims2();
    if rows < len || cols != FRAME_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "forecast needs {len} frames of {FRAME_PIXELS} pixels, got {rows}x{cols}"
        )));
    }
    if !model.is_sequence() && n > 1 {
        return Err(Error::InvalidArgument(format!(
            "{} has no dynamics and can only reconstruct",
            model.kind
        )));
    }
    let tape = Tape::new();
    let b = model.bind(&tape, false)?;
    let y = stack_windows(context, &[0], len)?;
    let (mean, _) = b.encode(tape.constant(y), len)?;
    let (path, logits) = b.rollout_logits(mean, n)?;
    let mut latent = Vec::with_capacity(n * LATENT_DIM);
    for s in &path {
        latent.extend_from_slice(s.flat()?.value_ref().data());
    }
    let logits = logits.value();
    if !logits.is_finite() {
        return Err(Error::Divergence(format!("{} pixel forecast left the finite range", model.kind)));
    }
    Ok(PixelForecast {
        frames: logits.map(|z| 1.0 / (1.0 + (-z).exp())),
        logits,
        latent: Tensor::matrix(n, LATENT_DIM, latent),
        clamp_events: b.dynamics().map_or(0, |d| d.clamp_events()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    /// Root mean squared per-pixel intensity error of the decoder means.
    pub rmse: f64,
    /// Summed Bernoulli log-likelihood of the true frames.
    pub loglik: f64,
    pub frames: usize,
}

/// Bernoulli `y z - softplus(z)` summed over all entries.
fn bernoulli_loglik(logits: &[f64], y: &[f64]) -> f64 {
    logits
        .iter()
        .zip(y)
        .map(|(&z, &y)| y * z - (z.max(0.0) + (-z.abs()).exp().ln_1p()))
        .sum()
}

/// Scores predicted means and logits against the first rows of `truth`.
pub fn score_frames(means: &Tensor, logits: &Tensor, truth: &Tensor) -> Result<PixelMetrics> {
    let (n, cols) = means.dims2();
    if truth.dims2().0 < n || truth.dims2().1 != cols || logits.shape() != means.shape() {
        return Err(Error::InvalidArgument(format!(
            "prediction grid {:?} does not fit truth {:?}",
            means.shape(),
            truth.shape()
        )));
    }
    let y = &truth.data()[..n * cols];
    let sq: f64 = means.data().iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(PixelMetrics {
        rmse: (sq / (n * cols) as f64).sqrt(),
        loglik: bernoulli_loglik(logits.data(), y),
        frames: n,
    })
}

/// Forecasts `horizon` seconds from the first frames of `truth` and scores
/// the prediction against the same frames of `truth`.
pub fn evaluate_pixels(model: &PixelModel, truth: &Tensor, horizon: f64) -> Result<PixelMetrics> {
    let need = n_frames(horizon)?;
    if truth.dims2().0 < need.max(context_len(model)) {
        return Err(Error::InvalidArgument(format!(
            "truth has {} frames, a {horizon} s forecast needs {need}",
            truth.dims2().0
        )));
    }
    let f = forecast_pixels(model, truth, horizon)?;
    score_frames(&f.frames, &f.logits, truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub t: usize,
    pub x1: f64,
    pub x2: f64,
    pub split: String,
}

/// Per-frame latent coordinates. Frame `t` is reached by encoding the
/// window starting at `min(t, N - 10)` and unrolling to `t`; the plain VAE
/// encodes each frame alone. Angle models export `(cos, sin)` of the
/// angle. Frames before `n_train` are labelled `train`.
pub fn embed_frames(model: &PixelModel, frames: &Tensor, n_train: usize) -> Result<Vec<EmbeddingRow>> {
    let n = frames.dims2().0;
    let len = context_len(model);
    if n < len {
        return Err(Error::InvalidArgument(format!("{n} frames cannot fill a window of {len}")));
    }
    let split = |t: usize| if t < n_train { "train" } else { "test" }.to_string();
    let tape = Tape::new();
    let b = model.bind(&tape, false)?;
    let mut rows = Vec::with_capacity(n);
    if !model.is_sequence() {
        let (mean, _) = b.encode(tape.constant(frames.clone()), 1)?;
        let m = mean.value();
        for t in 0..n {
            rows.push(EmbeddingRow { t, x1: m.at(t, 0), x2: m.at(t, 1), split: split(t) });
        }
        return Ok(rows);
    }
    let starts: Vec<usize> = (0..=n - len).collect();
    let (mean, _) = b.encode(tape.constant(stack_windows(frames, &starts, len)?), len)?;
    let last = *starts.last().expect("at least one window");
    let mean = mean.value();
    for t in 0..n {
        let s = t.min(last);
        let x = tape.constant(Tensor::matrix(1, LATENT_DIM, mean.row(s).to_vec()));
        let path = b.dynamics().expect("sequence model").unroll(b.state(x)?, t - s + 1)?;
        let state = path.last().expect("non-empty path");
        let (x1, x2) = match (model.kind, state) {
            (PixelKind::Dynamics(ModelKind::VinSo2), PhaseState::AngleIncrement { theta, .. }) => {
                let th = theta.item();
                (th.cos(), th.sin())
            }
            _ => {
                let v = state.flat()?.value();
                (v.data()[0], v.data()[1])
            }
        };
        rows.push(EmbeddingRow { t, x1, x2, split: split(t) });
    }
    Ok(rows)
}

/// CSV with columns `t,x1,x2,split`.
pub fn write_embedding_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut out = String::from("t,x1,x2,split\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.t, r.x1, r.x2, r.split).expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
