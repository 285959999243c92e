use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::model::{stack_windows, PixelKind, PixelModel, LATENT_DIM, LATENT_H};
use super::PixelHyper;
use crate::diff::{Adam, DiffError, Tape, Tensor, Trainable};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, CheckpointHeader};
use crate::physics::{PixelDataset, SystemKind, WINDOW};
use crate::rng::{substream, INIT, TRAINING};

#[derive(Debug, Clone)]
pub struct PixelFit {
    pub model: PixelModel,
    pub hyper: PixelHyper,
    pub system: SystemKind,
    /// Mean per-window ELBO of every epoch.
    pub elbo_log: Vec<f64>,
    pub best_epoch: usize,
    pub best_elbo: f64,
}

fn eps_matrix<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(&[rows, LATENT_DIM], |_| rng.sample(StandardNormal))
}

/// One-sample bound on the windows of `frames` starting at `starts`,
/// summed over windows.
pub fn elbo<R: Rng + ?Sized>(
    model: &PixelModel,
    frames: &Tensor,
    starts: &[usize],
    rng: &mut R,
) -> Result<f64> {
    let len = if model.is_sequence() { WINDOW } else { 1 };
    let y = stack_windows(frames, starts, len)?;
    let tape = Tape::new();
    let b = model.bind(&tape, false)?;
    let eps = tape.constant(eps_matrix(starts.len(), rng));
    let terms = b.terms(tape.constant(y), len, eps)?;
    Ok(terms.elbo()?.item())
}

fn items(ds: &PixelDataset, kind: PixelKind) -> Vec<usize> {
    match kind {
        PixelKind::Dynamics(_) => ds.windows.iter().map(|w| w.0).collect(),
        PixelKind::Vae2d => (0..ds.n_frames()).collect(),
    }
}

fn divergence(kind: PixelKind, epoch: usize, e: Error) -> Error {
    match e {
        Error::Diff(DiffError::NonFinite { op }) => Error::Divergence(format!(
            "{kind}: non-finite value in `{op}` in epoch {epoch}"
        )),
        other => other,
    }
}

/// Adam on minibatches of windows (single frames for the plain VAE)
/// until the epoch ELBO stops improving; returns the best epoch's
/// parameters.
pub fn train_vae(ds: &PixelDataset, kind: PixelKind, hyper: &PixelHyper) -> Result<PixelFit> {
    let starts = items(ds, kind);
    if starts.is_empty() {
        return Err(Error::InvalidArgument("no training windows".into()));
    }
    let len = if matches!(kind, PixelKind::Vae2d) { 1 } else { WINDOW };
    let mut init_rng = substream(hyper.seed, INIT);
    let mut rng = substream(hyper.seed, TRAINING);
    let mut model = PixelModel::new(kind, hyper, &mut init_rng);
    let mut adam = Adam::new(hyper.lr);
    let batch = hyper.batch_windows.max(1);
    let mut order = starts.clone();
    let mut log = Vec::new();
    let (mut best, mut best_epoch, mut best_params) = (f64::NEG_INFINITY, 0, model.snapshot());
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let y = stack_windows(&ds.frames, chunk, len)?;
            let eps = eps_matrix(chunk.len(), &mut rng);
            let tape = Tape::new();
            let step = || -> Result<f64> {
                let b = model.bind(&tape, true)?;
                let e = b.terms(tape.constant(y), len, tape.constant(eps))?.elbo()?;
                let value = e.item();
                let loss = e.scale(-1.0 / chunk.len() as f64)?;
                let grads = tape.backward(loss)?;
                adam.step(&mut model, &grads)?;
                Ok(value)
            };
            let value = step().map_err(|e| divergence(kind, epoch, e))?;
            if !value.is_finite() {
                return Err(Error::Divergence(format!("{kind}: ELBO {value} in epoch {epoch}")));
            }
            total += value;
        }
        let mean = total / starts.len() as f64;
        log.push(mean);
        if mean > best {
            (best, best_epoch, best_params) = (mean, epoch, model.snapshot());
        } else if epoch - best_epoch >= hyper.patience {
            break;
        }
    }
    model.restore(&best_params)?;
    Ok(PixelFit {
        model,
        hyper: hyper.clone(),
        system: ds.system.kind,
        elbo_log: log,
        best_epoch,
        best_elbo: best,
    })
}

pub fn save_pixel_model(dir: &Path, fit: &PixelFit) -> Result<()> {
    let mut header = CheckpointHeader::new(
        "pixel",
        fit.model.kind.name(),
        &fit.system.to_string(),
        1,
        fit.hyper.width,
        LATENT_H,
        fit.hyper.fixed_mass,
    );
    header.extra = serde_json::json!({
        "hyper": fit.hyper,
        "best_epoch": fit.best_epoch,
        "best_elbo": fit.best_elbo,
        "epochs_run": fit.elbo_log.len(),
    });
    save_checkpoint(dir, &header, &fit.model.snapshot())
}

/// Rebuilds a pixel model from a checkpoint written by
/// [`save_pixel_model`].
pub fn load_pixel_model(dir: &Path) -> Result<(CheckpointHeader, PixelModel, PixelHyper)> {
    let (header, params) = load_checkpoint(dir)?;
    let manifest = dir.join("manifest.json");
    if header.family != "pixel" {
        return Err(Error::format(
            &manifest,
            format!("expected a pixel checkpoint, found family `{}`", header.family),
        ));
    }
    let kind: PixelKind = header.kind.parse().map_err(|e: String| Error::format(&manifest, e))?;
    let hyper: PixelHyper = serde_json::from_value(header.extra["hyper"].clone())
        .map_err(|e| Error::format(&manifest, e.to_string()))?;
    let mut model = PixelModel::new(kind, &hyper, &mut substream(hyper.seed, INIT));
    model.restore(&params)?;
    Ok((header, model, hyper))
}
