use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BoundGru, BoundLinear, Gru, Linear};
use super::{kl_initial_var, PixelHyper};
use crate::diff::{join, DiffError, Result as DiffResult, Tape, Tensor, Trainable, Var};
use crate::error::{Error, Result};
use crate::models::{BoundDynamics, Dynamics, ModelKind, PhaseState};
use crate::physics::FRAME_PIXELS;

/// Latent step size of the dynamics networks.
pub const LATENT_H: f64 = 1.0;
/// Fixed observation variance of the Gaussian likelihood switch.
pub const GAUSSIAN_VARIANCE: f64 = 0.01;

/// A dynamics backbone, or the plain two-dimensional VAE without one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PixelKind {
    Dynamics(ModelKind),
    Vae2d,
}

impl PixelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dynamics(k) => k.name(),
            Self::Vae2d => "vae2d",
        }
    }
}

impl fmt::Display for PixelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PixelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("vae2d") || s.eq_ignore_ascii_case("vae-2d") {
            return Ok(Self::Vae2d);
        }
        let kind: ModelKind = s.parse()?;
        if kind.is_discrete() {
            Ok(Self::Dynamics(kind))
        } else {
            Err(format!(
                "`{s}` is a vector-field model and cannot drive a pixel model; valid kinds: vin_sv, vin_vv, vin_so2, resrnn, vae2d"
            ))
        }
    }
}

impl Serialize for PixelKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for PixelKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    #[default]
    Bernoulli,
    Gaussian,
}

/// Per-frame two-layer relu embedding, then (sequence models only) a
/// recurrent pass in reverse time, then a linear head to `(m, log s^2)`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub l1: Linear,
    pub l2: Linear,
    pub gru: Option<Gru>,
    pub head: Linear,
}

/// Two relu layers and a linear map to pixel logits.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub l1: Linear,
    pub l2: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct PixelModel {
    pub kind: PixelKind,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub dynamics: Option<Dynamics>,
    pub likelihood: Likelihood,
}

/// Dimension of the initial latent state; one position plus its
/// companion for every model, two free coordinates for the plain VAE.
pub const LATENT_DIM: usize = 2;

impl PixelModel {
    pub fn new<R: Rng + ?Sized>(kind: PixelKind, hyper: &PixelHyper, rng: &mut R) -> Self {
        let w = hyper.width;
        let sequence = matches!(kind, PixelKind::Dynamics(_));
        let head_in = if sequence { hyper.gru_hidden } else { w };
        let encoder = Encoder {
            l1: Linear::glorot(FRAME_PIXELS, w, rng),
            l2: Linear::glorot(w, w, rng),
            gru: sequence.then(|| Gru::glorot(w, hyper.gru_hidden, rng)),
            head: Linear::glorot(head_in, 2 * LATENT_DIM, rng),
        };
        let dec_in = match kind {
            PixelKind::Dynamics(ModelKind::VinSo2) | PixelKind::Vae2d => 2,
            _ => 1,
        };
        let decoder = Decoder {
            l1: Linear::glorot(dec_in, w, rng),
            l2: Linear::glorot(w, w, rng),
            out: Linear::glorot(w, FRAME_PIXELS, rng),
        };
        let dynamics = match kind {
            PixelKind::Dynamics(k) => {
                Some(
                    Dynamics::new(k, 1, w, LATENT_H, rng)
                        .with_fixed_mass(hyper.fixed_mass)
                        .with_zero_output(),
                )
            }
            PixelKind::Vae2d => None,
        };
        Self {
            kind,
            encoder,
            decoder,
            dynamics,
            likelihood: hyper.likelihood,
        }
    }

    pub fn is_sequence(&self) -> bool {
        self.dynamics.is_some()
    }

    pub fn bind<'t>(&self, tape: &'t Tape, slots: bool) -> DiffResult<BoundPixel<'t>> {
        let p = |name: &str| slots.then(|| name.to_string());
        let lin = |l: &Linear, name: &str| l.bind(tape, p(name).as_deref());
        Ok(BoundPixel {
            kind: self.kind,
            likelihood: self.likelihood,
            e1: lin(&self.encoder.l1, "enc.l1")?,
            e2: lin(&self.encoder.l2, "enc.l2")?,
            gru: match &self.encoder.gru {
                Some(g) => Some(g.bind(tape, p("enc.gru").as_deref())?),
                None => None,
            },
            head: lin(&self.encoder.head, "enc.head")?,
            d1: lin(&self.decoder.l1, "dec.l1")?,
            d2: lin(&self.decoder.l2, "dec.l2")?,
            dout: lin(&self.decoder.out, "dec.out")?,
            dynamics: match &self.dynamics {
                Some(d) => Some(d.bind(tape, p("dyn").as_deref())?),
                None => None,
            },
            tape,
        })
    }
}

impl Trainable<f64> for PixelModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        let e = join(prefix, "enc");
        self.encoder.l1.visit(&join(&e, "l1"), f);
        self.encoder.l2.visit(&join(&e, "l2"), f);
        if let Some(g) = &self.encoder.gru {
            g.visit(&join(&e, "gru"), f);
        }
        self.encoder.head.visit(&join(&e, "head"), f);
        let d = join(prefix, "dec");
        self.decoder.l1.visit(&join(&d, "l1"), f);
        self.decoder.l2.visit(&join(&d, "l2"), f);
        self.decoder.out.visit(&join(&d, "out"), f);
        if let Some(dy) = &self.dynamics {
            dy.visit(&join(prefix, "dyn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let e = join(prefix, "enc");
        self.encoder.l1.visit_mut(&join(&e, "l1"), f);
        self.encoder.l2.visit_mut(&join(&e, "l2"), f);
        if let Some(g) = &mut self.encoder.gru {
            g.visit_mut(&join(&e, "gru"), f);
        }
        self.encoder.head.visit_mut(&join(&e, "head"), f);
        let d = join(prefix, "dec");
        self.decoder.l1.visit_mut(&join(&d, "l1"), f);
        self.decoder.l2.visit_mut(&join(&d, "l2"), f);
        self.decoder.out.visit_mut(&join(&d, "out"), f);
        if let Some(dy) = &mut self.dynamics {
            dy.visit_mut(&join(prefix, "dyn"), f);
        }
    }
}

/// Pieces of the bound for one batch of windows.
pub struct ElboTerms<'t> {
    /// `(B, 1)` reconstruction log-likelihood per window.
    pub rec: Var<'t>,
    /// `(B, 1)` KL of each window's initial-state posterior.
    pub kl: Var<'t>,
    pub mean: Var<'t>,
    pub logvar: Var<'t>,
    pub x1: Var<'t>,
}

impl<'t> ElboTerms<'t> {
    /// Summed bound over the batch.
    pub fn elbo(&self) -> DiffResult<Var<'t>> {
        self.rec.sub(self.kl)?.sum()
    }
}

pub struct BoundPixel<'t> {
    kind: PixelKind,
    likelihood: Likelihood,
    e1: BoundLinear<'t>,
    e2: BoundLinear<'t>,
    gru: Option<BoundGru<'t>>,
    head: BoundLinear<'t>,
    d1: BoundLinear<'t>,
    d2: BoundLinear<'t>,
    dout: BoundLinear<'t>,
    dynamics: Option<BoundDynamics<'t>>,
    tape: &'t Tape,
}

impl<'t> BoundPixel<'t> {
    pub fn dynamics(&self) -> Option<&BoundDynamics<'t>> {
        self.dynamics.as_ref()
    }

    fn embed(&self, frames: Var<'t>) -> DiffResult<Var<'t>> {
        self.e2.apply(self.e1.apply(frames)?.relu()?)?.relu()
    }

    /// Posterior moments `(m, log s^2)`, each `(B, LATENT_DIM)`.
    ///
    /// `frames` is `(len * B, 784)` with row `t * B + b` holding frame `t`
    /// of window `b`. The plain VAE treats every row as its own item.
    pub fn encode(&self, frames: Var<'t>, len: usize) -> DiffResult<(Var<'t>, Var<'t>)> {
        let (rows, cols) = frames.dims2();
        if cols != FRAME_PIXELS || len == 0 || rows % len != 0 {
            return Err(DiffError::ShapeMismatch {
                op: "encode",
                lhs: vec![rows, cols],
                rhs: vec![len, FRAME_PIXELS],
            });
        }
        let emb = self.embed(frames)?;
        let summary = match &self.gru {
            Some(gru) => {
                let b = rows / len;
                let steps: Vec<Var<'t>> = (0..len)
                    .rev()
                    .map(|t| emb.rows(t * b, b))
                    .collect::<DiffResult<_>>()?;
                gru.run(&steps)?
            }
            None => emb,
        };
        let out = self.head.apply(summary)?;
        Ok((out.cols(0, LATENT_DIM)?, out.cols(LATENT_DIM, LATENT_DIM)?))
    }

    /// Latent state for a flat `(B, 2)` sample; the SO(2) increment
    /// coordinate passes through `tanh` to stay a valid sine.
    pub fn state(&self, x: Var<'t>) -> DiffResult<PhaseState<'t>> {
        let PixelKind::Dynamics(kind) = self.kind else {
            return Ok(PhaseState::FreeLatent(x));
        };
        if kind == ModelKind::VinSo2 {
            let theta = x.cols(0, 1)?;
            let s = x.cols(1, 1)?.tanh()?;
            return Ok(PhaseState::AngleIncrement { theta, sin_delta: s });
        }
        PhaseState::from_flat(kind, x)
    }

    /// What the decoder sees of a state: the position, as `(cos, sin)`
    /// for the angle model and both coordinates for the plain VAE.
    pub fn decoder_input(&self, s: &PhaseState<'t>) -> DiffResult<Var<'t>> {
        match (self.kind, s) {
            (PixelKind::Vae2d, PhaseState::FreeLatent(x)) => Ok(*x),
            (_, PhaseState::AngleIncrement { theta, .. }) => {
                self.tape.concat(&[theta.cos()?, theta.sin()?], 1)
            }
            _ => s.position(),
        }
    }

    pub fn decode(&self, input: Var<'t>) -> DiffResult<Var<'t>> {
        self.dout.apply(self.d2.apply(self.d1.apply(input)?.relu()?)?.relu()?)
    }

    /// `(B*len, 784)` logits, time-major, from initial states `x1`.
    pub fn rollout_logits(&self, x1: Var<'t>, len: usize) -> DiffResult<(Vec<PhaseState<'t>>, Var<'t>)> {
        let s0 = self.state(x1)?;
        let path = match &self.dynamics {
            Some(d) => d.unroll(s0, len)?,
            None => vec![s0; len.min(1)],
        };
        let inputs: Vec<Var<'t>> = path
            .iter()
            .map(|s| self.decoder_input(s))
            .collect::<DiffResult<_>>()?;
        let stacked = if inputs.len() == 1 { inputs[0] } else { self.tape.concat(&inputs, 0)? };
        Ok((path, self.decode(stacked)?))
    }

    /// Per-row log-likelihood `(rows, 1)` of `y` under `logits`.
    pub fn frame_loglik(&self, logits: Var<'t>, y: Var<'t>) -> DiffResult<Var<'t>> {
        match self.likelihood {
            Likelihood::Bernoulli => y.mul(logits)?.sub(logits.softplus()?)?.sum_cols(),
            Likelihood::Gaussian => {
                let c = -0.5 * (2.0 * std::f64::consts::PI * GAUSSIAN_VARIANCE).ln();
                let d = logits.sigmoid()?.sub(y)?.square()?.sum_cols()?;
                d.scale(-0.5 / GAUSSIAN_VARIANCE)?.shift(c * FRAME_PIXELS as f64)
            }
        }
    }

    /// Bound terms for `(len * B, 784)` time-major frames, drawing the
    /// initial state with the given standard-normal `eps` `(B, 2)`.
    pub fn terms(&self, frames: Var<'t>, len: usize, eps: Var<'t>) -> DiffResult<ElboTerms<'t>> {
        let (mean, logvar) = self.encode(frames, len)?;
        let x1 = mean.add(logvar.scale(0.5)?.exp()?.mul(eps)?)?;
        let steps = if self.dynamics.is_some() { len } else { 1 };
        let (_, logits) = self.rollout_logits(x1, steps)?;
        let per_row = self.frame_loglik(logits, frames)?;
        let b = mean.dims2().0;
        // fold time-major rows back onto their windows
        let mut rec = per_row.rows(0, b)?;
        for t in 1..steps {
            rec = rec.add(per_row.rows(t * b, b)?)?;
        }
        let kl = kl_initial_var(mean, logvar)?;
        Ok(ElboTerms { rec, kl, mean, logvar, x1 })
    }
}

/// Time-major `(len * B, 784)` rows for windows starting at `starts`.
pub fn stack_windows(frames: &Tensor, starts: &[usize], len: usize) -> Result<Tensor> {
    let n = frames.dims2().0;
    if starts.iter().any(|&s| s + len > n) {
        return Err(Error::InvalidArgument(format!(
            "window of {len} frames runs past {n} frames"
        )));
    }
    let mut data = Vec::with_capacity(len * starts.len() * FRAME_PIXELS);
    for t in 0..len {
        for &s in starts {
            let r = s + t;
            data.extend_from_slice(&frames.data()[r * FRAME_PIXELS..(r + 1) * FRAME_PIXELS]);
        }
    }
    Ok(Tensor::matrix(len * starts.len(), FRAME_PIXELS, data))
}
