//! Integrator-network layers (Störmer-Verlet, velocity Verlet, SO(2)),
//! their unrolled networks, and the baseline dynamics models.

mod checkpoint;
mod dynamics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_FORMAT,
};
pub use dynamics::{BoundDynamics, Dynamics, LearnedMap, So2Params, VinParams, SIN_CLAMP};

use crate::diff::Var;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    VinSv,
    VinVv,
    VinSo2,
    NnDeriv,
    Hnn,
    ResRnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        Self::VinSv,
        Self::VinVv,
        Self::VinSo2,
        Self::NnDeriv,
        Self::Hnn,
        Self::ResRnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::VinSv => "vin_sv",
            Self::VinVv => "vin_vv",
            Self::VinSo2 => "vin_so2",
            Self::NnDeriv => "nn",
            Self::Hnn => "hnn",
            Self::ResRnn => "resrnn",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::VinSv => "VIN-SV",
            Self::VinVv => "VIN-VV",
            Self::VinSo2 => "VIN-SO(2)",
            Self::NnDeriv => "NN",
            Self::Hnn => "HNN",
            Self::ResRnn => "ResRNN",
        }
    }

    /// Models that map a state to the next state (as opposed to models of
    /// the continuous vector field).
    pub fn is_discrete(self) -> bool {
        !matches!(self, Self::NnDeriv | Self::Hnn)
    }

    pub fn is_vin(self) -> bool {
        matches!(self, Self::VinSv | Self::VinVv | Self::VinSo2)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s
            .to_ascii_lowercase()
            .replace(['(', ')'], "")
            .replace('-', "_");
        let norm = norm.as_str();
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "nn_deriv" && *k == Self::NnDeriv))
            .ok_or_else(|| {
                let valid: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
                format!(
                    "unknown model kind `{s}`; valid kinds: {}",
                    valid.join(", ")
                )
            })
    }
}

/// Internal state of a model; every component is a `(batch, n_q)` matrix
/// (`(batch, 2 n_q)` for `FreeLatent`).
#[derive(Debug, Clone, Copy)]
pub enum PhaseState<'t, T: Scalar = f64> {
    PositionPair {
        prev: Var<'t, T>,
        cur: Var<'t, T>,
    },
    PositionMomentum {
        q: Var<'t, T>,
        p: Var<'t, T>,
    },
    AngleIncrement {
        theta: Var<'t, T>,
        sin_delta: Var<'t, T>,
    },
    FreeLatent(Var<'t, T>),
}

impl<'t, T: Scalar> PhaseState<'t, T> {
    /// The configuration (position) component.
    pub fn position(&self) -> crate::diff::Result<Var<'t, T>> {
        match *self {
            Self::PositionPair { cur, .. } => Ok(cur),
            Self::PositionMomentum { q, .. } => Ok(q),
            Self::AngleIncrement { theta, .. } => Ok(theta),
            Self::FreeLatent(x) => {
                let n = x.dims2().1 / 2;
                x.cols(0, n)
            }
        }
    }

    /// Both components side by side, `(batch, 2 n_q)`.
    pub fn flat(&self) -> crate::diff::Result<Var<'t, T>> {
        let (a, b) = match *self {
            Self::PositionPair { prev, cur } => (prev, cur),
            Self::PositionMomentum { q, p } => (q, p),
            Self::AngleIncrement { theta, sin_delta } => (theta, sin_delta),
            Self::FreeLatent(x) => return Ok(x),
        };
        a.tape().concat(&[a, b], 1)
    }

    /// Rebuilds a state of the same variant from its flat form.
    pub fn from_flat(kind: ModelKind, x: Var<'t, T>) -> crate::diff::Result<Self> {
        if kind == ModelKind::ResRnn {
            return Ok(Self::FreeLatent(x));
        }
        let n = x.dims2().1 / 2;
        let (a, b) = (x.cols(0, n)?, x.cols(n, n)?);
        Ok(match kind {
            ModelKind::VinSv => Self::PositionPair { prev: a, cur: b },
            ModelKind::VinSo2 => Self::AngleIncrement {
                theta: a,
                sin_delta: b,
            },
            _ => Self::PositionMomentum { q: a, p: b },
        })
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Self::PositionPair { .. } => "position_pair",
            Self::PositionMomentum { .. } => "position_momentum",
            Self::AngleIncrement { .. } => "angle_increment",
            Self::FreeLatent(_) => "free_latent",
        }
    }
}
