use std::cell::Cell;

use rand::Rng;

use super::{ModelKind, PhaseState};
use crate::diff::{join, Activation, DiffError, Mlp1, Result, Tape, Tensor, Trainable, Var};
use crate::scalar::Scalar;

/// Bound on `|sin dtheta|` after an SO(2) update.
pub const SIN_CLAMP: f64 = 1.0 - 1e-7;

/// Learned potential plus diagonal log-mass, for the SV and VV layers.
#[derive(Debug, Clone)]
pub struct VinParams<T: Scalar = f64> {
    /// Scalar-output potential `U(q)`.
    pub potential: Mlp1<T>,
    /// `M = diag(exp(mass_log_diag))`.
    pub mass_log_diag: Tensor<T>,
    pub h: T,
    /// A fixed mass is put on the tape as a constant and never updated.
    pub fixed_mass: bool,
}

/// Learned increment map `r(theta) = sin(net(theta))` for the SO(2) layer.
///
/// The increment is scaled by `exp(-mass_log)`, a scalar inverse inertia.
#[derive(Debug, Clone)]
pub struct So2Params<T: Scalar = f64> {
    pub force: Mlp1<T>,
    pub mass_log: Tensor<T>,
    pub h: T,
    pub fixed_mass: bool,
}

/// Parameters of any dynamics model.
#[derive(Debug, Clone)]
pub enum Dynamics<T: Scalar = f64> {
    Sv(VinParams<T>),
    Vv(VinParams<T>),
    So2(So2Params<T>),
    /// `x' = x + f(x)`.
    ResRnn {
        net: Mlp1<T>,
    },
    /// `(dq/dt, dp/dt) = net(q, p)`; `p = inertia * dq/dt`.
    NnDeriv {
        net: Mlp1<T>,
        inertia: T,
    },
    /// `(dH/dp, -dH/dq)` of a scalar net `H(q, p)`.
    Hnn {
        net: Mlp1<T>,
        inertia: T,
    },
}

impl<T: Scalar> Dynamics<T> {
    /// Glorot-initialized model with identity mass and unit inertia.
    pub fn new<R: Rng + ?Sized>(
        kind: ModelKind,
        n_q: usize,
        hidden: usize,
        h: T,
        rng: &mut R,
    ) -> Self {
        let vin = |rng: &mut R| VinParams {
            potential: Mlp1::glorot(n_q, hidden, 1, Activation::Tanh, rng),
            mass_log_diag: Tensor::zeros(&[n_q]),
            h,
            fixed_mass: false,
        };
        match kind {
            ModelKind::VinSv => Self::Sv(vin(rng)),
            ModelKind::VinVv => Self::Vv(vin(rng)),
            ModelKind::VinSo2 => Self::So2(So2Params {
                force: Mlp1::glorot(n_q, hidden, n_q, Activation::Tanh, rng),
                mass_log: Tensor::zeros(&[1]),
                h,
                fixed_mass: false,
            }),
            ModelKind::ResRnn => Self::ResRnn {
                net: Mlp1::glorot(2 * n_q, hidden, 2 * n_q, Activation::Tanh, rng),
            },
            ModelKind::NnDeriv => Self::NnDeriv {
                net: Mlp1::glorot(2 * n_q, hidden, 2 * n_q, Activation::Tanh, rng),
                inertia: T::one(),
            },
            ModelKind::Hnn => Self::Hnn {
                net: Mlp1::glorot(2 * n_q, hidden, 1, Activation::Tanh, rng),
                inertia: T::one(),
            },
        }
    }

    pub fn with_fixed_mass(mut self, fixed: bool) -> Self {
        match &mut self {
            Self::Sv(p) | Self::Vv(p) => p.fixed_mass = fixed,
            Self::So2(p) => p.fixed_mass = fixed,
            _ => {}
        }
        self
    }

    /// Sets the `p = inertia * dq/dt` convention of the vector-field models.
    pub fn with_inertia(mut self, value: T) -> Self {
        if let Self::NnDeriv { inertia, .. } | Self::Hnn { inertia, .. } = &mut self {
            *inertia = value;
        }
        self
    }

    /// Zeroes the output layer of the network, so the model starts as free
    /// motion (identity for the ResRNN). Pixel models use this: with a unit
    /// latent step a Glorot-scale force saturates the SO(2) clamp at once.
    pub fn with_zero_output(mut self) -> Self {
        let net = match &mut self {
            Self::Sv(p) | Self::Vv(p) => &mut p.potential,
            Self::So2(p) => &mut p.force,
            Self::ResRnn { net } | Self::NnDeriv { net, .. } | Self::Hnn { net, .. } => net,
        };
        net.w2 = Tensor::zeros(net.w2.shape());
        net.b2 = Tensor::zeros(net.b2.shape());
        self
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Sv(_) => ModelKind::VinSv,
            Self::Vv(_) => ModelKind::VinVv,
            Self::So2(_) => ModelKind::VinSo2,
            Self::ResRnn { .. } => ModelKind::ResRnn,
            Self::NnDeriv { .. } => ModelKind::NnDeriv,
            Self::Hnn { .. } => ModelKind::Hnn,
        }
    }

    pub fn net(&self) -> &Mlp1<T> {
        match self {
            Self::Sv(p) | Self::Vv(p) => &p.potential,
            Self::So2(p) => &p.force,
            Self::ResRnn { net } | Self::NnDeriv { net, .. } | Self::Hnn { net, .. } => net,
        }
    }

    pub fn net_mut(&mut self) -> &mut Mlp1<T> {
        match self {
            Self::Sv(p) | Self::Vv(p) => &mut p.potential,
            Self::So2(p) => &mut p.force,
            Self::ResRnn { net } | Self::NnDeriv { net, .. } | Self::Hnn { net, .. } => net,
        }
    }

    pub fn n_q(&self) -> usize {
        match self {
            Self::Sv(p) | Self::Vv(p) => p.potential.n_in(),
            Self::So2(p) => p.force.n_in(),
            Self::ResRnn { net } | Self::NnDeriv { net, .. } | Self::Hnn { net, .. } => {
                net.n_in() / 2
            }
        }
    }

    pub fn h(&self) -> Option<T> {
        match self {
            Self::Sv(p) | Self::Vv(p) => Some(p.h),
            Self::So2(p) => Some(p.h),
            _ => None,
        }
    }

    pub fn fixed_mass(&self) -> bool {
        match self {
            Self::Sv(p) | Self::Vv(p) => p.fixed_mass,
            Self::So2(p) => p.fixed_mass,
            _ => false,
        }
    }

    pub fn inertia(&self) -> T {
        match self {
            Self::NnDeriv { inertia, .. } | Self::Hnn { inertia, .. } => *inertia,
            _ => T::one(),
        }
    }

    fn mass_log(&self) -> Option<&Tensor<T>> {
        match self {
            Self::Sv(p) | Self::Vv(p) => Some(&p.mass_log_diag),
            Self::So2(p) => Some(&p.mass_log),
            _ => None,
        }
    }

    /// Puts the model on `tape`; with a prefix its weights become named
    /// slots (the mass only when it is not fixed).
    pub fn bind<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: Option<&str>,
    ) -> Result<BoundDynamics<'t, T>> {
        let net_prefix = prefix.map(|p| join(p, self.net_slot()));
        let net = self.net().bind(tape, net_prefix.as_deref())?;
        let mass_log = match (self.mass_log(), prefix) {
            (None, _) => None,
            (Some(m), Some(p)) if !self.fixed_mass() => Some(tape.param(&join(p, "mass_log"), m)?),
            (Some(m), _) => Some(tape.constant(m.clone())),
        };
        let n_q = self.n_q();
        let map: LearnedMap<'t, T> = match self {
            Self::Sv(_) | Self::Vv(_) | Self::Hnn { .. } => Box::new(move |x| net.input_grad(x)),
            Self::So2(_) => Box::new(move |x| net.value(x)?.sin()),
            Self::ResRnn { .. } | Self::NnDeriv { .. } => Box::new(move |x| net.value(x)),
        };
        let map: LearnedMap<'t, T> = if let Self::Hnn { .. } = self {
            // symplectic gradient of H
            Box::new(move |x| {
                let g = map(x)?;
                let (dq, dp) = (g.cols(0, n_q)?, g.cols(n_q, n_q)?);
                tape.concat(&[dp, dq.neg()?], 1)
            })
        } else {
            map
        };
        Ok(BoundDynamics::custom(
            self.kind(),
            self.h().unwrap_or(T::one()),
            mass_log,
            self.inertia(),
            map,
        ))
    }

    fn net_slot(&self) -> &'static str {
        match self {
            Self::Sv(_) | Self::Vv(_) => "potential",
            Self::So2(_) => "force",
            _ => "net",
        }
    }

    /// Tape-free vector field of the NN/HNN models on `(batch, 2 n_q)` rows.
    pub fn field_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Self::NnDeriv { net, .. } => net.eval(x),
            Self::Hnn { net, .. } => {
                let g = net.eval_input_grad(x)?;
                let (b, c) = g.dims2();
                let n = c / 2;
                let mut out = Vec::with_capacity(b * c);
                for row in g.data().chunks(c) {
                    out.extend_from_slice(&row[n..]);
                    out.extend(row[..n].iter().map(|v| -*v));
                }
                Ok(Tensor::matrix(b, c, out))
            }
            _ => Err(DiffError::Domain {
                op: "field_eval",
                detail: format!("{} is not a vector-field model", self.kind()),
            }),
        }
    }
}

impl<T: Scalar> Trainable<T> for Dynamics<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.net().visit(&join(prefix, self.net_slot()), f);
        if let Some(m) = self.mass_log() {
            f(&join(prefix, "mass_log"), m);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let slot = join(prefix, self.net_slot());
        self.net_mut().visit_mut(&slot, f);
        match self {
            Self::Sv(p) | Self::Vv(p) => f(&join(prefix, "mass_log"), &mut p.mass_log_diag),
            Self::So2(p) => f(&join(prefix, "mass_log"), &mut p.mass_log),
            _ => {}
        }
    }
}

/// The model's learned function on a tape: the potential gradient for
/// SV/VV, `r(theta)` for SO(2), `f(x)` for ResRNN, the vector field for
/// NN/HNN.
pub type LearnedMap<'t, T> = Box<dyn Fn(Var<'t, T>) -> Result<Var<'t, T>> + 't>;

/// A dynamics model whose parameters live on one tape.
pub struct BoundDynamics<'t, T: Scalar = f64> {
    kind: ModelKind,
    h: T,
    mass_log: Option<Var<'t, T>>,
    inertia: T,
    map: LearnedMap<'t, T>,
    clamps: Cell<usize>,
}

impl<'t, T: Scalar> BoundDynamics<'t, T> {
    /// Wraps an arbitrary learned map; used with analytic forces in tests
    /// and oracles.
    pub fn custom(
        kind: ModelKind,
        h: T,
        mass_log: Option<Var<'t, T>>,
        inertia: T,
        map: LearnedMap<'t, T>,
    ) -> Self {
        Self {
            kind,
            h,
            mass_log,
            inertia,
            map,
            clamps: Cell::new(0),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn h(&self) -> T {
        self.h
    }

    /// SO(2) updates that hit the `sin dtheta` clamp so far.
    pub fn clamp_events(&self) -> usize {
        self.clamps.get()
    }

    pub fn learned(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        (self.map)(x)
    }

    fn inv_mass(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.mass_log {
            Some(m) => x.mul_row(m.neg()?.exp()?),
            None => Ok(x),
        }
    }

    fn times_mass(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.mass_log {
            Some(m) => x.mul_row(m.exp()?),
            None => Ok(x),
        }
    }

    fn mismatch(&self, state: &PhaseState<'t, T>) -> DiffError {
        DiffError::Domain {
            op: "step",
            detail: format!("{} cannot step a {} state", self.kind, state.variant_name()),
        }
    }

    /// One layer of the model's discrete network.
    pub fn step(&self, state: PhaseState<'t, T>) -> Result<PhaseState<'t, T>> {
        let h = self.h;
        match (self.kind, state) {
            (ModelKind::VinSv, PhaseState::PositionPair { prev, cur }) => {
                let acc = self.inv_mass(self.learned(cur)?)?.scale(h * h)?;
                let next = cur.scale(T::lit(2.0))?.sub(prev)?.sub(acc)?;
                Ok(PhaseState::PositionPair {
                    prev: cur,
                    cur: next,
                })
            }
            (ModelKind::VinVv, PhaseState::PositionMomentum { q, p }) => {
                let f0 = self.learned(q)?;
                let drift = p.scale(h)?.sub(f0.scale(h * h * T::lit(0.5))?)?;
                let q1 = q.add(self.inv_mass(drift)?)?;
                let f1 = self.learned(q1)?;
                let p1 = p.sub(f0.add(f1)?.scale(h * T::lit(0.5))?)?;
                Ok(PhaseState::PositionMomentum { q: q1, p: p1 })
            }
            (ModelKind::VinSo2, PhaseState::AngleIncrement { theta, sin_delta }) => {
                let r = self.inv_mass(self.learned(theta)?)?;
                let raw = sin_delta.add(r.scale(h * h)?)?;
                let c = T::lit(SIN_CLAMP);
                let hits = raw
                    .value_ref()
                    .data()
                    .iter()
                    .filter(|v| v.abs() > c)
                    .count();
                self.clamps.set(self.clamps.get() + hits);
                let s = raw.clamp(-c, c)?;
                Ok(PhaseState::AngleIncrement {
                    theta: theta.add(s.asin()?)?,
                    sin_delta: s,
                })
            }
            (ModelKind::ResRnn, PhaseState::FreeLatent(x)) => {
                Ok(PhaseState::FreeLatent(x.add(self.learned(x)?)?))
            }
            _ => Err(self.mismatch(&state)),
        }
    }

    /// `[initial, step(initial), ...]`, `len` entries, all on one tape.
    pub fn unroll(&self, initial: PhaseState<'t, T>, len: usize) -> Result<Vec<PhaseState<'t, T>>> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return Ok(out);
        }
        out.push(initial);
        for _ in 1..len {
            let next = self.step(*out.last().unwrap())?;
            out.push(next);
        }
        Ok(out)
    }

    /// Continuous vector field of an NN/HNN model on `(batch, 2 n_q)` rows
    /// of `(q, p)`.
    pub fn field(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self.kind {
            ModelKind::NnDeriv | ModelKind::Hnn => self.learned(x),
            _ => Err(DiffError::Domain {
                op: "field",
                detail: format!("{} is not a vector-field model", self.kind),
            }),
        }
    }

    /// Observed coordinates `(q, dq/dt)` of a state.
    pub fn to_observable(&self, state: PhaseState<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let inv_h = T::one() / self.h;
        match state {
            PhaseState::PositionPair { prev, cur } => Ok((cur, cur.sub(prev)?.scale(inv_h)?)),
            PhaseState::PositionMomentum { q, p } => match self.kind {
                ModelKind::NnDeriv | ModelKind::Hnn => Ok((q, p.scale(T::one() / self.inertia)?)),
                _ => Ok((q, self.inv_mass(p)?)),
            },
            PhaseState::AngleIncrement { theta, sin_delta } => {
                let c = T::lit(SIN_CLAMP);
                Ok((theta, sin_delta.clamp(-c, c)?.asin()?.scale(inv_h)?))
            }
            PhaseState::FreeLatent(x) => {
                let n = x.dims2().1 / 2;
                Ok((x.cols(0, n)?, x.cols(n, n)?))
            }
        }
    }

    /// The state this model associates with observed `(q, dq/dt)`.
    pub fn from_observable(&self, q: Var<'t, T>, qdot: Var<'t, T>) -> Result<PhaseState<'t, T>> {
        let h = self.h;
        Ok(match self.kind {
            ModelKind::VinSv => PhaseState::PositionPair {
                prev: q.sub(qdot.scale(h)?)?,
                cur: q,
            },
            ModelKind::VinVv => PhaseState::PositionMomentum {
                q,
                p: self.times_mass(qdot)?,
            },
            ModelKind::NnDeriv | ModelKind::Hnn => PhaseState::PositionMomentum {
                q,
                p: qdot.scale(self.inertia)?,
            },
            ModelKind::VinSo2 => {
                let c = T::lit(SIN_CLAMP);
                PhaseState::AngleIncrement {
                    theta: q,
                    sin_delta: qdot.scale(h)?.sin()?.clamp(-c, c)?,
                }
            }
            ModelKind::ResRnn => PhaseState::FreeLatent(q.tape().concat(&[q, qdot], 1)?),
        })
    }
}
