use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    MassSpring,
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pendulum => "pendulum",
            Self::MassSpring => "mass_spring",
        })
    }
}

/// Physical constants of an ideal pendulum or mass-spring system.
///
/// The pendulum angle is measured from the downward vertical, so its
/// potential energy `m g l (1 - cos q)` vanishes at rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub m: f64,
    pub l: f64,
    pub k: f64,
    pub g: f64,
}

impl SystemSpec {
    pub fn pendulum() -> Self {
        Self {
            kind: SystemKind::Pendulum,
            m: 1.0,
            l: 1.0,
            k: 1.0,
            g: 9.81,
        }
    }

    pub fn mass_spring() -> Self {
        Self {
            kind: SystemKind::MassSpring,
            m: 1.0,
            l: 1.0,
            k: 1.0,
            g: 9.81,
        }
    }

    pub fn default_for(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Pendulum => Self::pendulum(),
            SystemKind::MassSpring => Self::mass_spring(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("l", self.l), ("k", self.k), ("g", self.g)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSystem(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Generalized inertia relating momentum and velocity, `p = I q'`.
    pub fn inertia(&self) -> f64 {
        match self.kind {
            SystemKind::Pendulum => self.m * self.l * self.l,
            SystemKind::MassSpring => self.m,
        }
    }

    /// Default energy band used to draw initial conditions.
    pub fn default_energy_range(&self) -> (f64, f64) {
        match self.kind {
            SystemKind::Pendulum => (1.3, 2.3),
            SystemKind::MassSpring => (0.2, 1.0),
        }
    }

    /// Time derivative `(q', q'')` of the state `(q, q')`.
    pub fn vector_field<T: Scalar>(&self, q: T, qd: T) -> (T, T) {
        let qdd = match self.kind {
            SystemKind::Pendulum => -T::lit(self.g / self.l) * q.sin(),
            SystemKind::MassSpring => -T::lit(self.k / self.m) * q,
        };
        (qd, qdd)
    }

    /// Potential energy `U(q)`.
    pub fn potential<T: Scalar>(&self, q: T) -> T {
        match self.kind {
            SystemKind::Pendulum => T::lit(self.m * self.g * self.l) * (T::one() - q.cos()),
            SystemKind::MassSpring => T::lit(0.5 * self.k) * q * q,
        }
    }

    /// Force `dU/dq`.
    pub fn potential_grad<T: Scalar>(&self, q: T) -> T {
        match self.kind {
            SystemKind::Pendulum => T::lit(self.m * self.g * self.l) * q.sin(),
            SystemKind::MassSpring => T::lit(self.k) * q,
        }
    }

    pub fn total_energy<T: Scalar>(&self, q: T, qd: T) -> T {
        T::lit(0.5 * self.inertia()) * qd * qd + self.potential(q)
    }

    /// One classical Runge-Kutta step of size `h`.
    pub fn rk4_step<T: Scalar>(&self, (q, qd): (T, T), h: T) -> (T, T) {
        let half = T::lit(0.5);
        let (k1q, k1v) = self.vector_field(q, qd);
        let (k2q, k2v) = self.vector_field(q + half * h * k1q, qd + half * h * k1v);
        let (k3q, k3v) = self.vector_field(q + half * h * k2q, qd + half * h * k2v);
        let (k4q, k4v) = self.vector_field(q + h * k3q, qd + h * k3v);
        let sixth = h / T::lit(6.0);
        let two = T::lit(2.0);
        (
            q + sixth * (k1q + two * k2q + two * k3q + k4q),
            qd + sixth * (k1v + two * k2v + two * k3v + k4v),
        )
    }

    /// Advances `state` by `duration` using `steps` RK4 substeps.
    pub fn rk4_advance<T: Scalar>(&self, mut state: (T, T), duration: T, steps: usize) -> (T, T) {
        if steps == 0 {
            return state;
        }
        let h = duration / T::from_usize(steps).unwrap();
        for _ in 0..steps {
            state = self.rk4_step(state, h);
        }
        state
    }

    /// Largest energy of a bounded oscillation (pendulum: the separatrix).
    pub fn max_oscillation_energy(&self) -> f64 {
        match self.kind {
            SystemKind::Pendulum => 2.0 * self.m * self.g * self.l,
            SystemKind::MassSpring => f64::INFINITY,
        }
    }

    /// Period of the oscillation with total energy `energy`.
    pub fn period(&self, energy: f64) -> f64 {
        match self.kind {
            SystemKind::MassSpring => 2.0 * std::f64::consts::PI * (self.m / self.k).sqrt(),
            SystemKind::Pendulum => {
                let amp = turning_angle(self, energy);
                let k = (amp / 2.0).sin();
                4.0 * (self.l / self.g).sqrt() * elliptic_k(k)
            }
        }
    }

    /// State with the given energy, released from rest on the side given
    /// by `sign` and then advanced for `phase_time` seconds.
    ///
    /// The returned velocity is projected back onto the energy level so
    /// that `total_energy` reproduces `energy` to rounding error.
    pub fn state_at_energy(&self, energy: f64, sign: f64, phase_time: f64) -> Result<(f64, f64)> {
        self.validate()?;
        let max = self.max_oscillation_energy();
        if !(energy >= 0.0) || energy >= max {
            return Err(Error::UnreachableEnergy {
                system: match self.kind {
                    SystemKind::Pendulum => "pendulum",
                    SystemKind::MassSpring => "mass-spring",
                },
                energy,
                max,
            });
        }
        let q0 = sign.signum() * turning_angle(self, energy);
        let steps = (phase_time / 1e-3).ceil() as usize;
        let (q, qd) = self.rk4_advance((q0, 0.0), phase_time, steps);
        let kinetic = (energy - self.potential(q)).max(0.0);
        let speed = (2.0 * kinetic / self.inertia()).sqrt();
        Ok((q, if qd < 0.0 { -speed } else { speed }))
    }

    /// Draws a target energy uniformly from `range`, a release side and a
    /// uniformly distributed phase over one period.
    pub fn sample_initial_by_energy<R: Rng + ?Sized>(
        &self,
        range: (f64, f64),
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let (lo, hi) = range;
        if !(lo <= hi) || lo < 0.0 || hi >= self.max_oscillation_energy() {
            return Err(Error::UnreachableEnergy {
                system: if self.kind == SystemKind::Pendulum {
                    "pendulum"
                } else {
                    "mass-spring"
                },
                energy: hi,
                max: self.max_oscillation_energy(),
            });
        }
        let energy = if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let phase = rng.random::<f64>() * self.period(energy.max(1e-12));
        self.state_at_energy(energy, sign, phase)
    }
}

/// Amplitude `|q|` at which all energy is potential.
fn turning_angle(spec: &SystemSpec, energy: f64) -> f64 {
    match spec.kind {
        SystemKind::Pendulum => (1.0 - energy / (spec.m * spec.g * spec.l))
            .clamp(-1.0, 1.0)
            .acos(),
        SystemKind::MassSpring => (2.0 * energy / spec.k).sqrt(),
    }
}

/// Complete elliptic integral of the first kind via the arithmetic-geometric mean.
fn elliptic_k(k: f64) -> f64 {
    let (mut a, mut b) = (1.0f64, (1.0 - k * k).max(0.0).sqrt());
    for _ in 0..64 {
        if (a - b).abs() <= 1e-16 * a {
            break;
        }
        let an = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = an;
    }
    std::f64::consts::PI / (2.0 * a)
}
