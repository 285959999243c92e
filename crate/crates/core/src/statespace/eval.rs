use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StateSpaceFit;
use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{BoundDynamics, Dynamics};
use crate::physics::{simulate_trajectory, StateDataConfig, SystemSpec, Trajectory};

/// Forecast horizon in seconds.
pub const HORIZON: f64 = 20.0;
/// RK4 substeps per observation interval for the vector-field models.
pub const RK4_SUBSTEPS: usize = 100;
/// Evaluation trajectory `i` uses seed `data seed + EVAL_SEED_OFFSET + i`.
pub const EVAL_SEED_OFFSET: u64 = 1_000_000;

fn n_states(duration: f64, h: f64) -> Result<usize> {
    if !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bad forecast duration {duration}"
        )));
    }
    Ok((duration / h).round() as usize + 1)
}

/// Predicted `(q, q')` paths, one `(n, 2)` tensor per initial condition,
/// `n = duration / h + 1` including the initial observable.
pub fn forecast(fit: &StateSpaceFit, initial: &[(f64, f64)], duration: f64) -> Result<Vec<Tensor>> {
    let n = n_states(duration, fit.h)?;
    if fit.kind().is_discrete() {
        let tape = Tape::new();
        let bound = fit.dynamics.bind(&tape, None)?;
        return forecast_bound(&tape, &bound, initial, n);
    }
    let b = initial.len();
    let mut paths = vec![Vec::with_capacity(2 * n); b];
    let inertia = fit.dynamics.inertia();
    let mut x = Tensor::matrix(
        b,
        2,
        initial
            .iter()
            .flat_map(|&(q, v)| [q, inertia * v])
            .collect(),
    );
    for i in 0..n {
        if i > 0 {
            x = rk4_field(&fit.dynamics, &x, fit.h, RK4_SUBSTEPS)?;
        }
        for (k, path) in paths.iter_mut().enumerate() {
            path.extend([x.at(k, 0), x.at(k, 1) / inertia]);
        }
    }
    Ok(paths.into_iter().map(|p| Tensor::matrix(n, 2, p)).collect())
}

/// [`forecast`] for a discrete model already bound on `tape`: `n`
/// observables per initial condition.
pub fn forecast_bound<'t>(
    tape: &'t Tape,
    bound: &BoundDynamics<'t>,
    initial: &[(f64, f64)],
    n: usize,
) -> Result<Vec<Tensor>> {
    let b = initial.len();
    let mut paths = vec![Vec::with_capacity(2 * n); b];
    let q = tape.constant(Tensor::matrix(b, 1, initial.iter().map(|s| s.0).collect()));
    let v = tape.constant(Tensor::matrix(b, 1, initial.iter().map(|s| s.1).collect()));
    let mut state = bound.from_observable(q, v)?;
    for i in 0..n {
        if i > 0 {
            state = bound.step(state)?;
        }
        let (q, v) = bound.to_observable(state)?;
        let (q, v) = (q.value(), v.value());
        for (k, path) in paths.iter_mut().enumerate() {
            path.extend([q.data()[k], v.data()[k]]);
        }
    }
    Ok(paths.into_iter().map(|p| Tensor::matrix(n, 2, p)).collect())
}

fn rk4_field(d: &Dynamics, x: &Tensor, h: f64, substeps: usize) -> Result<Tensor> {
    let dt = h / substeps as f64;
    let axpy = |a: &Tensor, s: f64, b: &Tensor| a.zip_map(b, |u, w| u + s * w);
    let mut x = x.clone();
    for _ in 0..substeps {
        let k1 = d.field_eval(&x)?;
        let k2 = d.field_eval(&axpy(&x, 0.5 * dt, &k1)?)?;
        let k3 = d.field_eval(&axpy(&x, 0.5 * dt, &k2)?)?;
        let k4 = d.field_eval(&axpy(&x, dt, &k3)?)?;
        let incr = k1
            .zip_map(&k2, |a, b| a + 2.0 * b)?
            .zip_map(&k3, |a, b| a + 2.0 * b)?
            .zip_map(&k4, |a, b| a + b)?;
        x = axpy(&x, dt / 6.0, &incr)?;
        if !x.is_finite() {
            return Err(Error::Divergence(format!(
                "{} forecast left the finite range",
                d.kind()
            )));
        }
    }
    Ok(x)
}

/// Noise-free trajectories from held-out initial conditions, long enough
/// for `duration` seconds at the training step.
pub fn evaluation_trajectories(
    spec: &SystemSpec,
    config: &StateDataConfig,
    count: usize,
    duration: f64,
) -> Result<Vec<Trajectory>> {
    let n = n_states(duration, config.h)?;
    (0..count)
        .map(|i| {
            let seed = config.seed.wrapping_add(EVAL_SEED_OFFSET + i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = spec.sample_initial_by_energy(config.energy_range, &mut rng)?;
            simulate_trajectory(spec, init, n, config.h, 0.0, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub t: Vec<f64>,
    pub rmse: Vec<f64>,
    pub cum_rmse: Vec<f64>,
    /// True energy function applied to the predicted states.
    pub energy: Vec<f64>,
}

impl Metrics {
    pub fn final_cum_rmse(&self) -> f64 {
        self.cum_rmse.last().copied().unwrap_or(0.0)
    }

    /// `max - min` of the predicted-state energy.
    pub fn energy_band(&self) -> f64 {
        let (lo, hi) = self
            .energy
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &e| {
                (l.min(e), h.max(e))
            });
        if lo.is_finite() {
            hi - lo
        } else {
            0.0
        }
    }
}

/// Compares a predicted `(n, 2)` path with the noise-free truth.
pub fn evaluate(spec: &SystemSpec, pred: &Tensor, truth: &Trajectory) -> Result<Metrics> {
    let n = pred.dims2().0;
    if pred.shape() != truth.states.shape() {
        return Err(Error::InvalidArgument(format!(
            "prediction grid {:?} does not match truth {:?}",
            pred.shape(),
            truth.states.shape()
        )));
    }
    let mut m = Metrics {
        t: truth.times.clone(),
        rmse: Vec::with_capacity(n),
        cum_rmse: Vec::with_capacity(n),
        energy: Vec::with_capacity(n),
    };
    let mut cum = 0.0;
    for i in 0..n {
        let (q, v) = (pred.at(i, 0), pred.at(i, 1));
        let se = (q - truth.states.at(i, 0)).powi(2) + (v - truth.states.at(i, 1)).powi(2);
        let r = (se / 2.0).sqrt();
        cum += r;
        m.rmse.push(r);
        m.cum_rmse.push(cum);
        m.energy.push(spec.total_energy(q, v));
    }
    Ok(m)
}

/// CSV with columns `t,rmse,cum_rmse,energy,model,seed`.
pub fn write_metrics_csv(path: &Path, metrics: &Metrics, model: &str, seed: u64) -> Result<()> {
    let mut out = String::from("t,rmse,cum_rmse,energy,model,seed\n");
    for i in 0..metrics.t.len() {
        writeln!(
            out,
            "{},{},{},{},{model},{seed}",
            metrics.t[i], metrics.rmse[i], metrics.cum_rmse[i], metrics.energy[i]
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;
    use crate::statespace::{train_mle, StateHyper};

    fn truth(spec: &SystemSpec) -> Trajectory {
        let c = StateDataConfig::new(spec, 1, 5);
        evaluation_trajectories(spec, &c, 1, 3.0).unwrap().remove(0)
    }

    #[test]
    fn perfect_and_offset_predictions() {
        let spec = SystemSpec::mass_spring();
        let tr = truth(&spec);
        let m = evaluate(&spec, &tr.states, &tr).unwrap();
        assert!(m.rmse.iter().all(|&r| r == 0.0));
        let e0 = spec.total_energy(tr.states.at(0, 0), tr.states.at(0, 1));
        // RK4 with 10 substeps
        assert!(m.energy.iter().all(|e| (e - e0).abs() < 1e-8));

        let shifted = Tensor::from_fn(tr.states.shape(), |k| {
            tr.states.data()[k] + if k % 2 == 0 { 0.3 } else { 0.0 }
        });
        let m = evaluate(&spec, &shifted, &tr).unwrap();
        for r in &m.rmse {
            assert!((r - 0.3 / 2f64.sqrt()).abs() < 1e-12);
        }
        assert!((m.final_cum_rmse() - 31.0 * 0.3 / 2f64.sqrt()).abs() < 1e-9);
        let short = Tensor::zeros(&[3, 2]);
        assert!(evaluate(&spec, &short, &tr).is_err());
    }

    #[test]
    fn zero_duration_and_determinism() {
        let spec = SystemSpec::pendulum();
        let ds =
            crate::physics::make_state_dataset(&spec, &StateDataConfig::new(&spec, 2, 0)).unwrap();
        for kind in [ModelKind::VinSv, ModelKind::VinSo2, ModelKind::NnDeriv] {
            let fit = train_mle(
                &ds,
                kind,
                &StateHyper {
                    hidden: 8,
                    grid: vec![3],
                    ..Default::default()
                },
            )
            .unwrap();
            let p = forecast(&fit, &[(0.4, -0.2)], 0.0).unwrap();
            assert_eq!(p[0].shape(), &[1, 2]);
            assert!(
                (p[0].at(0, 0) - 0.4).abs() < 1e-12 && (p[0].at(0, 1) + 0.2).abs() < 1e-12,
                "{kind}"
            );
            let a = forecast(&fit, &[(0.4, -0.2), (1.0, 0.5)], 2.0).unwrap();
            let b = forecast(&fit, &[(0.4, -0.2), (1.0, 0.5)], 2.0).unwrap();
            assert_eq!(a, b);
            assert_eq!(a[1].shape(), &[21, 2]);
        }
    }

    #[test]
    fn vv_forecast_matches_leapfrog_recurrence_for_harmonic_force() {
        let tape = Tape::new();
        let unit = tape.constant(Tensor::vector(vec![0.0]));
        let bound = BoundDynamics::custom(ModelKind::VinVv, 0.1, Some(unit), 1.0, Box::new(Ok));
        let path = forecast_bound(&tape, &bound, &[(1.0, 0.0)], 101)
            .unwrap()
            .remove(0);
        // closed-form leapfrog on q'' = -q
        let (mut q, mut p, h) = (1.0f64, 0.0f64, 0.1);
        for i in 0..=100 {
            assert!((path.at(i, 0) - q).abs() < 1e-10, "step {i}");
            assert!((path.at(i, 1) - p).abs() < 1e-10);
            let q1 = q + h * p - 0.5 * h * h * q;
            p -= 0.5 * h * (q + q1);
            q = q1;
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Metrics {
            t: vec![0.0, 0.1],
            rmse: vec![0.0, 1.0],
            cum_rmse: vec![0.0, 1.0],
            energy: vec![2.0, 2.5],
        };
        write_metrics_csv(&p, &m, "vin_vv", 3).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "t,rmse,cum_rmse,energy,model,seed\n0,0,0,2,vin_vv,3\n0.1,1,1,2.5,vin_vv,3\n"
        );
        assert_eq!(m.energy_band(), 0.5);
    }
}
