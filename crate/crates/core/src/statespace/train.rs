use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gaussian_loglik_from_ss;
use crate::diff::{Adam, DiffError, Tape, Tensor, Trainable, Var};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, save_checkpoint, CheckpointHeader, Dynamics, ModelKind, PhaseState};
use crate::physics::{simulate_trajectory, StateDataset, SystemSpec, Trajectory};
use crate::rng::{substream, INIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateHyper {
    pub hidden: usize,
    pub lr: f64,
    /// Candidate step counts; one run of `max(grid)` steps is snapshotted
    /// at each and the snapshot with the best held-out likelihood kept.
    pub grid: Vec<usize>,
    pub seed: u64,
    pub fixed_mass: bool,
    /// Discrete kinds fit a prefix of every trajectory that grows by
    /// `RAMP_STRIDE` points every `ramp_steps` steps until it covers the
    /// whole trajectory; 0 fits full trajectories from the start.
    #[serde(default)]
    pub ramp_steps: usize,
}

/// Prefix growth per ramp stage, in observations.
pub const RAMP_STRIDE: usize = 5;

impl Default for StateHyper {
    fn default() -> Self {
        Self {
            hidden: 200,
            lr: 1e-3,
            grid: vec![2000, 5000, 10000],
            seed: 0,
            fixed_mass: false,
            ramp_steps: 300,
        }
    }
}

impl StateHyper {
    /// Prefix length fitted at 1-based `step` for trajectories of `len`.
    pub fn prefix_len(&self, step: usize, len: usize) -> usize {
        if self.ramp_steps == 0 {
            return len;
        }
        let stage = (step.max(1) - 1) / self.ramp_steps;
        (RAMP_STRIDE * (stage + 1)).min(len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub steps: usize,
    pub heldout_loglik: f64,
}

/// Trained parameters `(theta, x_1 per trajectory, sigma)` and their log.
#[derive(Debug, Clone)]
pub struct StateSpaceFit {
    pub system: SystemSpec,
    pub h: f64,
    pub dynamics: Dynamics,
    /// `(n_traj, 2 n_q)` flat initial states; zero rows for vector-field
    /// models, which are fit pointwise.
    pub initial: Tensor,
    pub log_sigma: Tensor,
    /// Training loss (negative mean log-likelihood) after every step.
    pub loss_log: Vec<f64>,
    pub selection: Vec<GridPoint>,
    pub selected_steps: usize,
}

impl StateSpaceFit {
    pub fn kind(&self) -> ModelKind {
        self.dynamics.kind()
    }

    pub fn sigma2(&self) -> f64 {
        (2.0 * self.log_sigma.data()[0]).exp()
    }
}

impl Trainable<f64> for StateSpaceFit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.dynamics.visit(&crate::diff::join(prefix, "dyn"), f);
        f(&crate::diff::join(prefix, "init"), &self.initial);
        f(&crate::diff::join(prefix, "log_sigma"), &self.log_sigma);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.dynamics
            .visit_mut(&crate::diff::join(prefix, "dyn"), f);
        f(&crate::diff::join(prefix, "init"), &mut self.initial);
        f(&crate::diff::join(prefix, "log_sigma"), &mut self.log_sigma);
    }
}

/// Initial states read off the noisy observations.
///
/// SV takes `(2 y_0 - y_1, y_0)` from the first two positions, so its
/// finite-difference velocity starts at the observed forward difference;
/// the other kinds map the first observation through `from_observable`.
pub fn initial_from_observations(dynamics: &Dynamics, trajs: &[Trajectory]) -> Result<Tensor> {
    let b = trajs.len();
    if dynamics.kind() == ModelKind::VinSv {
        if trajs.iter().any(|t| t.len() < 2) {
            return Err(Error::InvalidArgument(
                "SV initialization needs two observations".into(),
            ));
        }
        let mut data = Vec::with_capacity(2 * b);
        for t in trajs {
            let (y0, y1) = (t.observations.at(0, 0), t.observations.at(1, 0));
            data.extend([2.0 * y0 - y1, y0]);
        }
        return Ok(Tensor::matrix(b, 2, data));
    }
    let tape = Tape::<f64>::new();
    let bound = dynamics.bind(&tape, None)?;
    let q = tape.constant(Tensor::matrix(
        b,
        1,
        trajs.iter().map(|t| t.observations.at(0, 0)).collect(),
    ));
    let v = tape.constant(Tensor::matrix(
        b,
        1,
        trajs.iter().map(|t| t.observations.at(0, 1)).collect(),
    ));
    Ok(bound.from_observable(q, v)?.flat()?.value())
}

/// The training objective for one set of equal-length trajectories.
#[derive(Debug, Clone)]
pub struct StateObjective {
    kind: ModelKind,
    inertia: f64,
    /// Per time step, `(B, 2)` observed `(q, q')`.
    by_time: Vec<Tensor>,
    /// Stacked noisy `(q, p)` inputs and `(q', p')` targets.
    points: Tensor,
    targets: Tensor,
}

impl StateObjective {
    pub fn new(kind: ModelKind, system: &SystemSpec, trajs: &[Trajectory]) -> Result<Self> {
        let len = trajs.first().map(Trajectory::len).unwrap_or(0);
        if len == 0 || trajs.iter().any(|t| t.len() != len) {
            return Err(Error::InvalidArgument(
                "trajectories must be nonempty and of equal length".into(),
            ));
        }
        let b = trajs.len();
        let by_time = (0..len)
            .map(|i| {
                Tensor::matrix(
                    b,
                    2,
                    trajs.iter().flat_map(|t| t.observations.row(i)).collect(),
                )
            })
            .collect();
        let inertia = system.inertia();
        let mut pts = Vec::with_capacity(b * len * 2);
        let mut tgt = Vec::with_capacity(b * len * 2);
        for t in trajs {
            for i in 0..len {
                pts.extend([t.observations.at(i, 0), inertia * t.observations.at(i, 1)]);
                tgt.extend(t.derivatives.row(i));
            }
        }
        Ok(Self {
            kind,
            inertia,
            by_time,
            points: Tensor::matrix(b * len, 2, pts),
            targets: Tensor::matrix(b * len, 2, tgt),
        })
    }

    pub fn batch(&self) -> usize {
        self.by_time[0].shape()[0]
    }

    /// Number of observed scalars the likelihood sums over.
    pub fn n_scalars(&self) -> usize {
        self.points.len()
    }

    /// Total Gaussian log-likelihood on `tape`. With `slots`, the dynamics,
    /// initial states and noise scale are named parameters of `fit`'s
    /// layout; otherwise constants.
    pub fn loglik<'t>(
        &self,
        tape: &'t Tape,
        dynamics: &Dynamics,
        initial: &Tensor,
        log_sigma: &Tensor,
        slots: bool,
    ) -> Result<Var<'t>> {
        let put = |name: &str, t: &Tensor| -> Result<Var<'t>> {
            Ok(if slots {
                tape.param(name, t)?
            } else {
                tape.constant(t.clone())
            })
        };
        let bound = dynamics.bind(tape, slots.then_some("dyn"))?;
        let ls = put("log_sigma", log_sigma)?;
        let ss = if self.kind.is_discrete() {
            let init = put("init", initial)?;
            if init.dims2().0 != self.batch() {
                return Err(Error::InvalidArgument(format!(
                    "{} initial states for {} trajectories",
                    init.dims2().0,
                    self.batch()
                )));
            }
            let mut state = PhaseState::from_flat(self.kind, init)?;
            let mut terms = Vec::with_capacity(self.by_time.len());
            for (i, y) in self.by_time.iter().enumerate() {
                if i > 0 {
                    state = bound.step(state)?;
                }
                let (q, v) = bound.to_observable(state)?;
                let pred = tape.concat(&[q, v], 1)?;
                terms.push(pred.sub(tape.constant(y.clone()))?.square()?.sum()?);
            }
            tape.add_all(&terms)?
        } else {
            let _ = put("init", initial)?;
            let pred = bound.field(tape.constant(self.points.clone()))?;
            pred.sub(tape.constant(self.targets.clone()))?
                .square()?
                .sum()?
        };
        Ok(gaussian_loglik_from_ss(ss, self.n_scalars(), ls)?)
    }

    /// Negative mean log-likelihood of `fit`, with its parameters as slots.
    pub fn loss<'t>(&self, tape: &'t Tape, fit: &StateSpaceFit) -> Result<Var<'t>> {
        let ll = self.loglik(tape, &fit.dynamics, &fit.initial, &fit.log_sigma, true)?;
        Ok(ll.scale(-1.0 / self.n_scalars() as f64)?)
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }
}

fn divergence(kind: ModelKind, step: usize, e: Error) -> Error {
    match e {
        Error::Diff(DiffError::NonFinite { op }) => {
            Error::Divergence(format!("{kind}: non-finite value in `{op}` at step {step}"))
        }
        other => other,
    }
}

/// Held-out trajectory drawn from the stream right after the training
/// trajectories.
fn heldout_trajectory(ds: &StateDataset) -> Result<Trajectory> {
    let c = &ds.config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(c.n_traj as u64));
    let init = ds
        .system
        .sample_initial_by_energy(c.energy_range, &mut rng)?;
    simulate_trajectory(&ds.system, init, c.points, c.h, c.sigma, &mut rng)
}

/// Fresh, untrained fit for `kind` on `ds`.
pub fn initial_fit(
    ds: &StateDataset,
    kind: ModelKind,
    hyper: &StateHyper,
) -> Result<StateSpaceFit> {
    let mut rng = substream(hyper.seed, INIT);
    let dynamics = Dynamics::new(kind, 1, hyper.hidden, ds.config.h, &mut rng)
        .with_fixed_mass(hyper.fixed_mass)
        .with_inertia(ds.system.inertia());
    let initial = if kind.is_discrete() {
        initial_from_observations(&dynamics, &ds.trajectories)?
    } else {
        Tensor::zeros(&[0, 2])
    };
    Ok(StateSpaceFit {
        system: ds.system,
        h: ds.config.h,
        dynamics,
        initial,
        log_sigma: Tensor::scalar(0.0),
        loss_log: Vec::new(),
        selection: Vec::new(),
        selected_steps: 0,
    })
}

/// Full-batch Adam on the negative log-likelihood; see [`StateHyper::grid`].
pub fn train_mle(ds: &StateDataset, kind: ModelKind, hyper: &StateHyper) -> Result<StateSpaceFit> {
    if ds.trajectories.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut grid = hyper.grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let max_steps = *grid
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty step grid".into()))?;

    let objective = StateObjective::new(kind, &ds.system, &ds.trajectories)?;
    // Short unrolls first: a full-length unroll from an untrained potential
    // tends to settle in a narrow spurious well with shrunken amplitudes.
    let full_len = ds.trajectories[0].len();
    let mut prefixes: Vec<(usize, StateObjective)> = Vec::new();
    if kind.is_discrete() {
        for step in 1..=max_steps {
            let n = hyper.prefix_len(step, full_len);
            if n == full_len {
                break;
            }
            if prefixes.last().is_none_or(|(m, _)| *m != n) {
                let cut: Vec<Trajectory> = ds.trajectories.iter().map(|t| t.prefix(n)).collect();
                prefixes.push((n, StateObjective::new(kind, &ds.system, &cut)?));
            }
        }
    }
    let heldout = [heldout_trajectory(ds)?];
    let held_obj = StateObjective::new(kind, &ds.system, &heldout)?;

    let mut fit = initial_fit(ds, kind, hyper)?;
    let mut adam = Adam::new(hyper.lr);
    let mut best: Option<(f64, usize, Vec<(String, Tensor)>)> = None;
    for step in 1..=max_steps {
        let tape = Tape::new();
        let n = if kind.is_discrete() { hyper.prefix_len(step, full_len) } else { full_len };
        let current = prefixes.iter().find(|(m, _)| *m == n).map_or(&objective, |(_, o)| o);
        let loss = current
            .loss(&tape, &fit)
            .map_err(|e| divergence(kind, step, e))?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::Divergence(format!(
                "{kind}: loss {value} at step {step}"
            )));
        }
        let grads = tape
            .backward(loss)
            .map_err(|e| divergence(kind, step, e.into()))?;
        adam.step(&mut fit, &grads)?;
        fit.loss_log.push(value);

        if grid.contains(&step) {
            let held_init = if kind.is_discrete() {
                initial_from_observations(&fit.dynamics, &heldout)?
            } else {
                Tensor::zeros(&[0, 2])
            };
            let tape = Tape::new();
            let ll = held_obj
                .loglik(&tape, &fit.dynamics, &held_init, &fit.log_sigma, false)
                .map(|v| v.item())
                .unwrap_or(f64::NEG_INFINITY);
            fit.selection.push(GridPoint {
                steps: step,
                heldout_loglik: ll,
            });
            if best.as_ref().is_none_or(|(b, _, _)| ll > *b) {
                best = Some((ll, step, fit.snapshot()));
            }
        }
    }
    let (_, steps, params) = best.expect("grid is nonempty");
    fit.restore(&params)?;
    fit.selected_steps = steps;
    Ok(fit)
}

/// Writes `fit` as a checkpoint directory. The hyperparameters and the
/// system go into the header so [`load_state_fit`] can rebuild the model.
pub fn save_state_fit(dir: &std::path::Path, fit: &StateSpaceFit, hyper: &StateHyper) -> Result<()> {
    let mut header = CheckpointHeader::new(
        "state",
        fit.kind().name(),
        &fit.system.kind.to_string(),
        fit.dynamics.n_q(),
        hyper.hidden,
        fit.h,
        hyper.fixed_mass,
    );
    header.extra = serde_json::json!({
        "system_spec": fit.system,
        "hyper": hyper,
        "selected_steps": fit.selected_steps,
        "selection": fit.selection,
    });
    save_checkpoint(dir, &header, &fit.snapshot())
}

pub fn load_state_fit(dir: &std::path::Path) -> Result<(CheckpointHeader, StateSpaceFit)> {
    let (header, params) = load_checkpoint(dir)?;
    let manifest = dir.join("manifest.json");
    let bad = |m: String| Error::format(&manifest, m);
    if header.family != "state" {
        return Err(bad(format!("expected a state-space checkpoint, found family `{}`", header.family)));
    }
    let kind: ModelKind = header.kind.parse().map_err(bad)?;
    let field = |k: &str| header.extra.get(k).cloned().unwrap_or_default();
    let system: SystemSpec = serde_json::from_value(field("system_spec")).map_err(|e| bad(e.to_string()))?;
    let selection: Vec<GridPoint> = serde_json::from_value(field("selection")).map_err(|e| bad(e.to_string()))?;
    let selected_steps: usize = serde_json::from_value(field("selected_steps")).map_err(|e| bad(e.to_string()))?;
    let dynamics = Dynamics::new(kind, header.n_q, header.hidden, header.h, &mut substream(0, INIT))
        .with_fixed_mass(header.fixed_mass)
        .with_inertia(system.inertia());
    let init_shape = params
        .iter()
        .find(|(n, _)| n == "init")
        .map(|(_, t)| t.shape().to_vec())
        .ok_or_else(|| bad("missing parameter `init`".into()))?;
    let mut fit = StateSpaceFit {
        system,
        h: header.h,
        dynamics,
        initial: Tensor::zeros(&init_shape),
        log_sigma: Tensor::scalar(0.0),
        loss_log: Vec::new(),
        selection,
        selected_steps,
    };
    fit.restore(&params)?;
    Ok((header, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{Activation, Mlp1};
    use crate::physics::StateDataConfig;

    #[test]
    fn prefix_ramp_grows_by_stride_then_holds() {
        let h = StateHyper { ramp_steps: 300, ..Default::default() };
        let lens: Vec<usize> = [1, 300, 301, 600, 601, 1500, 1501, 9000].iter().map(|&s| h.prefix_len(s, 30)).collect();
        assert_eq!(lens, [5, 5, 10, 10, 15, 25, 30, 30]);
        let off = StateHyper { ramp_steps: 0, ..Default::default() };
        assert_eq!(off.prefix_len(1, 30), 30);
        let t = &free_particle_dataset().trajectories[1];
        let p = t.prefix(4);
        assert_eq!((p.len(), p.observations.row(3)), (4, t.observations.row(3)));
        assert_eq!(t.prefix(99).len(), t.len());
    }

    fn free_particle_dataset() -> StateDataset {
        let h = 0.1;
        let trajs = [(0.0, 1.0), (0.5, -0.4)]
            .iter()
            .map(|&(q0, v)| {
                let n = 12;
                let states: Vec<f64> = (0..n).flat_map(|i| [q0 + v * h * i as f64, v]).collect();
                Trajectory {
                    times: (0..n).map(|i| i as f64 * h).collect(),
                    states: Tensor::matrix(n, 2, states.clone()),
                    observations: Tensor::matrix(n, 2, states),
                    derivatives: Tensor::matrix(n, 2, (0..n).flat_map(|_| [v, 0.0]).collect()),
                    h,
                }
            })
            .collect();
        let system = SystemSpec::mass_spring();
        StateDataset {
            system,
            config: StateDataConfig {
                sigma: 0.0,
                points: 12,
                ..StateDataConfig::new(&system, 2, 0)
            },
            trajectories: trajs,
        }
    }

    #[test]
    fn noiseless_free_particle_likelihood_rises_monotonically() {
        let ds = free_particle_dataset();
        let hyper = StateHyper {
            hidden: 8,
            grid: vec![300],
            ..Default::default()
        };
        let objective =
            StateObjective::new(ModelKind::VinVv, &ds.system, &ds.trajectories).unwrap();
        let mut fit = initial_fit(&ds, ModelKind::VinVv, &hyper).unwrap();
        *fit.dynamics.net_mut() = Mlp1::zeros(1, 8, 1, Activation::Tanh);
        let mut adam = Adam::new(hyper.lr);
        let mut prev = f64::INFINITY;
        for _ in 0..300 {
            let tape = Tape::new();
            let loss = objective.loss(&tape, &fit).unwrap();
            assert!(loss.item() < prev);
            prev = loss.item();
            let g = tape.backward(loss).unwrap();
            adam.step(&mut fit, &g).unwrap();
        }
        assert!(fit.sigma2() < 0.6);
        assert_eq!(
            fit.dynamics
                .net()
                .eval_input_grad(&Tensor::matrix(1, 1, vec![0.3]))
                .unwrap()
                .data(),
            &[0.0]
        );
    }

    #[test]
    fn training_is_reproducible_and_selects_from_grid() {
        let spec = SystemSpec::pendulum();
        let ds =
            crate::physics::make_state_dataset(&spec, &StateDataConfig::new(&spec, 3, 9)).unwrap();
        for kind in [ModelKind::VinSv, ModelKind::Hnn] {
            let hyper = StateHyper {
                hidden: 8,
                grid: vec![5, 20, 10],
                seed: 4,
                ..Default::default()
            };
            let a = train_mle(&ds, kind, &hyper).unwrap();
            let b = train_mle(&ds, kind, &hyper).unwrap();
            assert_eq!(a.snapshot(), b.snapshot());
            assert_eq!(a.loss_log.len(), 20);
            assert_eq!(
                a.selection.iter().map(|g| g.steps).collect::<Vec<_>>(),
                vec![5, 10, 20]
            );
            let best = a
                .selection
                .iter()
                .max_by(|x, y| x.heldout_loglik.total_cmp(&y.heldout_loglik))
                .unwrap();
            assert_eq!(a.selected_steps, best.steps);
        }
    }

    #[test]
    fn one_initial_slot_per_trajectory() {
        let spec = SystemSpec::mass_spring();
        let ds =
            crate::physics::make_state_dataset(&spec, &StateDataConfig::new(&spec, 4, 1)).unwrap();
        for kind in [ModelKind::VinSv, ModelKind::VinVv, ModelKind::ResRnn] {
            let fit = initial_fit(
                &ds,
                kind,
                &StateHyper {
                    hidden: 4,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(fit.initial.shape(), &[4, 2]);
        }
        let sv = initial_fit(
            &ds,
            ModelKind::VinSv,
            &StateHyper {
                hidden: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let t = &ds.trajectories[2];
        assert_eq!(
            sv.initial.row(2),
            vec![
                2.0 * t.observations.at(0, 0) - t.observations.at(1, 0),
                t.observations.at(0, 0)
            ]
        );
    }

    #[test]
    fn divergence_is_reported() {
        let spec = SystemSpec::pendulum();
        let ds =
            crate::physics::make_state_dataset(&spec, &StateDataConfig::new(&spec, 2, 3)).unwrap();
        let mut fit = initial_fit(
            &ds,
            ModelKind::VinVv,
            &StateHyper {
                hidden: 4,
                ..Default::default()
            },
        )
        .unwrap();
        fit.dynamics
            .visit_mut("", &mut |n, t| if n == "mass_log" { *t = t.map(|_| -1000.0) });
        let obj = StateObjective::new(ModelKind::VinVv, &ds.system, &ds.trajectories).unwrap();
        let tape = Tape::new();
        let err = obj
            .loss(&tape, &fit)
            .map_err(|e| divergence(ModelKind::VinVv, 1, e))
            .unwrap_err();
        assert!(matches!(err, Error::Divergence(_)), "{err}");
    }

    #[test]
    fn state_fit_checkpoint_round_trip() {
        let spec = SystemSpec::mass_spring();
        let ds = crate::physics::make_state_dataset(&spec, &StateDataConfig::new(&spec, 2, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::VinSo2, ModelKind::Hnn] {
            let hyper = StateHyper { hidden: 6, grid: vec![2], fixed_mass: true, ..Default::default() };
            let fit = train_mle(&ds, kind, &hyper).unwrap();
            let path = dir.path().join(kind.name());
            save_state_fit(&path, &fit, &hyper).unwrap();
            let (header, back) = load_state_fit(&path).unwrap();
            assert_eq!(header.kind, kind.name());
            assert_eq!(back.snapshot(), fit.snapshot());
            assert_eq!(back.system, fit.system);
            assert_eq!(back.dynamics.fixed_mass(), fit.dynamics.fixed_mass());
            assert_eq!(back.selected_steps, 2);
        }
    }
}
