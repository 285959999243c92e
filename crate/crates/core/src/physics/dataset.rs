//! Noisy phase-space trajectories and pixel sequences, plus their
//! on-disk container (`manifest.json` + raw little-endian `f64` blobs).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::{render_frame, FRAME_PIXELS, FRAME_SIDE};
use super::system::SystemSpec;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::io;

/// RK4 substeps per observation interval for ground truth.
pub const SUBSTEPS: usize = 10;

pub const DATASET_FORMAT: &str = "vin-dataset/1";

/// One simulated trajectory with its noisy observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `T x 2` noise-free `(q, q')`.
    pub states: Tensor,
    /// `T x 2` noisy `(q, q')`.
    pub observations: Tensor,
    /// `T x 2` noisy `(q', p')`.
    pub derivatives: Tensor,
    pub h: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn initial_state(&self) -> (f64, f64) {
        (self.states.at(0, 0), self.states.at(0, 1))
    }

    /// The first `n` points (all of them if `n` exceeds the length).
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let cut = |t: &Tensor| Tensor::matrix(n, 2, t.data()[..2 * n].to_vec());
        Self {
            times: self.times[..n].to_vec(),
            states: cut(&self.states),
            observations: cut(&self.observations),
            derivatives: cut(&self.derivatives),
            h: self.h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateDataConfig {
    pub n_traj: usize,
    pub points: usize,
    pub h: f64,
    pub sigma: f64,
    pub energy_range: (f64, f64),
    pub seed: u64,
}

impl StateDataConfig {
    /// 30 points per trajectory at 0.1 s with noise 0.1 and the system's
    /// default energy band.
    pub fn new(spec: &SystemSpec, n_traj: usize, seed: u64) -> Self {
        Self {
            n_traj,
            points: 30,
            h: 0.1,
            sigma: 0.1,
            energy_range: spec.default_energy_range(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDataset {
    pub system: SystemSpec,
    pub config: StateDataConfig,
    pub trajectories: Vec<Trajectory>,
}

impl StateDataset {
    pub fn total_points(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

/// Simulates a trajectory from `initial` and corrupts it with noise drawn
/// from `rng`.
pub fn simulate_trajectory(
    spec: &SystemSpec,
    initial: (f64, f64),
    points: usize,
    h: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be positive, got {h}"
        )));
    }
    let noise =
        Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let inertia = spec.inertia();
    let mut states = Vec::with_capacity(points * 2);
    let mut obs = Vec::with_capacity(points * 2);
    let mut ders = Vec::with_capacity(points * 2);
    let mut state = initial;
    for i in 0..points {
        if i > 0 {
            state = spec.rk4_advance(state, h, SUBSTEPS);
        }
        let (q, v) = state;
        let (qd, qdd) = spec.vector_field(q, v);
        states.extend([q, v]);
        if sigma > 0.0 {
            obs.extend([q + noise.sample(rng), v + noise.sample(rng)]);
            ders.extend([qd + noise.sample(rng), inertia * qdd + noise.sample(rng)]);
        } else {
            obs.extend([q, v]);
            ders.extend([qd, inertia * qdd]);
        }
    }
    Ok(Trajectory {
        times: (0..points).map(|i| i as f64 * h).collect(),
        states: Tensor::matrix(points, 2, states),
        observations: Tensor::matrix(points, 2, obs),
        derivatives: Tensor::matrix(points, 2, ders),
        h,
    })
}

/// Trajectory `i` draws its initial condition and noise from its own
/// stream seeded with `seed + i`.
pub fn make_state_dataset(spec: &SystemSpec, config: &StateDataConfig) -> Result<StateDataset> {
    spec.validate()?;
    if config.n_traj == 0 || config.points == 0 {
        return Err(Error::InvalidArgument(
            "dataset needs at least one trajectory and point".into(),
        ));
    }
    let trajectories = (0..config.n_traj)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(i as u64));
            let init = spec.sample_initial_by_energy(config.energy_range, &mut rng)?;
            simulate_trajectory(spec, init, config.points, config.h, config.sigma, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(StateDataset {
        system: *spec,
        config: *config,
        trajectories,
    })
}

/// Number of frames per training window (the network depth).
pub const WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelDataConfig {
    pub duration: f64,
    pub rate: f64,
    pub energy_range: (f64, f64),
    pub seed: u64,
}

impl PixelDataConfig {
    pub fn new(spec: &SystemSpec, duration: f64, seed: u64) -> Self {
        Self {
            duration,
            rate: 10.0,
            energy_range: spec.default_energy_range(),
            seed,
        }
    }

    pub fn n_frames(&self) -> Result<usize> {
        let n = self.duration * self.rate;
        if !(n >= 0.0) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "duration x rate must be integral, got {n}"
            )));
        }
        Ok(n.round() as usize)
    }
}

/// Noise-free rendered frames of a single trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelDataset {
    pub system: SystemSpec,
    pub config: PixelDataConfig,
    /// `T x 784` frames, one flattened 28x28 image per row.
    pub frames: Tensor,
    /// `T x 2` underlying `(q, q')`.
    pub states: Tensor,
    pub h: f64,
    /// `(start, length)` of every overlapping window.
    pub windows: Vec<(usize, usize)>,
}

impl PixelDataset {
    pub fn n_frames(&self) -> usize {
        self.frames.dims2().0
    }

    /// Rows `[start, start + len)` of the frame matrix.
    pub fn frame_rows(&self, start: usize, len: usize) -> Tensor {
        let d = &self.frames.data()[start * FRAME_PIXELS..(start + len) * FRAME_PIXELS];
        Tensor::matrix(len, FRAME_PIXELS, d.to_vec())
    }

    /// The same dataset restricted to its first `n` frames.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.n_frames());
        Self {
            system: self.system,
            config: self.config,
            frames: self.frame_rows(0, n),
            states: Tensor::matrix(n, 2, self.states.data()[..2 * n].to_vec()),
            h: self.h,
            windows: windows(n, WINDOW),
        }
    }
}

pub fn windows(n_frames: usize, len: usize) -> Vec<(usize, usize)> {
    if n_frames < len {
        return Vec::new();
    }
    (0..=n_frames - len).map(|s| (s, len)).collect()
}

pub fn make_pixel_dataset(spec: &SystemSpec, config: &PixelDataConfig) -> Result<PixelDataset> {
    spec.validate()?;
    let n = config.n_frames()?;
    let h = 1.0 / config.rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = spec.sample_initial_by_energy(config.energy_range, &mut rng)?;
    let traj = simulate_trajectory(spec, init, n, h, 0.0, &mut rng)?;
    let mut frames = Vec::with_capacity(n * FRAME_PIXELS);
    for i in 0..n {
        frames.extend_from_slice(render_frame(spec, traj.states.at(i, 0)).data());
    }
    Ok(PixelDataset {
        system: *spec,
        config: *config,
        frames: Tensor::matrix(n, FRAME_PIXELS, frames),
        states: traj.states,
        h,
        windows: windows(n, WINDOW),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetManifest {
    State {
        format: String,
        system: SystemSpec,
        config: StateDataConfig,
        /// `[n_traj, points, 2]` for each of states/observations/derivatives.
        shape: Vec<usize>,
        note: String,
    },
    Pixel {
        format: String,
        system: SystemSpec,
        config: PixelDataConfig,
        /// `[1, T, 28, 28]`
        frames_shape: Vec<usize>,
        /// `[1, T, 2]`
        states_shape: Vec<usize>,
        h: f64,
        window: usize,
    },
}

pub enum Dataset {
    State(StateDataset),
    Pixel(PixelDataset),
}

fn stack(trajs: &[Trajectory], pick: impl Fn(&Trajectory) -> &Tensor) -> Vec<f64> {
    trajs
        .iter()
        .flat_map(|t| pick(t).data().iter().copied())
        .collect()
}

pub fn write_state_dataset(dir: &Path, ds: &StateDataset) -> Result<()> {
    io::ensure_dir(dir)?;
    let manifest = DatasetManifest::State {
        format: DATASET_FORMAT.into(),
        system: ds.system,
        config: ds.config,
        shape: vec![ds.trajectories.len(), ds.config.points, 2],
        note: "observation step is a convention of this generator".into(),
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    io::write_blob(
        &dir.join("states.bin"),
        &stack(&ds.trajectories, |t| &t.states),
    )?;
    io::write_blob(
        &dir.join("observations.bin"),
        &stack(&ds.trajectories, |t| &t.observations),
    )?;
    io::write_blob(
        &dir.join("derivatives.bin"),
        &stack(&ds.trajectories, |t| &t.derivatives),
    )
}

pub fn write_pixel_dataset(dir: &Path, ds: &PixelDataset) -> Result<()> {
    io::ensure_dir(dir)?;
    let n = ds.n_frames();
    let manifest = DatasetManifest::Pixel {
        format: DATASET_FORMAT.into(),
        system: ds.system,
        config: ds.config,
        frames_shape: vec![1, n, FRAME_SIDE, FRAME_SIDE],
        states_shape: vec![1, n, 2],
        h: ds.h,
        window: WINDOW,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    io::write_tensor(&dir.join("frames.bin"), &ds.frames)?;
    io::write_tensor(&dir.join("states.bin"), &ds.states)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest = io::read_json(&path)?;
    match manifest {
        DatasetManifest::State {
            format,
            system,
            config,
            shape,
            ..
        } => {
            check_format(&path, &format)?;
            if shape.len() != 3
                || shape[2] != 2
                || shape[0] != config.n_traj
                || shape[1] != config.points
            {
                return Err(Error::format(
                    &path,
                    format!("inconsistent shape {shape:?}"),
                ));
            }
            let n: usize = shape.iter().product();
            let states = io::read_blob(&dir.join("states.bin"), n)?;
            let obs = io::read_blob(&dir.join("observations.bin"), n)?;
            let ders = io::read_blob(&dir.join("derivatives.bin"), n)?;
            let per = shape[1] * 2;
            let trajectories = (0..shape[0])
                .map(|i| {
                    let sl =
                        |v: &[f64]| Tensor::matrix(shape[1], 2, v[i * per..(i + 1) * per].to_vec());
                    Trajectory {
                        times: (0..shape[1]).map(|k| k as f64 * config.h).collect(),
                        states: sl(&states),
                        observations: sl(&obs),
                        derivatives: sl(&ders),
                        h: config.h,
                    }
                })
                .collect();
            Ok(Dataset::State(StateDataset {
                system,
                config,
                trajectories,
            }))
        }
        DatasetManifest::Pixel {
            format,
            system,
            config,
            frames_shape,
            h,
            window,
            ..
        } => {
            check_format(&path, &format)?;
            if frames_shape.len() != 4 || frames_shape[2] * frames_shape[3] != FRAME_PIXELS {
                return Err(Error::format(
                    &path,
                    format!("bad frame shape {frames_shape:?}"),
                ));
            }
            let n = frames_shape[0] * frames_shape[1];
            let frames = io::read_tensor(&dir.join("frames.bin"), &[n, FRAME_PIXELS])?;
            let states = io::read_tensor(&dir.join("states.bin"), &[n, 2])?;
            Ok(Dataset::Pixel(PixelDataset {
                system,
                config,
                frames,
                states,
                h,
                windows: windows(n, window),
            }))
        }
    }
}

fn check_format(path: &Path, format: &str) -> Result<()> {
    if format != DATASET_FORMAT {
        return Err(Error::format(
            path,
            format!("unsupported format tag `{format}`"),
        ));
    }
    Ok(())
}
