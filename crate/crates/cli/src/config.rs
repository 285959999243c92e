use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vin_core::models::ModelKind;
use vin_core::physics::{PixelDataConfig, StateDataConfig, SystemKind, SystemSpec};
use vin_core::pixelvae::{Likelihood, PixelHyper, PixelKind};
use vin_core::statespace::StateHyper;

use crate::error::CliError;

/// One experiment: a system, a dataset recipe, the models to fit and how
/// to score them. Every run is determined by the file plus the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: SystemKind,
    /// One trial per seed.
    pub seeds: Vec<u64>,
    /// Model kinds; append `:fixed_mass` to pin the mass matrix.
    pub models: Vec<ModelSpec>,
    pub data: DataSection,
    #[serde(default)]
    pub state_train: StateTrainSection,
    #[serde(default)]
    pub pixel_train: PixelTrainSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    State {
        n_traj: usize,
        #[serde(default = "default_points")]
        points: usize,
        #[serde(default = "default_h")]
        h: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default)]
        energy_range: Option<(f64, f64)>,
    },
    Pixel {
        duration: f64,
        #[serde(default = "default_rate")]
        rate: f64,
        /// Train on this many leading frames; the rest are test frames for
        /// the latent export. Defaults to all frames.
        #[serde(default)]
        train_frames: Option<usize>,
        #[serde(default)]
        energy_range: Option<(f64, f64)>,
    },
}

fn default_points() -> usize {
    30
}
fn default_h() -> f64 {
    0.1
}
fn default_sigma() -> f64 {
    0.1
}
fn default_rate() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateTrainSection {
    pub hidden: usize,
    pub lr: f64,
    pub grid: Vec<usize>,
    pub ramp_steps: usize,
}

impl Default for StateTrainSection {
    fn default() -> Self {
        let h = StateHyper::default();
        Self { hidden: h.hidden, lr: h.lr, grid: h.grid, ramp_steps: h.ramp_steps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PixelTrainSection {
    pub width: usize,
    pub gru_hidden: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_windows: usize,
    pub likelihood: Likelihood,
}

impl Default for PixelTrainSection {
    fn default() -> Self {
        let h = PixelHyper::default();
        Self {
            width: h.width,
            gru_hidden: h.gru_hidden,
            lr: h.lr,
            max_epochs: h.max_epochs,
            patience: h.patience,
            batch_windows: h.batch_windows,
            likelihood: h.likelihood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Seconds scored by `evaluate`; defaults to 20 (state) or 5 (pixel).
    pub horizon: Option<f64>,
    /// Seconds rolled out by `forecast`.
    pub forecast_horizon: f64,
    /// Held-out initial conditions per seed (state data only).
    pub n_eval: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { horizon: None, forecast_horizon: 20.0, n_eval: 5 }
    }
}

/// A model kind plus the fixed-mass switch, written `kind[:fixed_mass]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: String,
    pub fixed_mass: bool,
}

impl ModelSpec {
    /// Output directory name.
    pub fn slug(&self) -> String {
        if self.fixed_mass {
            format!("{}-fixed_mass", self.kind)
        } else {
            self.kind.clone()
        }
    }

    pub fn state_kind(&self) -> Result<ModelKind, CliError> {
        self.kind.parse().map_err(CliError::Config)
    }

    pub fn pixel_kind(&self) -> Result<PixelKind, CliError> {
        self.kind.parse().map_err(CliError::Config)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.kind)?;
        if self.fixed_mass {
            f.write_str(":fixed_mass")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, fixed_mass) = match s.split_once(':') {
            None => (s, false),
            Some((k, "fixed_mass")) => (k, true),
            Some((_, other)) => return Err(format!("unknown model option `{other}` in `{s}`")),
        };
        // canonical name for either family
        let kind = match kind.parse::<PixelKind>() {
            Ok(k) => k.name().to_string(),
            Err(_) => kind.parse::<ModelKind>()?.name().to_string(),
        };
        Ok(Self { kind, fixed_mass })
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_pixel(&self) -> bool {
        matches!(self.data, DataSection::Pixel { .. })
    }

    pub fn spec(&self) -> SystemSpec {
        SystemSpec::default_for(self.system)
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("`seeds` must list at least one seed".into());
        }
        if self.models.is_empty() {
            return bad("`models` must list at least one model".into());
        }
        for m in &self.models {
            if self.is_pixel() {
                m.pixel_kind()?;
            } else {
                m.state_kind()?;
            }
            if m.fixed_mass && !m.kind.starts_with("vin") {
                return bad(format!("`{m}`: only integrator networks have a mass matrix"));
            }
        }
        match self.data {
            DataSection::State { n_traj, points, h, sigma, .. } => {
                if n_traj == 0 || points < 2 || !(h > 0.0) || !(sigma >= 0.0) {
                    return bad("data: need n_traj >= 1, points >= 2, h > 0, sigma >= 0".into());
                }
                if self.state_train.grid.is_empty() || self.state_train.grid.contains(&0) {
                    return bad("state_train.grid: need positive step counts".into());
                }
            }
            DataSection::Pixel { duration, rate, train_frames, .. } => {
                let n = (duration * rate).round() as usize;
                if !(duration > 0.0) || !(rate > 0.0) || n < 10 {
                    return bad("data: pixel sequences need at least 10 frames".into());
                }
                if train_frames.is_some_and(|t| t < 10 || t > n) {
                    return bad(format!("data.train_frames must lie in 10..={n}"));
                }
            }
        }
        let e = &self.evaluate;
        if e.horizon.is_some_and(|h| !(h >= 0.0)) || !(e.forecast_horizon >= 0.0) || e.n_eval == 0 {
            return bad("evaluate: horizons must be >= 0 and n_eval >= 1".into());
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.evaluate.horizon.unwrap_or(if self.is_pixel() { 5.0 } else { 20.0 })
    }

    pub fn state_data(&self, data_seed: u64) -> Option<StateDataConfig> {
        let spec = self.spec();
        match self.data {
            DataSection::State { n_traj, points, h, sigma, energy_range } => {
                let mut c = StateDataConfig::new(&spec, n_traj, data_seed);
                c.points = points;
                c.h = h;
                c.sigma = sigma;
                if let Some(r) = energy_range {
                    c.energy_range = r;
                }
                Some(c)
            }
            DataSection::Pixel { .. } => None,
        }
    }

    pub fn pixel_data(&self, data_seed: u64) -> Option<PixelDataConfig> {
        let spec = self.spec();
        match self.data {
            DataSection::Pixel { duration, rate, energy_range, .. } => {
                let mut c = PixelDataConfig::new(&spec, duration, data_seed);
                c.rate = rate;
                if let Some(r) = energy_range {
                    c.energy_range = r;
                }
                Some(c)
            }
            DataSection::State { .. } => None,
        }
    }

    pub fn train_frames(&self) -> Option<usize> {
        match self.data {
            DataSection::Pixel { train_frames, .. } => train_frames,
            DataSection::State { .. } => None,
        }
    }

    pub fn state_hyper(&self, model: &ModelSpec, seed: u64) -> StateHyper {
        let s = &self.state_train;
        StateHyper {
            hidden: s.hidden,
            lr: s.lr,
            grid: s.grid.clone(),
            seed,
            fixed_mass: model.fixed_mass,
            ramp_steps: s.ramp_steps,
        }
    }

    pub fn pixel_hyper(&self, model: &ModelSpec, seed: u64) -> PixelHyper {
        let p = &self.pixel_train;
        PixelHyper {
            width: p.width,
            gru_hidden: p.gru_hidden,
            lr: p.lr,
            max_epochs: p.max_epochs,
            patience: p.patience,
            batch_windows: p.batch_windows,
            seed,
            fixed_mass: model.fixed_mass,
            likelihood: p.likelihood,
        }
    }
}
