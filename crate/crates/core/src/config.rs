//! Declarative experiment configuration (TOML). Unknown keys are rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{ObservationUncertainChart, ParamChart, RateUncertainChart, SimplexState};
use crate::penalty::PenaltySpec;
use crate::value::{transform_dynamics, uniform_controls, Axis, GridConfig, Mode, PropagateOptions, TransformedDynamics, DEFAULT_EIGEN_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentId {
    Ex61,
    Ex62,
    Custom,
}

/// Chart family and its known constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ChartConfig {
    /// Unknown switching intensity λ ∈ (0, ν).
    Rate { nu: f64, alpha: f64 },
    /// Unknown signal strength α ∈ (ν₁, ν₂).
    Signal { lambda: f64, mu: f64, nu1: f64, nu2: f64 },
}

/// Piecewise-constant true parameter: `values[i]` holds on
/// `[breakpoints[i], breakpoints[i + 1])`, the last value up to the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Self {
            breakpoints: vec![0.0],
            values: vec![value],
        }
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let i = self.breakpoints.partition_point(|b| *b <= t).max(1) - 1;
        self.values[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    pub q_min: f64,
    pub q_max: f64,
    pub q_nodes: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma_nodes: usize,
    /// Odd number of controls spread evenly over `[−u_max, u_max]`.
    pub controls: usize,
    pub u_max: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            q_min: -8.0,
            q_max: 8.0,
            q_nodes: 101,
            gamma_min: -8.0,
            gamma_max: 8.0,
            gamma_nodes: 101,
            controls: 21,
            u_max: 50.0,
        }
    }
}

impl GridSettings {
    pub fn to_grid_config(&self) -> Result<GridConfig> {
        Ok(GridConfig {
            q_axis: Axis::new(self.q_min, self.q_max, self.q_nodes)?,
            g_axis: Axis::new(self.gamma_min, self.gamma_max, self.gamma_nodes)?,
            controls: uniform_controls(self.controls, self.u_max)?,
        })
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_record_every() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    #[serde(default = "default_output_dir")]
    pub dir: PathBuf,
    /// Write every n-th step of the estimate and κ tracks.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Dump a dense grid snapshot every n steps (grid mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: default_output_dir(),
            record_every: default_record_every(),
            snapshot_every: None,
        }
    }
}

fn default_fine_factor() -> usize {
    10
}

fn default_initial() -> Vec<f64> {
    vec![0.5, 0.5]
}

fn default_floor() -> f64 {
    DEFAULT_EIGEN_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub horizon: f64,
    pub dt: f64,
    /// Observation substeps per filter step used to build the Stratonovich lift.
    #[serde(default = "default_fine_factor")]
    pub fine_factor: usize,
    pub seed: u64,
    pub mode: Mode,
    pub chart: ChartConfig,
    pub schedule: Schedule,
    /// Law of the initial chain state.
    #[serde(default = "default_initial")]
    pub initial_distribution: Vec<f64>,
    pub penalty: PenaltySpec,
    #[serde(default)]
    pub grid: GridSettings,
    #[serde(default)]
    pub output: OutputSettings,
    #[serde(default = "default_floor")]
    pub eigen_floor: f64,
}

impl ExperimentConfig {
    /// Unknown switching intensity, desk scale: λ = 0.1 then 0.7 from t = 100, T = 200.
    pub fn ex61() -> Self {
        Self {
            experiment: ExperimentId::Ex61,
            horizon: 200.0,
            dt: 2e-3,
            fine_factor: default_fine_factor(),
            seed: 1,
            mode: Mode::Lq,
            chart: ChartConfig::Rate { nu: 1.0, alpha: 1.0 },
            schedule: Schedule {
                breakpoints: vec![0.0, 100.0],
                values: vec![0.1, 0.7],
            },
            initial_distribution: default_initial(),
            penalty: PenaltySpec::new(0.05, 0.05, 1e-3).expect("valid constants"),
            grid: GridSettings::default(),
            output: OutputSettings::default(),
            eigen_floor: DEFAULT_EIGEN_FLOOR,
        }
    }

    /// Unknown signal strength, desk scale: α = 0.4 then 1.3 from t = 100, T = 200.
    pub fn ex62() -> Self {
        Self {
            experiment: ExperimentId::Ex62,
            chart: ChartConfig::Signal {
                lambda: 0.05,
                mu: 0.05,
                nu1: 0.2,
                nu2: 1.8,
            },
            schedule: Schedule {
                breakpoints: vec![0.0, 100.0],
                values: vec![0.4, 1.3],
            },
            penalty: PenaltySpec::new(1e-2, 1e-2, 1e-3).expect("valid constants"),
            ..Self::ex61()
        }
    }

    /// The four-regime schedules over `T = 2000`.
    pub fn full_horizon(mut self) -> Self {
        self.horizon = 2000.0;
        let values = match self.chart {
            ChartConfig::Rate { .. } => vec![0.1, 0.7, 0.3, 0.9],
            ChartConfig::Signal { .. } => vec![0.4, 1.3, 0.7, 1.6],
        };
        self.schedule = Schedule {
            breakpoints: vec![0.0, 500.0, 1000.0, 1500.0],
            values,
        };
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon > 0.0 && self.dt.is_finite() && self.horizon.is_finite()) {
            return Err(Error::Config("horizon and dt must be positive".into()));
        }
        let n = (self.horizon / self.dt).round();
        if (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(Error::Config("horizon must be a multiple of dt".into()));
        }
        if self.fine_factor == 0 {
            return Err(Error::Config("fine_factor must be at least 1".into()));
        }
        let s = &self.schedule;
        if s.breakpoints.is_empty() || s.breakpoints.len() != s.values.len() {
            return Err(Error::Config("schedule needs one value per breakpoint".into()));
        }
        if s.breakpoints[0] != 0.0 || s.breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("schedule breakpoints must start at 0 and increase".into()));
        }
        if *s.breakpoints.last().expect("nonempty") >= self.horizon {
            return Err(Error::Config("schedule breakpoints must lie inside the horizon".into()));
        }
        let chart = self.build_chart()?;
        for v in &s.values {
            self.coordinate(*v)?;
        }
        if self.initial_distribution.len() != chart.states() {
            return Err(Error::Config("initial distribution has the wrong length".into()));
        }
        SimplexState::new(self.initial_distribution.clone()).map_err(|e| Error::Config(e.to_string()))?;
        self.penalty.validate()?;
        self.grid.to_grid_config()?;
        if self.output.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if !(self.eigen_floor > 0.0) {
            return Err(Error::Config("eigen_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn build_chart(&self) -> Result<Box<dyn ParamChart>> {
        Ok(match self.chart {
            ChartConfig::Rate { nu, alpha } => Box::new(RateUncertainChart::new(nu, alpha)?),
            ChartConfig::Signal { lambda, mu, nu1, nu2 } => Box::new(ObservationUncertainChart::new(lambda, mu, nu1, nu2)?),
        })
    }

    /// Chart coordinate of a parameter value.
    pub fn coordinate(&self, value: f64) -> Result<f64> {
        let r = match self.chart {
            ChartConfig::Rate { nu, alpha } => RateUncertainChart::new(nu, alpha)?.coordinate(value),
            ChartConfig::Signal { lambda, mu, nu1, nu2 } => {
                ObservationUncertainChart::new(lambda, mu, nu1, nu2)?.coordinate(value)
            }
        };
        r.map_err(|e| Error::Config(format!("schedule value: {e}")))
    }

    pub fn dynamics(&self) -> Result<TransformedDynamics> {
        transform_dynamics(self.build_chart()?.as_ref(), &self.penalty)
    }

    pub fn propagate_options(&self) -> Result<PropagateOptions> {
        Ok(PropagateOptions {
            eigen_floor: self.eigen_floor,
            grid: self.grid.to_grid_config()?,
            snapshot_every: self.output.snapshot_every,
        })
    }
}
