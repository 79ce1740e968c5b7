//! Single TOML configuration with one section per module. Every key is
//! optional; unknown keys are rejected.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use tactiforce_core::mlp::{DatasetConfig, TrainConfig};
use tactiforce_core::regress::CalibrationConfig;
use tactiforce_core::sim::{GelConfig, HertzParams, LightingModel};
use tactiforce_core::teleop::{FollowerModel, ObjectModel, OperatorModel, TeleopModels};

use crate::formats::fingerprint;

pub const DEFAULT_BUS_ADDR: &str = "127.0.0.1:8765";
pub const BUS_ADDR_ENV: &str = "TACTIFORCE_BUS_ADDR";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub gel: GelConfig,
    pub lighting: LightingModel,
    pub mlp: MlpSection,
    pub solver: SolverSection,
    pub calibration: CalibrationConfig,
    pub teleop: TeleopSection,
    pub bus: BusSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSection {
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    /// 3x3 median before taking the peak depth.
    pub median_filter: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            median_filter: true,
        }
    }
}

/// Where the teleop loop gets `f_s` from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SensorMode {
    /// Hertz force of the press, no imaging.
    #[default]
    Ideal,
    /// Simulated depth map through the calibration curve.
    Oracle,
    /// Rendered frame through the trained network, solver and curve.
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopSection {
    pub follower: FollowerModel,
    pub operator: OperatorModel,
    pub material: HertzParams,
    pub sensor: SensorMode,
    /// Live mode only.
    pub object: ObjectModel,
    /// Hz, live mode only
    pub control_rate: f64,
    /// Hz
    pub sensor_rate: f64,
    /// Hz, live state publication
    pub state_rate: f64,
    /// m, live mode start aperture
    pub initial_aperture: f64,
}

impl Default for TeleopSection {
    fn default() -> Self {
        let models = TeleopModels::default();
        TeleopSection {
            follower: models.follower,
            operator: models.operator,
            material: models.material,
            sensor: SensorMode::default(),
            object: ObjectModel::default(),
            control_rate: 1000.0,
            sensor_rate: 30.0,
            state_rate: 100.0,
            initial_aperture: 0.02,
        }
    }
}

impl TeleopSection {
    pub fn models(&self) -> TeleopModels {
        TeleopModels {
            follower: self.follower,
            operator: self.operator,
            material: self.material,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusSection {
    /// Overridden by `TACTIFORCE_BUS_ADDR` and `--addr`.
    pub addr: String,
    /// Per-subscriber queue depth on lossy topics.
    pub lossy_depth: usize,
    /// Per-subscriber backlog on lossless topics before the connection
    /// is failed.
    pub lossless_capacity: usize,
    /// Publish rendered frames on the frame topic in live mode.
    pub publish_frames: bool,
}

impl Default for BusSection {
    fn default() -> Self {
        BusSection {
            addr: DEFAULT_BUS_ADDR.into(),
            lossy_depth: 64,
            lossless_capacity: 1 << 16,
            publish_frames: true,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Config::default()),
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.gel.validate()?;
        self.lighting.validate()?;
        self.teleop.models().validate()?;
        anyhow::ensure!(self.bus.lossy_depth >= 1, "bus.lossy_depth must be ≥ 1");
        anyhow::ensure!(
            self.teleop.control_rate > 0.0
                && self.teleop.sensor_rate > 0.0
                && self.teleop.sensor_rate <= self.teleop.control_rate,
            "teleop rates must satisfy 0 < sensor_rate ≤ control_rate"
        );
        anyhow::ensure!(self.teleop.state_rate > 0.0, "teleop.state_rate must be > 0");
        Ok(())
    }

    /// Hex sha256 of the effective configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    /// `flag`, else the environment, else the config file.
    pub fn bus_addr(&self, flag: Option<&str>) -> String {
        flag.map(str::to_owned)
            .or_else(|| std::env::var(BUS_ADDR_ENV).ok())
            .unwrap_or_else(|| self.bus.addr.clone())
    }
}
