//! Scenario files: TOML with unit-suffixed keys, and the builtin presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fl::{HyperParams, Weighting};
use crate::gu::FeasibilityMode;
use crate::linkmodel::LinkBudget;
use crate::orbital::{ConstellationConfig, GroundStation, OrbitalPlane, VisibilityQuery, WalkerPattern};

/// Scheduled epochs, or the same fixed epoch count for every cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Mode {
    Scheduled,
    Fixed(u32),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Scheduled => f.write_str("scheduled"),
            Mode::Fixed(i) => write!(f, "fixed:{i}"),
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "scheduled" {
            return Ok(Mode::Scheduled);
        }
        let bad = || Error::Config(format!("mode `{s}` is neither `scheduled` nor `fixed:<epochs>`"));
        let i: u32 = s.strip_prefix("fixed:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if i == 0 {
            return Err(Error::Config("fixed mode needs at least one epoch".into()));
        }
        Ok(Mode::Fixed(i))
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationSection {
    pub pattern: WalkerPattern,
    pub orbits: usize,
    pub sats_per_orbit: usize,
    pub altitude_m: f64,
    pub inclination_deg: f64,
    #[serde(default = "one")]
    pub phasing_factor: i64,
    #[serde(default)]
    pub epoch_offset_s: f64,
}

fn one() -> i64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStationSection {
    #[serde(default = "default_gs_name")]
    pub name: String,
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub min_elevation_deg: f64,
}

fn default_gs_name() -> String {
    "gs".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub tx_power_dbm: f64,
    pub antenna_gain_dbi: f64,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub system_temp_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSection {
    pub classes: usize,
    pub features: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub dirichlet_alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub regularization: f64,
    /// Duration of one local epoch.
    pub epoch_s: f64,
    /// Parameter count used for link timing.
    pub payload_params: u64,
    #[serde(default = "unit")]
    pub class_separation: f64,
    #[serde(default = "unit")]
    pub noise_std: f64,
    #[serde(default)]
    pub weighting: Weighting,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub slots: u32,
    pub mode: Mode,
    pub seed: u64,
    pub horizon_s: f64,
    #[serde(default = "default_step")]
    pub step_s: f64,
    #[serde(default)]
    pub strict_gu: bool,
    #[serde(default)]
    pub fallback: bool,
}

fn default_step() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub constellation: ConstellationSection,
    pub ground_station: GroundStationSection,
    pub link: LinkSection,
    pub learning: LearningSection,
    pub simulation: SimulationSection,
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.constellation().validate()?;
        self.ground_station()?;
        self.budget()?;
        let g = &self.ground_station;
        if !(0.0..90.0).contains(&g.min_elevation_deg) {
            return Err(Error::Config(format!(
                "min_elevation_deg must be in [0, 90), got {}",
                g.min_elevation_deg
            )));
        }
        let l = &self.learning;
        let positive = [
            ("learning.epoch_s", l.epoch_s),
            ("learning.dirichlet_alpha", l.dirichlet_alpha),
            ("learning.class_separation", l.class_separation),
            ("learning.noise_std", l.noise_std),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        if l.classes < 2 || l.features == 0 {
            return Err(Error::Config("learning needs at least 2 classes and 1 feature".into()));
        }
        if l.test_samples == 0 {
            return Err(Error::Config("learning.test_samples must be positive".into()));
        }
        if l.train_samples < self.constellation.orbits * self.constellation.sats_per_orbit {
            return Err(Error::Config(format!(
                "learning.train_samples = {} cannot give every satellite a sample",
                l.train_samples
            )));
        }
        self.hyper_params(0).validate()?;
        let s = &self.simulation;
        if s.slots == 0 {
            return Err(Error::Config("simulation.slots must be at least 1".into()));
        }
        if !(s.horizon_s > 0.0 && s.horizon_s.is_finite()) {
            return Err(Error::Config(format!("simulation.horizon_s must be positive, got {}", s.horizon_s)));
        }
        self.query().validate()?;
        Ok(())
    }

    pub fn constellation(&self) -> ConstellationConfig {
        let c = &self.constellation;
        let plane = OrbitalPlane {
            sats: c.sats_per_orbit,
            altitude_m: c.altitude_m,
            inclination_deg: c.inclination_deg,
        };
        ConstellationConfig {
            planes: vec![plane; c.orbits],
            pattern: c.pattern,
            phasing_factor: c.phasing_factor,
            epoch_offset_s: c.epoch_offset_s,
        }
    }

    pub fn ground_station(&self) -> Result<GroundStation> {
        let g = &self.ground_station;
        GroundStation::new(g.name.clone(), g.latitude_deg, g.longitude_deg)
    }

    pub fn budget(&self) -> Result<LinkBudget> {
        let l = &self.link;
        LinkBudget::from_db(l.tx_power_dbm, l.antenna_gain_dbi, l.bandwidth_hz, l.carrier_hz, l.system_temp_k)
    }

    pub fn query(&self) -> VisibilityQuery {
        VisibilityQuery {
            min_elevation_deg: self.ground_station.min_elevation_deg,
            horizon_s: self.simulation.horizon_s,
            step_s: self.simulation.step_s,
        }
    }

    pub fn feasibility(&self) -> FeasibilityMode {
        if self.simulation.strict_gu {
            FeasibilityMode::Strict
        } else {
            FeasibilityMode::Literal
        }
    }

    pub fn hyper_params(&self, epochs: u32) -> HyperParams {
        let l = &self.learning;
        HyperParams {
            learning_rate: l.learning_rate,
            batch_size: l.batch_size,
            epochs,
            prox: l.regularization,
            seed: self.simulation.seed,
            first_epoch: 0,
        }
    }

    pub fn payload_bits(&self) -> u64 {
        crate::linkmodel::model_bits(self.learning.payload_params)
    }
}

pub const PRESET_NAMES: [&str; 3] = ["bremen_delta", "saopaulo_delta", "bremen_star"];

/// Builtin scenario by name.
pub fn preset(name: &str) -> Option<ScenarioFile> {
    let (gs, pattern, inclination) = match name {
        "bremen_delta" => (GroundStation::bremen(), WalkerPattern::Delta, 60.0),
        "saopaulo_delta" => (GroundStation::sao_paulo(), WalkerPattern::Delta, 60.0),
        "bremen_star" => (GroundStation::bremen(), WalkerPattern::Star, 85.0),
        _ => return None,
    };
    Some(ScenarioFile {
        constellation: ConstellationSection {
            pattern,
            orbits: 5,
            sats_per_orbit: 8,
            altitude_m: 2.0e6,
            inclination_deg: inclination,
            phasing_factor: 1,
            epoch_offset_s: 0.0,
        },
        ground_station: GroundStationSection {
            name: gs.name,
            latitude_deg: gs.latitude_deg,
            longitude_deg: gs.longitude_deg,
            min_elevation_deg: 10.0,
        },
        link: LinkSection {
            tx_power_dbm: 40.0,
            antenna_gain_dbi: 32.13,
            bandwidth_hz: 500e6,
            carrier_hz: 20e9,
            system_temp_k: 354.0,
        },
        learning: LearningSection {
            classes: 10,
            features: 32,
            train_samples: 5000,
            test_samples: 1000,
            dirichlet_alpha: 0.5,
            learning_rate: 0.1,
            batch_size: 10,
            regularization: 0.0,
            epoch_s: 3600.0,
            payload_params: 122_570,
            class_separation: 0.06,
            noise_std: 0.2,
            weighting: Weighting::Raw,
        },
        simulation: SimulationSection {
            slots: 10,
            mode: Mode::Scheduled,
            seed: 42,
            horizon_s: 12.0 * 86_400.0,
            step_s: 10.0,
            strict_gu: false,
            fallback: false,
        },
    })
}
