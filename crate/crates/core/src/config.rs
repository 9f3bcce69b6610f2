//! Run configuration: JSON schema, defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentRecord, Behavior, SirState};
use crate::geom::{Aabb, Vec3};
use crate::loadbalance::LbMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{field}: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Clustering,
    Proliferation,
    Sir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Tcp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Open,
    #[default]
    Closed,
    Toroidal,
}

/// Per-rank runtime fed to the load balancer: interaction count of the last
/// interval, or thread CPU time spent in agent operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LbCost {
    #[default]
    Work,
    Measured,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Bounds {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub space: Bounds,
    pub interaction_radius: f64,
    pub box_factor: usize,
    pub reference_interval: u64,
    pub lb_interval: u64,
    pub batch_bytes: usize,
    pub seed: u64,
    pub rank_count: usize,
    pub boundary_condition: Boundary,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            space: Bounds {
                lo: [0.0; 3],
                hi: [26.0; 3],
            },
            interaction_radius: 1.5,
            box_factor: 2,
            reference_interval: 10,
            lb_interval: 10,
            batch_bytes: 64 * 1024,
            seed: 42,
            rank_count: 1,
            boundary_condition: Boundary::Closed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Population {
    pub count: u64,
    /// Target box for the initial agents; the whole space when absent.
    pub region: Option<Bounds>,
}

impl Default for Population {
    fn default() -> Self {
        Population {
            count: 10_000,
            region: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringParams {
    pub diameter: f64,
    pub k_rep: f64,
    pub k_adh: f64,
    pub r_cut: f64,
    pub max_step: f64,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        ClusteringParams {
            diameter: 1.0,
            k_rep: 0.5,
            k_adh: 0.1,
            r_cut: 1.5,
            max_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProliferationParams {
    pub initial_diameter: f64,
    pub max_diameter: f64,
    pub growth_rate: f64,
    pub k_rep: f64,
    pub max_step: f64,
}

impl Default for ProliferationParams {
    fn default() -> Self {
        ProliferationParams {
            initial_diameter: 1.2 * 2f64.powf(-1.0 / 3.0),
            max_diameter: 1.2,
            growth_rate: 0.02,
            k_rep: 0.2,
            max_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirParams {
    pub beta: f64,
    pub gamma: f64,
    pub step: f64,
    pub infection_radius: f64,
    pub initial_infected: f64,
    pub diameter: f64,
}

impl Default for SirParams {
    fn default() -> Self {
        SirParams {
            beta: 0.02,
            gamma: 0.03,
            step: 10.0,
            infection_radius: 1.5,
            initial_infected: 0.01,
            diameter: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub iterations: u64,
    pub sim: SimParams,
    pub population: Population,
    pub transport: TransportKind,
    pub roster: Option<PathBuf>,
    pub compress: bool,
    pub delta: bool,
    pub lb: LbMode,
    pub lb_cost: LbCost,
    pub out: Option<PathBuf>,
    pub clustering: ClusteringParams,
    pub proliferation: ProliferationParams,
    pub sir: SirParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Clustering,
            iterations: 100,
            sim: SimParams::default(),
            population: Population::default(),
            transport: TransportKind::Inproc,
            roster: None,
            compress: false,
            delta: false,
            lb: LbMode::None,
            lb_cost: LbCost::Work,
            out: None,
            clustering: ClusteringParams::default(),
            proliferation: ProliferationParams::default(),
            sir: SirParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.sim;
        let r = s.interaction_radius;
        if !(r > 0.0 && r.is_finite()) {
            return Err(invalid("sim.interaction_radius", "must be a positive number"));
        }
        if s.box_factor == 0 {
            return Err(invalid("sim.box_factor", "must be at least 1"));
        }
        if (0..3).any(|d| !(s.space.hi[d] - s.space.lo[d] >= r)) {
            return Err(invalid("sim.space", "every extent must be at least the interaction radius"));
        }
        if s.reference_interval == 0 {
            return Err(invalid("sim.reference_interval", "must be at least 1"));
        }
        if s.lb_interval == 0 {
            return Err(invalid("sim.lb_interval", "must be at least 1"));
        }
        if s.batch_bytes == 0 {
            return Err(invalid("sim.batch_bytes", "must be at least 1"));
        }
        if s.rank_count == 0 {
            return Err(invalid("sim.rank_count", "must be at least 1"));
        }
        match s.boundary_condition {
            Boundary::Closed => {}
            b => return Err(invalid("sim.boundary_condition", format!("{b:?} boundaries are not supported"))),
        }
        if self.delta && !self.compress {
            return Err(invalid("delta", "delta encoding requires compress"));
        }
        if self.transport == TransportKind::Tcp && self.roster.is_none() {
            return Err(invalid("roster", "tcp transport needs a roster file"));
        }
        if let Some(reg) = &self.population.region {
            if reg.aabb().intersection(&s.space.aabb()).is_none() {
                return Err(invalid("population.region", "does not intersect the space"));
            }
        }
        let boxes: usize = s
            .space
            .aabb()
            .extent()
            .iter()
            .map(|e| ((e / r).ceil() as usize).max(1).div_ceil(s.box_factor))
            .product();
        if s.rank_count > boxes {
            return Err(invalid("sim.rank_count", format!("more ranks than the {boxes} partition boxes")));
        }
        match self.model {
            ModelKind::Clustering => {
                let c = &self.clustering;
                if c.r_cut > r || c.diameter > r {
                    return Err(invalid("clustering.r_cut", "r_cut and diameter must not exceed the interaction radius"));
                }
                if !(c.diameter > 0.0) {
                    return Err(invalid("clustering.diameter", "must be positive"));
                }
            }
            ModelKind::Proliferation => {
                let p = &self.proliferation;
                if p.max_diameter > r {
                    return Err(invalid("proliferation.max_diameter", "must not exceed the interaction radius"));
                }
                if !(p.initial_diameter > 0.0 && p.initial_diameter < p.max_diameter) {
                    return Err(invalid("proliferation.initial_diameter", "must lie in (0, max_diameter)"));
                }
                if !(p.growth_rate > 0.0) {
                    return Err(invalid("proliferation.growth_rate", "must be positive"));
                }
            }
            ModelKind::Sir => {
                let p = &self.sir;
                if p.infection_radius > r {
                    return Err(invalid("sir.infection_radius", "must not exceed the interaction radius"));
                }
                if !(0.0..=1.0).contains(&p.beta) || !(0.0..=1.0).contains(&p.gamma) {
                    return Err(invalid("sir.beta", "beta and gamma are probabilities"));
                }
                if !(0.0..=1.0).contains(&p.initial_infected) {
                    return Err(invalid("sir.initial_infected", "must be a fraction"));
                }
            }
        }
        Ok(())
    }

    /// The initial agent for population index `i`, given a uniform draw `u`.
    pub fn make_agent(&self, position: Vec3, u: f64) -> AgentRecord {
        match self.model {
            ModelKind::Clustering => {
                let c = &self.clustering;
                AgentRecord::cell(position, c.diameter, (u < 0.5) as u32).with_behavior(Behavior::ClusterMechanics {
                    k_rep: c.k_rep,
                    k_adh: c.k_adh,
                    r_cut: c.r_cut,
                    max_step: c.max_step,
                })
            }
            ModelKind::Proliferation => {
                let p = &self.proliferation;
                AgentRecord::cell(position, p.initial_diameter, 0)
                    .with_behavior(Behavior::GrowDivide {
                        rate: p.growth_rate,
                        max_diameter: p.max_diameter,
                    })
                    .with_behavior(Behavior::ClusterMechanics {
                        k_rep: p.k_rep,
                        k_adh: 0.0,
                        r_cut: 0.0,
                        max_step: p.max_step,
                    })
            }
            ModelKind::Sir => {
                let p = &self.sir;
                let state = if u < p.initial_infected {
                    SirState::Infected
                } else {
                    SirState::Susceptible
                };
                AgentRecord::person(position, p.diameter, state)
                    .with_behavior(Behavior::Infection {
                        beta: p.beta,
                        radius: p.infection_radius,
                    })
                    .with_behavior(Behavior::Recovery { gamma: p.gamma })
                    .with_behavior(Behavior::RandomWalk { step: p.step })
            }
        }
    }
}
