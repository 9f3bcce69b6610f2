//! Agent records and the closed set of behaviors.

use crate::geom::Vec3;
use crate::ids::GlobalAgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SirState {
    Susceptible = 0,
    Infected = 1,
    Recovered = 2,
}

impl SirState {
    pub fn from_u8(v: u8) -> Option<SirState> {
        match v {
            0 => Some(SirState::Susceptible),
            1 => Some(SirState::Infected),
            2 => Some(SirState::Recovered),
            _ => None,
        }
    }
}

/// Kind-specific agent state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    Cell { cell_type: u32, generation: u32 },
    Sir { state: SirState },
}

impl Payload {
    /// Small integer summarizing the payload, carried alongside neighbor data:
    /// the cell type for cells, the SIR state for persons.
    pub fn tag(&self) -> u32 {
        match *self {
            Payload::Cell { cell_type, .. } => cell_type,
            Payload::Sir { state } => state as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    /// Pairwise repulsion/adhesion between cells.
    ClusterMechanics {
        k_rep: f64,
        k_adh: f64,
        r_cut: f64,
        max_step: f64,
    },
    /// Diameter growth followed by division at `max_diameter`.
    GrowDivide { rate: f64, max_diameter: f64 },
    /// Susceptible agents catch the infection from infected neighbors.
    Infection { beta: f64, radius: f64 },
    /// Infected agents recover with a fixed per-iteration probability.
    Recovery { gamma: f64 },
    /// Step of fixed length in a uniformly random direction.
    RandomWalk { step: f64 },
    /// Runs `inner` on iterations divisible by `every`.
    Periodic { every: u32, inner: Option<Box<Behavior>> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRecord {
    pub global_id: Option<GlobalAgentId>,
    pub position: Vec3,
    pub diameter: f64,
    pub payload: Payload,
    pub behaviors: Vec<Behavior>,
    /// Reference to another agent, serialized by id only.
    pub mother: Option<GlobalAgentId>,
}

impl AgentRecord {
    pub fn cell(position: Vec3, diameter: f64, cell_type: u32) -> Self {
        AgentRecord {
            global_id: None,
            position,
            diameter,
            payload: Payload::Cell {
                cell_type,
                generation: 0,
            },
            behaviors: Vec::new(),
            mother: None,
        }
    }

    pub fn person(position: Vec3, diameter: f64, state: SirState) -> Self {
        AgentRecord {
            global_id: None,
            position,
            diameter,
            payload: Payload::Sir { state },
            behaviors: Vec::new(),
            mother: None,
        }
    }

    pub fn with_behavior(mut self, b: Behavior) -> Self {
        self.behaviors.push(b);
        self
    }

    pub fn with_id(mut self, id: GlobalAgentId) -> Self {
        self.global_id = Some(id);
        self
    }

    /// Global id; panics if none has been assigned yet.
    pub fn id(&self) -> GlobalAgentId {
        self.global_id.expect("agent has no global id")
    }

    /// Exact equality including float bit patterns.
    pub fn bitwise_eq(&self, other: &AgentRecord) -> bool {
        self.global_id == other.global_id
            && self.position.to_bits() == other.position.to_bits()
            && self.diameter.to_bits() == other.diameter.to_bits()
            && payload_bits(&self.payload) == payload_bits(&other.payload)
            && self.mother == other.mother
            && self.behaviors.len() == other.behaviors.len()
            && self
                .behaviors
                .iter()
                .zip(&other.behaviors)
                .all(|(a, b)| behavior_bits(a) == behavior_bits(b))
    }
}

fn payload_bits(p: &Payload) -> (u8, u32, u32) {
    match *p {
        Payload::Cell {
            cell_type,
            generation,
        } => (0, cell_type, generation),
        Payload::Sir { state } => (1, state as u32, 0),
    }
}

fn behavior_bits(b: &Behavior) -> Vec<u64> {
    match b {
        Behavior::ClusterMechanics {
            k_rep,
            k_adh,
            r_cut,
            max_step,
        } => vec![0, k_rep.to_bits(), k_adh.to_bits(), r_cut.to_bits(), max_step.to_bits()],
        Behavior::GrowDivide { rate, max_diameter } => {
            vec![1, rate.to_bits(), max_diameter.to_bits()]
        }
        Behavior::Infection { beta, radius } => vec![2, beta.to_bits(), radius.to_bits()],
        Behavior::Recovery { gamma } => vec![3, gamma.to_bits()],
        Behavior::RandomWalk { step } => vec![4, step.to_bits()],
        Behavior::Periodic { every, inner } => {
            let mut v = vec![5, *every as u64];
            if let Some(i) = inner {
                v.push(1);
                v.extend(behavior_bits(i));
            }
            v
        }
    }
}
