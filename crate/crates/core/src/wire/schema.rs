//! The agent message schema and its typed encoder/view.
//!
//! The typed route writes exactly the bytes the generic [`Node`] route
//! produces for the same tree (checked in tests), without building the tree.

use std::rc::Rc;
use std::sync::{Arc, OnceLock};

use super::encode::{WireEncode, Writer};
use super::node::{FieldValue, Node, SeqValue, Value};
use super::registry::{ClassId, DefKind, Registry, ScalarKind, TypeDef, CLASS_PREFIX};
use super::{DecodedMessage, NodeRef, WireError};
use crate::agent::{AgentRecord, Behavior, Payload, SirState};
use crate::geom::Vec3;
use crate::ids::GlobalAgentId;

pub const AGENT_BATCH: ClassId = 0;
pub const CELL: ClassId = 1;
pub const CLUSTER_MECHANICS: ClassId = 2;
pub const GROW_DIVIDE: ClassId = 3;
pub const INFECTION: ClassId = 4;
pub const PERIODIC: ClassId = 5;
pub const RANDOM_WALK: ClassId = 6;
pub const RECOVERY: ClassId = 7;
pub const SIR_PERSON: ClassId = 8;

pub mod field {
    pub const ITERATION: usize = 0;
    pub const AGENTS: usize = 1;

    pub const GID_ORIGIN: usize = 0;
    pub const GID_COUNTER: usize = 1;
    pub const POSITION: usize = 2;
    pub const DIAMETER: usize = 3;
    pub const BEHAVIORS: usize = 4;
    pub const MOTHER: usize = 5;
    pub const CELL_TYPE: usize = 6;
    pub const GENERATION: usize = 7;
    pub const SIR_STATE: usize = 6;

    pub const PERIODIC_EVERY: usize = 0;
    pub const PERIODIC_INNER: usize = 1;
}

const AGENT_COMMON: usize = 4 + 8 + 24 + 8 + 8 + 16;
const CELL_SIZE: usize = AGENT_COMMON + 8;
const SIR_SIZE: usize = AGENT_COMMON + 1;
const NO_ORIGIN: u32 = u32::MAX;

fn agent_def(name: &str) -> TypeDef {
    use DefKind::*;
    TypeDef::new(name)
        .derives("Agent")
        .field("gid_origin", Scalar(ScalarKind::U32))
        .field("gid_counter", Scalar(ScalarKind::U64))
        .field("position", Array(ScalarKind::F64, 3))
        .field("diameter", Scalar(ScalarKind::F64))
        .field("behaviors", SeqPoly("Behavior".into()))
        .field("mother", AgentPtr)
}

fn behavior_def(name: &str, fields: &[&str]) -> TypeDef {
    fields.iter().fold(TypeDef::new(name).derives("Behavior"), |t, f| {
        t.field(f, DefKind::Scalar(ScalarKind::F64))
    })
}

/// The registry shared by every rank of a run.
pub fn agent_registry() -> Arc<Registry> {
    static REG: OnceLock<Arc<Registry>> = OnceLock::new();
    REG.get_or_init(|| {
        use DefKind::*;
        let defs = vec![
            TypeDef::new("AgentBatch")
                .field("iteration", Scalar(ScalarKind::U64))
                .field("agents", SeqPoly("Agent".into())),
            agent_def("Cell")
                .field("cell_type", Scalar(ScalarKind::U32))
                .field("generation", Scalar(ScalarKind::U32)),
            agent_def("SirPerson").field("state", Scalar(ScalarKind::U8)),
            behavior_def("ClusterMechanics", &["k_rep", "k_adh", "r_cut", "max_step"]),
            behavior_def("GrowDivide", &["rate", "max_diameter"]),
            behavior_def("Infection", &["beta", "radius"]),
            behavior_def("Recovery", &["gamma"]),
            behavior_def("RandomWalk", &["step"]),
            TypeDef::new("Periodic")
                .derives("Behavior")
                .field("every", Scalar(ScalarKind::U32))
                .field("inner", Poly("Behavior".into())),
        ];
        Arc::new(Registry::build(defs).expect("agent schema"))
    })
    .clone()
}

/// Read access to an agent, whether owned or still backed by a message.
pub trait AgentLike {
    fn global_id(&self) -> Option<GlobalAgentId>;
    fn position(&self) -> Vec3;
    fn diameter(&self) -> f64;
    fn payload(&self) -> Payload;
    fn mother(&self) -> Option<GlobalAgentId>;
    fn behavior_count(&self) -> usize;
    fn for_each_behavior(&self, f: &mut dyn FnMut(&Behavior));

    fn id(&self) -> GlobalAgentId {
        self.global_id().expect("agent has no global id")
    }
}

impl AgentLike for AgentRecord {
    fn global_id(&self) -> Option<GlobalAgentId> {
        self.global_id
    }
    fn position(&self) -> Vec3 {
        self.position
    }
    fn diameter(&self) -> f64 {
        self.diameter
    }
    fn payload(&self) -> Payload {
        self.payload
    }
    fn mother(&self) -> Option<GlobalAgentId> {
        self.mother
    }
    fn behavior_count(&self) -> usize {
        self.behaviors.len()
    }
    fn for_each_behavior(&self, f: &mut dyn FnMut(&Behavior)) {
        self.behaviors.iter().for_each(f)
    }
}

impl<T: AgentLike + ?Sized> AgentLike for &T {
    fn global_id(&self) -> Option<GlobalAgentId> {
        (**self).global_id()
    }
    fn position(&self) -> Vec3 {
        (**self).position()
    }
    fn diameter(&self) -> f64 {
        (**self).diameter()
    }
    fn payload(&self) -> Payload {
        (**self).payload()
    }
    fn mother(&self) -> Option<GlobalAgentId> {
        (**self).mother()
    }
    fn behavior_count(&self) -> usize {
        (**self).behavior_count()
    }
    fn for_each_behavior(&self, f: &mut dyn FnMut(&Behavior)) {
        (**self).for_each_behavior(f)
    }
}

fn behavior_class(b: &Behavior) -> ClassId {
    match b {
        Behavior::ClusterMechanics { .. } => CLUSTER_MECHANICS,
        Behavior::GrowDivide { .. } => GROW_DIVIDE,
        Behavior::Infection { .. } => INFECTION,
        Behavior::Recovery { .. } => RECOVERY,
        Behavior::RandomWalk { .. } => RANDOM_WALK,
        Behavior::Periodic { .. } => PERIODIC,
    }
}

/// Bytes of a behavior subtree, class prefix included.
fn behavior_size(b: &Behavior) -> usize {
    CLASS_PREFIX
        + match b {
            Behavior::ClusterMechanics { .. } => 32,
            Behavior::GrowDivide { .. } | Behavior::Infection { .. } => 16,
            Behavior::Recovery { .. } | Behavior::RandomWalk { .. } => 8,
            Behavior::Periodic { inner, .. } => 12 + inner.as_deref().map_or(0, behavior_size),
        }
}

fn write_behavior(b: &Behavior, w: &mut Writer<'_>) {
    w.put_u32(behavior_class(b));
    match b {
        Behavior::ClusterMechanics {
            k_rep,
            k_adh,
            r_cut,
            max_step,
        } => [k_rep, k_adh, r_cut, max_step].into_iter().for_each(|v| w.put_f64(*v)),
        Behavior::GrowDivide { rate, max_diameter } => {
            w.put_f64(*rate);
            w.put_f64(*max_diameter);
        }
        Behavior::Infection { beta, radius } => {
            w.put_f64(*beta);
            w.put_f64(*radius);
        }
        Behavior::Recovery { gamma } => w.put_f64(*gamma),
        Behavior::RandomWalk { step } => w.put_f64(*step),
        Behavior::Periodic { every, inner } => {
            w.put_u32(*every);
            w.put_ref(inner.is_some());
            if let Some(i) = inner {
                write_behavior(i, w);
            }
        }
    }
}

/// Bytes of an agent subtree, class prefix included.
pub fn agent_size<A: AgentLike + ?Sized>(a: &A) -> usize {
    let fixed = match a.payload() {
        Payload::Cell { .. } => CELL_SIZE,
        Payload::Sir { .. } => SIR_SIZE,
    };
    let mut total = CLASS_PREFIX + fixed;
    let n = a.behavior_count();
    if n > 0 {
        total += 8 + 8 * n;
        a.for_each_behavior(&mut |b| total += behavior_size(b));
    }
    total
}

pub fn write_agent<A: AgentLike + ?Sized>(a: &A, w: &mut Writer<'_>) {
    let payload = a.payload();
    w.put_u32(match payload {
        Payload::Cell { .. } => CELL,
        Payload::Sir { .. } => SIR_PERSON,
    });
    match a.global_id() {
        Some(id) => {
            w.put_u32(id.origin_rank);
            w.put_u64(id.counter);
        }
        None => {
            w.put_u32(NO_ORIGIN);
            w.put_u64(0);
        }
    }
    for x in a.position().0 {
        w.put_f64(x);
    }
    w.put_f64(a.diameter());
    let n = a.behavior_count();
    w.put_ref(n > 0);
    match a.mother() {
        Some(m) => {
            w.put_u64(m.origin_rank as u64);
            w.put_u64(m.counter);
        }
        None => {
            w.put_u64(u64::MAX);
            w.put_u64(0);
        }
    }
    match payload {
        Payload::Cell {
            cell_type,
            generation,
        } => {
            w.put_u32(cell_type);
            w.put_u32(generation);
        }
        Payload::Sir { state } => w.put_u8(state as u8),
    }
    if n > 0 {
        w.put_u64(n as u64);
        for _ in 0..n {
            w.put_ref(true);
        }
        a.for_each_behavior(&mut |b| write_behavior(b, w));
    }
}

/// An `AgentBatch` root over a slot list; `None` slots encode as null
/// references.
pub struct BatchEncoder<'a, A> {
    pub iteration: u64,
    pub slots: &'a [Option<A>],
}

impl<A: AgentLike> WireEncode for BatchEncoder<'_, A> {
    fn root_class(&self, _: &Registry) -> Result<ClassId, WireError> {
        Ok(AGENT_BATCH)
    }

    fn measure(&self, _: &Registry) -> Result<usize, WireError> {
        let mut total = 16;
        if !self.slots.is_empty() {
            total += 8 + 8 * self.slots.len();
            total += self.slots.iter().flatten().map(|a| agent_size(a)).sum::<usize>();
        }
        Ok(total)
    }

    fn write_body(&self, _: &Registry, w: &mut Writer<'_>) -> Result<(), WireError> {
        w.put_u64(self.iteration);
        w.put_ref(!self.slots.is_empty());
        if !self.slots.is_empty() {
            w.put_u64(self.slots.len() as u64);
            for s in self.slots {
                w.put_ref(s.is_some());
            }
            for a in self.slots.iter().flatten() {
                write_agent(a, w);
            }
        }
        Ok(())
    }
}

/// Encodes one agent subtree (class prefix included) on its own.
pub fn encode_agent_subtree<A: AgentLike + ?Sized>(a: &A, out: &mut Vec<u8>) {
    out.reserve(agent_size(a));
    write_agent(a, &mut Writer::new(out));
}

/// An agent read in place from a decoded message.
#[derive(Clone, Copy)]
pub struct AgentView<'m> {
    pub msg: &'m DecodedMessage,
    pub node: NodeRef,
}

impl<'m> AgentView<'m> {
    pub fn new(msg: &'m DecodedMessage, node: NodeRef) -> Self {
        AgentView { msg, node }
    }

    pub fn to_record(&self) -> AgentRecord {
        let mut behaviors = Vec::with_capacity(self.behavior_count());
        self.for_each_behavior(&mut |b| behaviors.push(b.clone()));
        AgentRecord {
            global_id: self.global_id(),
            position: self.position(),
            diameter: self.diameter(),
            payload: self.payload(),
            behaviors,
            mother: self.mother(),
        }
    }
}

fn read_behavior(msg: &DecodedMessage, n: NodeRef) -> Behavior {
    let f = |i| msg.f64(n, i);
    match n.class {
        CLUSTER_MECHANICS => Behavior::ClusterMechanics {
            k_rep: f(0),
            k_adh: f(1),
            r_cut: f(2),
            max_step: f(3),
        },
        GROW_DIVIDE => Behavior::GrowDivide {
            rate: f(0),
            max_diameter: f(1),
        },
        INFECTION => Behavior::Infection {
            beta: f(0),
            radius: f(1),
        },
        RECOVERY => Behavior::Recovery { gamma: f(0) },
        RANDOM_WALK => Behavior::RandomWalk { step: f(0) },
        PERIODIC => Behavior::Periodic {
            every: msg.u32(n, field::PERIODIC_EVERY),
            inner: msg
                .child(n, field::PERIODIC_INNER)
                .map(|c| Box::new(read_behavior(msg, c))),
        },
        c => panic!("class {c} is not a behavior"),
    }
}

impl AgentLike for AgentView<'_> {
    fn global_id(&self) -> Option<GlobalAgentId> {
        let origin = self.msg.u32(self.node, field::GID_ORIGIN);
        (origin != NO_ORIGIN).then(|| {
            let counter = self.msg.scalar(self.node, field::GID_COUNTER).as_u64().unwrap();
            GlobalAgentId::new(origin, counter)
        })
    }
    fn position(&self) -> Vec3 {
        Vec3(self.msg.array_f64::<3>(self.node, field::POSITION))
    }
    fn diameter(&self) -> f64 {
        self.msg.f64(self.node, field::DIAMETER)
    }
    fn payload(&self) -> Payload {
        match self.node.class {
            CELL => Payload::Cell {
                cell_type: self.msg.u32(self.node, field::CELL_TYPE),
                generation: self.msg.u32(self.node, field::GENERATION),
            },
            SIR_PERSON => Payload::Sir {
                state: SirState::from_u8(self.msg.u8(self.node, field::SIR_STATE)).unwrap_or(SirState::Susceptible),
            },
            c => panic!("class {c} is not an agent"),
        }
    }
    fn mother(&self) -> Option<GlobalAgentId> {
        self.msg.agent_ptr(self.node, field::MOTHER)
    }
    fn behavior_count(&self) -> usize {
        self.msg.seq_len(self.node, field::BEHAVIORS)
    }
    fn for_each_behavior(&self, f: &mut dyn FnMut(&Behavior)) {
        for i in 0..self.behavior_count() {
            if let Some(b) = self.msg.seq_node(self.node, field::BEHAVIORS, i) {
                f(&read_behavior(self.msg, b));
            }
        }
    }
}

/// In-place updates of a message-backed agent.
pub fn set_position(msg: &mut DecodedMessage, node: NodeRef, p: Vec3) {
    msg.set_array_f64(node, field::POSITION, p.0);
}

pub fn set_diameter(msg: &mut DecodedMessage, node: NodeRef, d: f64) {
    msg.set_f64(node, field::DIAMETER, d);
}

pub fn set_payload(msg: &mut DecodedMessage, node: NodeRef, p: Payload) {
    match (node.class, p) {
        (
            CELL,
            Payload::Cell {
                cell_type,
                generation,
            },
        ) => {
            msg.set_scalar(node, field::CELL_TYPE, Value::U32(cell_type));
            msg.set_scalar(node, field::GENERATION, Value::U32(generation));
        }
        (SIR_PERSON, Payload::Sir { state }) => msg.set_scalar(node, field::SIR_STATE, Value::U8(state as u8)),
        _ => panic!("payload kind does not match class {}", node.class),
    }
}

fn behavior_node(b: &Behavior) -> Rc<Node> {
    let f = |v: &f64| FieldValue::Scalar(Value::F64(*v));
    let fields = match b {
        Behavior::ClusterMechanics {
            k_rep,
            k_adh,
            r_cut,
            max_step,
        } => vec![f(k_rep), f(k_adh), f(r_cut), f(max_step)],
        Behavior::GrowDivide { rate, max_diameter } => vec![f(rate), f(max_diameter)],
        Behavior::Infection { beta, radius } => vec![f(beta), f(radius)],
        Behavior::Recovery { gamma } => vec![f(gamma)],
        Behavior::RandomWalk { step } => vec![f(step)],
        Behavior::Periodic { every, inner } => vec![
            FieldValue::Scalar(Value::U32(*every)),
            FieldValue::Ref(inner.as_deref().map(behavior_node)),
        ],
    };
    Node::leaf(behavior_class(b), fields)
}

/// The generic tree for an agent record.
pub fn record_to_node(a: &AgentRecord) -> Rc<Node> {
    let (origin, counter) = a.global_id.map_or((NO_ORIGIN, 0), |g| (g.origin_rank, g.counter));
    let mut fields = vec![
        FieldValue::Scalar(Value::U32(origin)),
        FieldValue::Scalar(Value::U64(counter)),
        FieldValue::Array(a.position.0.iter().map(|x| Value::F64(*x)).collect()),
        FieldValue::Scalar(Value::F64(a.diameter)),
        FieldValue::Seq(SeqValue::Nodes(a.behaviors.iter().map(|b| Some(behavior_node(b))).collect())),
        FieldValue::AgentPtr(a.mother),
    ];
    let class = match a.payload {
        Payload::Cell {
            cell_type,
            generation,
        } => {
            fields.push(FieldValue::Scalar(Value::U32(cell_type)));
            fields.push(FieldValue::Scalar(Value::U32(generation)));
            CELL
        }
        Payload::Sir { state } => {
            fields.push(FieldValue::Scalar(Value::U8(state as u8)));
            SIR_PERSON
        }
    };
    Node::leaf(class, fields)
}

pub fn batch_to_node(iteration: u64, slots: &[Option<&AgentRecord>]) -> Node {
    Node::new(
        AGENT_BATCH,
        vec![
            FieldValue::Scalar(Value::U64(iteration)),
            FieldValue::Seq(SeqValue::Nodes(slots.iter().map(|s| s.map(record_to_node)).collect())),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_ids_match_constants() {
        let reg = agent_registry();
        for (name, id) in [
            ("AgentBatch", AGENT_BATCH),
            ("Cell", CELL),
            ("ClusterMechanics", CLUSTER_MECHANICS),
            ("GrowDivide", GROW_DIVIDE),
            ("Infection", INFECTION),
            ("Periodic", PERIODIC),
            ("RandomWalk", RANDOM_WALK),
            ("Recovery", RECOVERY),
            ("SirPerson", SIR_PERSON),
        ] {
            assert_eq!(reg.id_of(name), Some(id), "{name}");
        }
        assert_eq!(reg.get(CELL).unwrap().size, CELL_SIZE);
        assert_eq!(reg.get(SIR_PERSON).unwrap().size, SIR_SIZE);
        let cell = reg.get(CELL).unwrap();
        assert_eq!(cell.field("behaviors"), Some(field::BEHAVIORS));
        assert_eq!(cell.field("generation"), Some(field::GENERATION));
        assert_eq!(reg.get(SIR_PERSON).unwrap().field("state"), Some(field::SIR_STATE));
    }
}
