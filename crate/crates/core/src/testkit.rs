//! Random generators shared by the test suites and the self-test command.

use std::rc::Rc;

use crate::agent::{AgentRecord, Behavior, Payload, SirState};
use crate::geom::Vec3;
use crate::ids::GlobalAgentId;
use crate::rng::mix;
use crate::wire::{
    ClassId, DefKind, ElemKind, FieldKind, FieldValue, Node, Registry, ScalarKind, SeqValue, Target, TypeDef, Value,
};

/// Small seeded generator for fuzz inputs.
#[derive(Debug, Clone)]
pub struct FuzzRng(u64);

impl FuzzRng {
    pub fn new(seed: u64) -> Self {
        FuzzRng(mix(seed ^ 0x5eed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix(self.0)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Any finite or non-finite float bit pattern, biased toward ordinary values.
    pub fn f64_any(&mut self) -> f64 {
        if self.chance(0.1) {
            f64::from_bits(self.next_u64())
        } else {
            (self.unit() - 0.5) * 1e3
        }
    }
}

/// A schema covering every field kind, for the generic fuzzer.
pub fn fuzz_registry() -> Registry {
    use DefKind::*;
    Registry::build(vec![
        TypeDef::new("Root")
            .field("tag", Scalar(ScalarKind::U8))
            .field("items", SeqPoly("Item".into()))
            .field("extra", Ref("Leaf".into()))
            .field("any", Poly("Item".into())),
        TypeDef::new("Leaf")
            .field("v", Scalar(ScalarKind::I64))
            .field("xs", SeqScalar(ScalarKind::F64)),
        TypeDef::new("ItemA")
            .derives("Item")
            .field("id", Scalar(ScalarKind::U64))
            .field("pos", Array(ScalarKind::F64, 3))
            .field("children", SeqPoly("Item".into()))
            .field("who", AgentPtr),
        TypeDef::new("ItemB")
            .derives("Item")
            .field("n", Scalar(ScalarKind::U32))
            .field("leaves", SeqRef("Leaf".into()))
            .field("next", Poly("Item".into())),
        TypeDef::new("ItemC").derives("Item").field("b", Scalar(ScalarKind::U8)),
    ])
    .expect("fuzz schema")
}

fn random_scalar(k: ScalarKind, r: &mut FuzzRng) -> Value {
    match k {
        ScalarKind::U8 => Value::U8(r.next_u64() as u8),
        ScalarKind::U32 => Value::U32(r.next_u64() as u32),
        ScalarKind::U64 => Value::U64(r.next_u64()),
        ScalarKind::I64 => Value::I64(r.next_u64() as i64),
        ScalarKind::F64 => Value::F64(r.f64_any()),
    }
}

fn pick_class(reg: &Registry, t: &Target, r: &mut FuzzRng) -> ClassId {
    match t {
        Target::Exact(c) => *c,
        Target::Derived(b) => {
            let ds = reg.derived_from(b);
            ds[r.below(ds.len())]
        }
    }
}

/// Random tree of `class`, at most `depth` levels of children, sequences of
/// at most `max_seq` elements.
pub fn random_node(reg: &Registry, class: ClassId, depth: usize, max_seq: usize, r: &mut FuzzRng) -> Node {
    let desc = reg.get(class).expect("class");
    let fields = desc
        .fields
        .iter()
        .map(|f| match &f.kind {
            FieldKind::Scalar(k) => FieldValue::Scalar(random_scalar(*k, r)),
            FieldKind::Array(k, n) => FieldValue::Array((0..*n).map(|_| random_scalar(*k, r)).collect()),
            FieldKind::Seq(ElemKind::Scalar(k)) => {
                let n = r.below(max_seq + 1);
                FieldValue::Seq(SeqValue::Scalars((0..n).map(|_| random_scalar(*k, r)).collect()))
            }
            FieldKind::Seq(ElemKind::Ref(t)) => {
                let n = if depth == 0 { 0 } else { r.below(max_seq + 1) };
                FieldValue::Seq(SeqValue::Nodes(
                    (0..n)
                        .map(|_| {
                            (!r.chance(0.15)).then(|| {
                                let c = pick_class(reg, t, r);
                                Rc::new(random_node(reg, c, depth - 1, max_seq / 2, r))
                            })
                        })
                        .collect(),
                ))
            }
            FieldKind::Ref(t) => FieldValue::Ref((depth > 0 && r.chance(0.6)).then(|| {
                let c = pick_class(reg, t, r);
                Rc::new(random_node(reg, c, depth - 1, max_seq / 2, r))
            })),
            FieldKind::AgentPtr => FieldValue::AgentPtr(
                r.chance(0.5)
                    .then(|| GlobalAgentId::new(r.next_u64() as u32 >> 1, r.next_u64() >> 1)),
            ),
        })
        .collect();
    Node::new(class, fields)
}

pub fn random_behavior(depth: usize, r: &mut FuzzRng) -> Behavior {
    let k = if depth == 0 { r.below(5) } else { r.below(6) };
    match k {
        0 => Behavior::ClusterMechanics {
            k_rep: r.f64_any(),
            k_adh: r.f64_any(),
            r_cut: r.f64_any(),
            max_step: r.f64_any(),
        },
        1 => Behavior::GrowDivide {
            rate: r.f64_any(),
            max_diameter: r.f64_any(),
        },
        2 => Behavior::Infection {
            beta: r.unit(),
            radius: r.f64_any(),
        },
        3 => Behavior::Recovery { gamma: r.unit() },
        4 => Behavior::RandomWalk { step: r.f64_any() },
        _ => Behavior::Periodic {
            every: r.next_u64() as u32,
            inner: r.chance(0.7).then(|| Box::new(random_behavior(depth - 1, r))),
        },
    }
}

/// Random agent; behavior trees nest at most `depth` levels.
pub fn random_agent(id: GlobalAgentId, depth: usize, r: &mut FuzzRng) -> AgentRecord {
    let payload = if r.chance(0.5) {
        Payload::Cell {
            cell_type: r.below(2) as u32,
            generation: r.next_u64() as u32,
        }
    } else {
        Payload::Sir {
            state: SirState::from_u8(r.below(3) as u8).unwrap(),
        }
    };
    let nb = r.below(5);
    AgentRecord {
        global_id: Some(id),
        position: Vec3::new(r.f64_any(), r.f64_any(), r.f64_any()),
        diameter: r.unit() * 10.0 + 0.1,
        payload,
        behaviors: (0..nb).map(|_| random_behavior(depth.saturating_sub(1), r)).collect(),
        mother: r.chance(0.3).then(|| GlobalAgentId::new(r.below(8) as u32, r.next_u64() >> 1)),
    }
}

/// O(n²)-style reference answers for grid queries.
pub mod brute {
    use crate::geom::{Aabb, Vec3};
    use crate::grid::GridEntry;
    use crate::ids::GlobalAgentId;

    pub fn neighbors<K: Copy>(
        all: &[GridEntry<K>],
        center: Vec3,
        radius: f64,
        exclude: Option<GlobalAgentId>,
    ) -> Vec<GlobalAgentId> {
        let mut v: Vec<GlobalAgentId> = all
            .iter()
            .filter(|e| Some(e.gid) != exclude)
            .filter(|e| {
                let d = e.pos - center;
                d.0[0] * d.0[0] + d.0[1] * d.0[1] + d.0[2] * d.0[2] <= radius * radius
            })
            .map(|e| e.gid)
            .collect();
        v.sort();
        v
    }

    pub fn region<K: Copy>(all: &[GridEntry<K>], b: &Aabb) -> Vec<GlobalAgentId> {
        let mut v: Vec<GlobalAgentId> = all
            .iter()
            .filter(|e| !e.aura && (0..3).all(|d| b.lo[d] <= e.pos.0[d] && e.pos.0[d] < b.hi[d]))
            .map(|e| e.gid)
            .collect();
        v.sort();
        v
    }
}

/// Random grid configurations used by the neighbor-query oracle checks.
pub fn random_entries(n: usize, bounds: &crate::geom::Aabb, r: &mut FuzzRng) -> Vec<crate::grid::GridEntry<u32>> {
    (0..n)
        .map(|i| crate::grid::GridEntry {
            key: i as u32,
            gid: GlobalAgentId::new(r.below(4) as u32, i as u64),
            pos: Vec3(std::array::from_fn(|d| bounds.lo[d] + r.unit() * (bounds.hi[d] - bounds.lo[d]))),
            diameter: 1.0,
            tag: 0,
            aura: r.chance(0.2),
        })
        .collect()
}
