//! Dynamically typed object trees, described by a [`Registry`].
//!
//! This is the generic route into the wire format: any registered type can
//! be built, encoded and compared without hand-written IO functions. Floats
//! compare by bit pattern.

use std::rc::Rc;

use super::registry::{ClassId, ElemKind, FieldKind, Registry, ScalarKind, Target};
use super::WireError;
use crate::ids::GlobalAgentId;

#[derive(Debug, Clone, Copy)]
pub enum Value {
    U8(u8),
    U32(u32),
    U64(u64),
    I64(i64),
    F64(f64),
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::U8(a), Value::U8(b)) => a == b,
            (Value::U32(a), Value::U32(b)) => a == b,
            (Value::U64(a), Value::U64(b)) => a == b,
            (Value::I64(a), Value::I64(b)) => a == b,
            (Value::F64(a), Value::F64(b)) => a.to_bits() == b.to_bits(),
            _ => false,
        }
    }
}

impl Value {
    pub fn kind(&self) -> ScalarKind {
        match self {
            Value::U8(_) => ScalarKind::U8,
            Value::U32(_) => ScalarKind::U32,
            Value::U64(_) => ScalarKind::U64,
            Value::I64(_) => ScalarKind::I64,
            Value::F64(_) => ScalarKind::F64,
        }
    }

    pub fn write_le(&self, out: &mut Vec<u8>) {
        match *self {
            Value::U8(v) => out.push(v),
            Value::U32(v) => out.extend_from_slice(&v.to_le_bytes()),
            Value::U64(v) => out.extend_from_slice(&v.to_le_bytes()),
            Value::I64(v) => out.extend_from_slice(&v.to_le_bytes()),
            Value::F64(v) => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    pub fn read_le(kind: ScalarKind, b: &[u8]) -> Value {
        match kind {
            ScalarKind::U8 => Value::U8(b[0]),
            ScalarKind::U32 => Value::U32(u32::from_le_bytes(b[..4].try_into().unwrap())),
            ScalarKind::U64 => Value::U64(u64::from_le_bytes(b[..8].try_into().unwrap())),
            ScalarKind::I64 => Value::I64(i64::from_le_bytes(b[..8].try_into().unwrap())),
            ScalarKind::F64 => Value::F64(f64::from_le_bytes(b[..8].try_into().unwrap())),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            Value::U8(v) => Some(v as u64),
            Value::U32(v) => Some(v as u64),
            Value::U64(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SeqValue {
    Scalars(Vec<Value>),
    Nodes(Vec<Option<Rc<Node>>>),
}

impl SeqValue {
    pub fn len(&self) -> usize {
        match self {
            SeqValue::Scalars(v) => v.len(),
            SeqValue::Nodes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldValue {
    Scalar(Value),
    Array(Vec<Value>),
    Seq(SeqValue),
    Ref(Option<Rc<Node>>),
    AgentPtr(Option<GlobalAgentId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub class: ClassId,
    pub fields: Vec<FieldValue>,
}

impl Node {
    pub fn new(class: ClassId, fields: Vec<FieldValue>) -> Self {
        Node { class, fields }
    }

    pub fn leaf(class: ClassId, fields: Vec<FieldValue>) -> Rc<Node> {
        Rc::new(Node { class, fields })
    }

    /// Verifies that this tree matches the registry's layouts.
    pub fn validate(&self, reg: &Registry) -> Result<(), WireError> {
        let desc = reg.get(self.class).map_err(|_| WireError::UnregisteredType(format!("class {}", self.class)))?;
        if desc.fields.len() != self.fields.len() {
            return Err(WireError::ShapeMismatch(format!(
                "{} has {} fields, value has {}",
                desc.name,
                desc.fields.len(),
                self.fields.len()
            )));
        }
        for (f, v) in desc.fields.iter().zip(&self.fields) {
            let bad = || WireError::ShapeMismatch(format!("{}.{}", desc.name, f.name));
            match (&f.kind, v) {
                (FieldKind::Scalar(k), FieldValue::Scalar(x)) if x.kind() == *k => {}
                (FieldKind::Array(k, n), FieldValue::Array(xs)) if xs.len() == *n && xs.iter().all(|x| x.kind() == *k) => {}
                (FieldKind::Seq(ElemKind::Scalar(k)), FieldValue::Seq(SeqValue::Scalars(xs))) => {
                    if xs.iter().any(|x| x.kind() != *k) {
                        return Err(bad());
                    }
                }
                (FieldKind::Seq(ElemKind::Ref(t)), FieldValue::Seq(SeqValue::Nodes(xs))) => {
                    for n in xs.iter().flatten() {
                        check_target(reg, t, n)?;
                    }
                }
                (FieldKind::Ref(t), FieldValue::Ref(child)) => {
                    if let Some(n) = child {
                        check_target(reg, t, n)?;
                    }
                }
                (FieldKind::AgentPtr, FieldValue::AgentPtr(_)) => {}
                _ => return Err(bad()),
            }
        }
        Ok(())
    }
}

fn check_target(reg: &Registry, t: &Target, n: &Node) -> Result<(), WireError> {
    if reg.get(n.class).is_err() {
        return Err(WireError::UnregisteredType(format!("class {}", n.class)));
    }
    reg.accepts(t, n.class)?;
    n.validate(reg)
}
