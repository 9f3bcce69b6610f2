use std::collections::BTreeMap;
use std::sync::Arc;

use super::WireError;

pub type ClassId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarKind {
    U8,
    U32,
    U64,
    I64,
    F64,
}

impl ScalarKind {
    pub const fn size(self) -> usize {
        match self {
            ScalarKind::U8 => 1,
            ScalarKind::U32 => 4,
            ScalarKind::U64 | ScalarKind::I64 | ScalarKind::F64 => 8,
        }
    }
}

/// What a reference points to: a fixed type, or any class derived from a base.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Exact(ClassId),
    Derived(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ElemKind {
    Scalar(ScalarKind),
    Ref(Target),
}

impl ElemKind {
    pub fn size(&self) -> usize {
        match self {
            ElemKind::Scalar(s) => s.size(),
            ElemKind::Ref(_) => REF_WORD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldKind {
    Scalar(ScalarKind),
    Array(ScalarKind, usize),
    /// Inline reference word; elements live in a separate block.
    Seq(ElemKind),
    Ref(Target),
    /// Id of another agent (16 bytes: origin rank as u64, `u64::MAX` = none; counter).
    AgentPtr,
}

pub const REF_WORD: usize = 8;
pub const AGENT_PTR_SIZE: usize = 16;
pub const CLASS_PREFIX: usize = 4;

impl FieldKind {
    pub fn size(&self) -> usize {
        match self {
            FieldKind::Scalar(s) => s.size(),
            FieldKind::Array(s, n) => s.size() * n,
            FieldKind::Seq(_) | FieldKind::Ref(_) => REF_WORD,
            FieldKind::AgentPtr => AGENT_PTR_SIZE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FieldDesc {
    pub name: String,
    pub kind: FieldKind,
    pub offset: usize,
}

/// Hook for types whose in-memory layout needs adjusting around the wire.
pub trait CustomIo: Send + Sync + std::fmt::Debug {
    /// Called on the freshly written block during encode.
    fn on_encode(&self, block: &mut [u8]);
    /// Called on the in-buffer block during decode.
    fn on_decode(&self, block: &mut [u8]);
}

#[derive(Debug, Clone)]
pub struct TypeDescriptor {
    pub name: String,
    pub class_id: ClassId,
    pub base: Option<String>,
    pub fields: Vec<FieldDesc>,
    /// Inline block size in bytes (class prefix excluded).
    pub size: usize,
    pub custom: Option<Arc<dyn CustomIo>>,
}

impl TypeDescriptor {
    pub fn field(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }
}

/// Type definition before class ids are assigned.
#[derive(Debug, Clone)]
pub struct TypeDef {
    name: String,
    base: Option<String>,
    fields: Vec<(String, DefKind)>,
    custom: Option<Arc<dyn CustomIo>>,
}

#[derive(Debug, Clone)]
pub enum DefKind {
    Scalar(ScalarKind),
    Array(ScalarKind, usize),
    SeqScalar(ScalarKind),
    SeqRef(String),
    SeqPoly(String),
    Ref(String),
    Poly(String),
    AgentPtr,
}

impl TypeDef {
    pub fn new(name: &str) -> Self {
        TypeDef {
            name: name.to_string(),
            base: None,
            fields: Vec::new(),
            custom: None,
        }
    }

    pub fn derives(mut self, base: &str) -> Self {
        self.base = Some(base.to_string());
        self
    }

    pub fn field(mut self, name: &str, kind: DefKind) -> Self {
        self.fields.push((name.to_string(), kind));
        self
    }

    pub fn custom_io(mut self, io: Arc<dyn CustomIo>) -> Self {
        self.custom = Some(io);
        self
    }
}

/// Closed-world type registry. Class ids are dense and assigned in name order,
/// so every rank that builds the same set of definitions agrees on them.
#[derive(Debug)]
pub struct Registry {
    types: Vec<TypeDescriptor>,
    by_name: BTreeMap<String, ClassId>,
    derived: BTreeMap<String, Vec<ClassId>>,
}

impl Registry {
    pub fn build(defs: Vec<TypeDef>) -> Result<Registry, WireError> {
        let mut defs = defs;
        defs.sort_by(|a, b| a.name.cmp(&b.name));
        let mut by_name = BTreeMap::new();
        for (i, d) in defs.iter().enumerate() {
            if by_name.insert(d.name.clone(), i as ClassId).is_some() {
                return Err(WireError::Registry(format!("duplicate type {}", d.name)));
            }
        }
        let mut derived: BTreeMap<String, Vec<ClassId>> = BTreeMap::new();
        for d in &defs {
            if let Some(b) = &d.base {
                derived.entry(b.clone()).or_default().push(by_name[&d.name]);
            }
        }
        let resolve = |n: &str| -> Result<ClassId, WireError> {
            by_name
                .get(n)
                .copied()
                .ok_or_else(|| WireError::Registry(format!("unknown type {n}")))
        };
        let check_base = |b: &str| -> Result<String, WireError> {
            if derived.contains_key(b) {
                Ok(b.to_string())
            } else {
                Err(WireError::Registry(format!("no classes derive from {b}")))
            }
        };
        let mut types = Vec::with_capacity(defs.len());
        for (i, d) in defs.into_iter().enumerate() {
            let mut offset = 0;
            let mut fields = Vec::with_capacity(d.fields.len());
            for (name, k) in d.fields {
                let kind = match k {
                    DefKind::Scalar(s) => FieldKind::Scalar(s),
                    DefKind::Array(s, n) => FieldKind::Array(s, n),
                    DefKind::SeqScalar(s) => FieldKind::Seq(ElemKind::Scalar(s)),
                    DefKind::SeqRef(t) => FieldKind::Seq(ElemKind::Ref(Target::Exact(resolve(&t)?))),
                    DefKind::SeqPoly(b) => FieldKind::Seq(ElemKind::Ref(Target::Derived(check_base(&b)?))),
                    DefKind::Ref(t) => FieldKind::Ref(Target::Exact(resolve(&t)?)),
                    DefKind::Poly(b) => FieldKind::Ref(Target::Derived(check_base(&b)?)),
                    DefKind::AgentPtr => FieldKind::AgentPtr,
                };
                let size = kind.size();
                fields.push(FieldDesc { name, kind, offset });
                offset += size;
            }
            types.push(TypeDescriptor {
                name: d.name,
                class_id: i as ClassId,
                base: d.base,
                fields,
                size: offset,
                custom: d.custom,
            });
        }
        Ok(Registry {
            types,
            by_name,
            derived,
        })
    }

    pub fn get(&self, id: ClassId) -> Result<&TypeDescriptor, WireError> {
        self.types.get(id as usize).ok_or(WireError::UnknownClassId(id))
    }

    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn types(&self) -> &[TypeDescriptor] {
        &self.types
    }

    /// Classes deriving from `base`, in class-id order.
    pub fn derived_from(&self, base: &str) -> &[ClassId] {
        self.derived.get(base).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Checks that `class` is acceptable where `target` is expected.
    pub fn accepts(&self, target: &Target, class: ClassId) -> Result<(), WireError> {
        let desc = self.get(class)?;
        let ok = match target {
            Target::Exact(t) => *t == class,
            Target::Derived(b) => desc.base.as_deref() == Some(b.as_str()),
        };
        if ok {
            Ok(())
        } else {
            Err(WireError::TypeMismatch {
                expected: format!("{target:?}"),
                found: desc.name.clone(),
            })
        }
    }

    pub fn is_polymorphic(target: &Target) -> bool {
        matches!(target, Target::Derived(_))
    }
}
