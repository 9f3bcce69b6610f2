use std::collections::HashSet;
use std::sync::Arc;

use super::node::{FieldValue, Node, SeqValue};
use super::registry::{ClassId, ElemKind, FieldKind, Registry, Target, CLASS_PREFIX};
use super::{BufferAccounting, WireBuffer, WireError, HEADER_LEN, MAGIC, REF_NULL, REF_PRESENT};

pub use super::decode::skip_subtree;

/// Appends little-endian values to an output buffer.
pub struct Writer<'a> {
    out: &'a mut Vec<u8>,
}

impl<'a> Writer<'a> {
    pub fn new(out: &'a mut Vec<u8>) -> Self {
        Writer { out }
    }

    #[inline]
    pub fn pos(&self) -> usize {
        self.out.len()
    }
    #[inline]
    pub fn put_u8(&mut self, v: u8) {
        self.out.push(v);
    }
    #[inline]
    pub fn put_u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    #[inline]
    pub fn put_u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    #[inline]
    pub fn put_f64(&mut self, v: f64) {
        self.out.extend_from_slice(&v.to_le_bytes());
    }
    #[inline]
    pub fn put_ref(&mut self, present: bool) {
        self.put_u64(if present { REF_PRESENT } else { REF_NULL });
    }
    #[inline]
    pub fn put_bytes(&mut self, b: &[u8]) {
        self.out.extend_from_slice(b);
    }

    pub(crate) fn block_mut(&mut self, start: usize) -> &mut [u8] {
        &mut self.out[start..]
    }
}

/// Something that can be written as the root of a wire buffer.
pub trait WireEncode {
    fn root_class(&self, reg: &Registry) -> Result<ClassId, WireError>;
    /// Size of the node blocks (header excluded).
    fn measure(&self, reg: &Registry) -> Result<usize, WireError>;
    fn write_body(&self, reg: &Registry, w: &mut Writer<'_>) -> Result<(), WireError>;
}

/// Body size of `root` without encoding it.
pub fn measure<T: WireEncode + ?Sized>(root: &T, reg: &Registry) -> Result<usize, WireError> {
    root.measure(reg)
}

/// Encodes `root` into a fresh buffer. The size is measured first, so exactly
/// one buffer of exactly the right size is acquired.
pub fn encode<T: WireEncode + ?Sized>(
    root: &T,
    reg: &Registry,
    accounting: &Arc<BufferAccounting>,
) -> Result<WireBuffer, WireError> {
    encode_with(root, reg, accounting, |_| {})
}

/// Like [`encode`], with a callback that sees the finished bytes.
pub fn encode_with<T: WireEncode + ?Sized>(
    root: &T,
    reg: &Registry,
    accounting: &Arc<BufferAccounting>,
    inspect: impl FnOnce(&[u8]),
) -> Result<WireBuffer, WireError> {
    let class = root.root_class(reg)?;
    let body = root.measure(reg)?;
    let total = HEADER_LEN + body;
    let mut buf = WireBuffer::with_capacity(total, accounting);
    {
        let out = buf.bytes_mut();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&class.to_le_bytes());
        out.extend_from_slice(&(body as u64).to_le_bytes());
        let mut w = Writer::new(out);
        root.write_body(reg, &mut w)?;
    }
    debug_assert_eq!(buf.len(), total);
    debug_assert_eq!(buf.capacity(), total);
    inspect(buf.as_bytes());
    Ok(buf)
}

impl WireEncode for Node {
    fn root_class(&self, reg: &Registry) -> Result<ClassId, WireError> {
        reg.get(self.class)
            .map_err(|_| WireError::UnregisteredType(format!("class {}", self.class)))?;
        Ok(self.class)
    }

    fn measure(&self, reg: &Registry) -> Result<usize, WireError> {
        self.validate(reg)?;
        let mut seen = HashSet::new();
        seen.insert(self as *const Node);
        measure_node(self, reg, false, &mut seen)
    }

    fn write_body(&self, reg: &Registry, w: &mut Writer<'_>) -> Result<(), WireError> {
        write_node(self, reg, false, w)
    }
}

fn measure_node(n: &Node, reg: &Registry, prefixed: bool, seen: &mut HashSet<*const Node>) -> Result<usize, WireError> {
    let desc = reg.get(n.class)?;
    let mut total = desc.size + if prefixed { CLASS_PREFIX } else { 0 };
    for (f, v) in desc.fields.iter().zip(&n.fields) {
        match (&f.kind, v) {
            (FieldKind::Seq(elem), FieldValue::Seq(s)) if !s.is_empty() => {
                total += 8 + s.len() * elem.size();
                if let (ElemKind::Ref(t), SeqValue::Nodes(xs)) = (elem, s) {
                    for c in xs.iter().flatten() {
                        total += measure_child(c, t, reg, seen)?;
                    }
                }
            }
            (FieldKind::Ref(t), FieldValue::Ref(Some(c))) => {
                total += measure_child(c, t, reg, seen)?;
            }
            _ => {}
        }
    }
    Ok(total)
}

fn measure_child(
    c: &std::rc::Rc<Node>,
    t: &Target,
    reg: &Registry,
    seen: &mut HashSet<*const Node>,
) -> Result<usize, WireError> {
    if !seen.insert(std::rc::Rc::as_ptr(c)) {
        return Err(WireError::SharedNodeDetected);
    }
    measure_node(c, reg, Registry::is_polymorphic(t), seen)
}

fn write_node(n: &Node, reg: &Registry, prefixed: bool, w: &mut Writer<'_>) -> Result<(), WireError> {
    let desc = reg.get(n.class)?;
    if prefixed {
        w.put_u32(n.class);
    }
    let start = w.pos();
    for v in &n.fields {
        match v {
            FieldValue::Scalar(x) => x.write_le(w.out),
            FieldValue::Array(xs) => xs.iter().for_each(|x| x.write_le(w.out)),
            FieldValue::Seq(s) => w.put_ref(!s.is_empty()),
            FieldValue::Ref(c) => w.put_ref(c.is_some()),
            FieldValue::AgentPtr(p) => match p {
                Some(id) => {
                    w.put_u64(id.origin_rank as u64);
                    w.put_u64(id.counter);
                }
                None => {
                    w.put_u64(u64::MAX);
                    w.put_u64(0);
                }
            },
        }
    }
    if let Some(io) = &desc.custom {
        io.on_encode(w.block_mut(start));
    }
    for (f, v) in desc.fields.iter().zip(&n.fields) {
        match (&f.kind, v) {
            (FieldKind::Seq(elem), FieldValue::Seq(s)) if !s.is_empty() => {
                w.put_u64(s.len() as u64);
                match s {
                    SeqValue::Scalars(xs) => xs.iter().for_each(|x| x.write_le(w.out)),
                    SeqValue::Nodes(xs) => {
                        for c in xs {
                            w.put_ref(c.is_some());
                        }
                        let poly = matches!(elem, ElemKind::Ref(t) if Registry::is_polymorphic(t));
                        for c in xs.iter().flatten() {
                            write_node(c, reg, poly, w)?;
                        }
                    }
                }
            }
            (FieldKind::Ref(t), FieldValue::Ref(Some(c))) => {
                write_node(c, reg, Registry::is_polymorphic(t), w)?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Encodes a standalone subtree (no header) into `out`.
pub(crate) fn write_subtree(n: &Node, reg: &Registry, prefixed: bool, out: &mut Vec<u8>) -> Result<(), WireError> {
    n.validate(reg)?;
    let mut seen = HashSet::new();
    let size = measure_node(n, reg, prefixed, &mut seen)?;
    out.reserve(size);
    write_node(n, reg, prefixed, &mut Writer::new(out))
}
