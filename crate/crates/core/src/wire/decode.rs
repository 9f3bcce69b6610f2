use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::node::{FieldValue, Node, SeqValue, Value};
use super::registry::{ClassId, CustomIo, ElemKind, FieldDesc, FieldKind, Registry, ScalarKind, Target, CLASS_PREFIX};
use super::{read_u32, read_u64, write_u64, WireBuffer, WireError, HEADER_LEN, MAGIC, REF_NULL, REF_PRESENT};
use crate::ids::GlobalAgentId;

const MAX_DEPTH: usize = 64;
const HEAP_BIT: u64 = 1 << 63;

/// Location of a block: the message buffer (space 0) or a heap block that
/// replaced or extended the buffer contents after a mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Loc {
    pub space: u32,
    pub offset: u32,
}

impl Loc {
    fn link(self) -> u64 {
        if self.space == 0 {
            self.offset as u64
        } else {
            HEAP_BIT | (self.space as u64) << 32 | self.offset as u64
        }
    }

    fn from_link(v: u64) -> Loc {
        if v & HEAP_BIT != 0 {
            Loc {
                space: ((v & !HEAP_BIT) >> 32) as u32,
                offset: v as u32,
            }
        } else {
            Loc {
                space: 0,
                offset: v as u32,
            }
        }
    }

    fn at(self, delta: usize) -> Loc {
        Loc {
            space: self.space,
            offset: self.offset + delta as u32,
        }
    }
}

/// A decoded object: where its block starts and its most-derived class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub loc: Loc,
    pub class: ClassId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHandle {
    message: u64,
    loc: Loc,
}

trait Cursor {
    fn bytes(&self) -> &[u8];
    fn set_word(&mut self, at: usize, v: u64);
    fn custom(&mut self, at: usize, len: usize, io: &dyn CustomIo);
}

struct ReadOnly<'a>(&'a [u8]);

impl Cursor for ReadOnly<'_> {
    fn bytes(&self) -> &[u8] {
        self.0
    }
    fn set_word(&mut self, _: usize, _: u64) {}
    fn custom(&mut self, _: usize, _: usize, _: &dyn CustomIo) {}
}

struct Patching<'a>(&'a mut [u8]);

impl Cursor for Patching<'_> {
    fn bytes(&self) -> &[u8] {
        self.0
    }
    fn set_word(&mut self, at: usize, v: u64) {
        write_u64(self.0, at, v);
    }
    fn custom(&mut self, at: usize, len: usize, io: &dyn CustomIo) {
        io.on_decode(&mut self.0[at..at + len]);
    }
}

struct Walk<'r> {
    reg: &'r Registry,
    space: u32,
    blocks: u32,
}

impl Walk<'_> {
    fn link(&self, offset: usize) -> u64 {
        Loc {
            space: self.space,
            offset: offset as u32,
        }
        .link()
    }

    fn sentinel<C: Cursor>(&self, c: &C, at: usize) -> Result<bool, WireError> {
        match read_u64(c.bytes(), at) {
            REF_NULL => Ok(false),
            REF_PRESENT => Ok(true),
            value => Err(WireError::MalformedSentinel { offset: at, value }),
        }
    }

    fn child<C: Cursor>(&mut self, c: &mut C, pos: usize, target: &Target, depth: usize) -> Result<usize, WireError> {
        let len = c.bytes().len();
        if Registry::is_polymorphic(target) {
            if pos + CLASS_PREFIX > len {
                return Err(WireError::TruncatedBuffer(len));
            }
            let class = read_u32(c.bytes(), pos);
            self.reg.accepts(target, class)?;
            self.node(c, pos + CLASS_PREFIX, class, depth + 1)
        } else {
            let Target::Exact(class) = target else { unreachable!() };
            self.node(c, pos, *class, depth + 1)
        }
    }

    /// Walks the node block at `pos` and its subtree; returns the end offset.
    fn node<C: Cursor>(&mut self, c: &mut C, pos: usize, class: ClassId, depth: usize) -> Result<usize, WireError> {
        if depth > MAX_DEPTH {
            return Err(WireError::TooDeep(MAX_DEPTH));
        }
        let reg = self.reg;
        let desc = reg.get(class)?;
        let len = c.bytes().len();
        let block_end = pos.checked_add(desc.size).ok_or(WireError::TruncatedBuffer(len))?;
        if block_end > len {
            return Err(WireError::TruncatedBuffer(len));
        }
        self.blocks += 1;
        for f in &desc.fields {
            if matches!(f.kind, FieldKind::Seq(_) | FieldKind::Ref(_)) {
                self.sentinel(c, pos + f.offset)?;
            }
        }
        if let Some(io) = &desc.custom {
            c.custom(pos, desc.size, io.as_ref());
        }
        let mut cur = block_end;
        for f in &desc.fields {
            let at = pos + f.offset;
            match &f.kind {
                FieldKind::Seq(elem) => {
                    if read_u64(c.bytes(), at) != REF_PRESENT {
                        continue;
                    }
                    c.set_word(at, self.link(cur));
                    if cur + 8 > len {
                        return Err(WireError::TruncatedBuffer(len));
                    }
                    let count = read_u64(c.bytes(), cur);
                    let elems = cur + 8;
                    let bytes = (count as usize)
                        .checked_mul(elem.size())
                        .filter(|b| elems.checked_add(*b).is_some_and(|e| e <= len))
                        .ok_or(WireError::TruncatedBuffer(len))?;
                    cur = elems + bytes;
                    if let ElemKind::Ref(t) = elem {
                        for i in 0..count as usize {
                            let w = elems + i * 8;
                            if self.sentinel(c, w)? {
                                c.set_word(w, self.link(cur));
                                cur = self.child(c, cur, t, depth)?;
                            }
                        }
                    }
                }
                FieldKind::Ref(t) => {
                    if read_u64(c.bytes(), at) == REF_PRESENT {
                        c.set_word(at, self.link(cur));
                        cur = self.child(c, cur, t, depth)?;
                    }
                }
                _ => {}
            }
        }
        Ok(cur)
    }
}

/// End offset of the wire-encoded subtree starting at `pos` (unpatched bytes).
pub fn skip_subtree(bytes: &[u8], pos: usize, target: &Target, reg: &Registry) -> Result<usize, WireError> {
    let mut w = Walk {
        reg,
        space: 0,
        blocks: 0,
    };
    w.child(&mut ReadOnly(bytes), pos, target, 0)
}

static NEXT_MESSAGE: AtomicU64 = AtomicU64::new(1);

/// Decodes `buffer` in a single forward pass.
pub fn decode(mut buffer: WireBuffer, reg: &Arc<Registry>) -> Result<DecodedMessage, WireError> {
    let bytes = buffer.bytes_mut();
    let len = bytes.len();
    if len < HEADER_LEN {
        return Err(WireError::TruncatedBuffer(len));
    }
    if bytes[..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let root_class = read_u32(bytes, 4);
    reg.get(root_class)?;
    let declared = read_u64(bytes, 8);
    let actual = (len - HEADER_LEN) as u64;
    if declared > actual {
        return Err(WireError::TruncatedBuffer(len));
    }
    if declared < actual {
        return Err(WireError::LengthMismatch { declared, actual });
    }
    let mut walk = Walk {
        reg,
        space: 0,
        blocks: 0,
    };
    let end = walk.node(&mut Patching(bytes), HEADER_LEN, root_class, 0)?;
    if end != len {
        return Err(WireError::LengthMismatch {
            declared,
            actual: (end - HEADER_LEN) as u64,
        });
    }
    Ok(DecodedMessage {
        id: NEXT_MESSAGE.fetch_add(1, Ordering::Relaxed),
        root: NodeRef {
            loc: Loc {
                space: 0,
                offset: HEADER_LEN as u32,
            },
            class: root_class,
        },
        block_count: walk.blocks,
        live_count: walk.blocks,
        buffer: Some(buffer),
        registry: reg.clone(),
        released: HashSet::new(),
        heap: Vec::new(),
    })
}

/// A decoded message whose objects are read and mutated in place.
///
/// Each block in the buffer must eventually be released (individually, per
/// subtree, or all at once); the buffer is reclaimed when the last one is.
/// Accessors panic once the buffer has been reclaimed.
#[derive(Debug)]
pub struct DecodedMessage {
    id: u64,
    root: NodeRef,
    block_count: u32,
    live_count: u32,
    buffer: Option<WireBuffer>,
    registry: Arc<Registry>,
    released: HashSet<u32>,
    heap: Vec<Vec<u8>>,
}

impl DecodedMessage {
    pub fn root(&self) -> NodeRef {
        self.root
    }

    pub fn block_count(&self) -> u32 {
        self.block_count
    }

    pub fn live_count(&self) -> u32 {
        self.live_count
    }

    pub fn is_reclaimed(&self) -> bool {
        self.buffer.is_none()
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.as_ref().map_or(0, WireBuffer::len)
    }

    fn space(&self, s: u32) -> &[u8] {
        if s == 0 {
            self.buffer.as_ref().expect("message buffer reclaimed").as_bytes()
        } else {
            &self.heap[s as usize - 1]
        }
    }

    fn space_mut(&mut self, s: u32) -> &mut [u8] {
        if s == 0 {
            self.buffer.as_mut().expect("message buffer reclaimed").bytes_mut()
        } else {
            &mut self.heap[s as usize - 1]
        }
    }

    fn field(&self, node: NodeRef, field: usize) -> (&FieldDesc, Loc) {
        let f = &self.registry.types()[node.class as usize].fields[field];
        (f, node.loc.at(f.offset))
    }

    fn read_word(&self, at: Loc) -> u64 {
        read_u64(self.space(at.space), at.offset as usize)
    }

    fn write_word(&mut self, at: Loc, v: u64) {
        write_u64(self.space_mut(at.space), at.offset as usize, v);
    }

    fn resolve(&self, link: u64, target: &Target) -> NodeRef {
        let loc = Loc::from_link(link);
        if Registry::is_polymorphic(target) {
            NodeRef {
                loc: loc.at(CLASS_PREFIX),
                class: read_u32(self.space(loc.space), loc.offset as usize),
            }
        } else {
            let Target::Exact(class) = target else { unreachable!() };
            NodeRef { loc, class: *class }
        }
    }

    pub fn scalar(&self, node: NodeRef, field: usize) -> Value {
        let (f, at) = self.field(node, field);
        let FieldKind::Scalar(k) = f.kind else {
            panic!("field {} is not a scalar", f.name)
        };
        Value::read_le(k, &self.space(at.space)[at.offset as usize..])
    }

    #[inline]
    pub fn f64(&self, node: NodeRef, field: usize) -> f64 {
        let (_, at) = self.field(node, field);
        f64::from_le_bytes(self.space(at.space)[at.offset as usize..at.offset as usize + 8].try_into().unwrap())
    }

    #[inline]
    pub fn u32(&self, node: NodeRef, field: usize) -> u32 {
        let (_, at) = self.field(node, field);
        read_u32(self.space(at.space), at.offset as usize)
    }

    #[inline]
    pub fn u8(&self, node: NodeRef, field: usize) -> u8 {
        let (_, at) = self.field(node, field);
        self.space(at.space)[at.offset as usize]
    }

    #[inline]
    pub fn array_f64<const N: usize>(&self, node: NodeRef, field: usize) -> [f64; N] {
        let (_, at) = self.field(node, field);
        let b = &self.space(at.space)[at.offset as usize..];
        std::array::from_fn(|i| f64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap()))
    }

    pub fn set_scalar(&mut self, node: NodeRef, field: usize, v: Value) {
        let (f, at) = self.field(node, field);
        assert_eq!(f.kind, FieldKind::Scalar(v.kind()), "field {} kind mismatch", f.name);
        let mut tmp = Vec::with_capacity(8);
        v.write_le(&mut tmp);
        let o = at.offset as usize;
        self.space_mut(at.space)[o..o + tmp.len()].copy_from_slice(&tmp);
    }

    pub fn set_f64(&mut self, node: NodeRef, field: usize, v: f64) {
        self.set_scalar(node, field, Value::F64(v));
    }

    pub fn set_array_f64<const N: usize>(&mut self, node: NodeRef, field: usize, v: [f64; N]) {
        let (f, at) = self.field(node, field);
        assert_eq!(f.kind, FieldKind::Array(ScalarKind::F64, N));
        let o = at.offset as usize;
        let b = self.space_mut(at.space);
        for (i, x) in v.iter().enumerate() {
            b[o + i * 8..o + i * 8 + 8].copy_from_slice(&x.to_le_bytes());
        }
    }

    pub fn agent_ptr(&self, node: NodeRef, field: usize) -> Option<GlobalAgentId> {
        let (_, at) = self.field(node, field);
        let b = self.space(at.space);
        let rank = read_u64(b, at.offset as usize);
        (rank != u64::MAX).then(|| GlobalAgentId::new(rank as u32, read_u64(b, at.offset as usize + 8)))
    }

    pub fn child(&self, node: NodeRef, field: usize) -> Option<NodeRef> {
        let (f, at) = self.field(node, field);
        let FieldKind::Ref(t) = &f.kind else {
            panic!("field {} is not a reference", f.name)
        };
        let link = self.read_word(at);
        (link != REF_NULL).then(|| self.resolve(link, t))
    }

    fn seq_block(&self, node: NodeRef, field: usize) -> Option<Loc> {
        let (_, at) = self.field(node, field);
        let link = self.read_word(at);
        (link != REF_NULL).then(|| Loc::from_link(link))
    }

    fn elem_kind(&self, node: NodeRef, field: usize) -> &ElemKind {
        let (f, _) = self.field(node, field);
        match &f.kind {
            FieldKind::Seq(e) => e,
            _ => panic!("field {} is not a sequence", f.name),
        }
    }

    pub fn seq_len(&self, node: NodeRef, field: usize) -> usize {
        self.seq_block(node, field).map_or(0, |b| self.read_word(b) as usize)
    }

    pub fn seq_node(&self, node: NodeRef, field: usize, i: usize) -> Option<NodeRef> {
        let ElemKind::Ref(t) = self.elem_kind(node, field) else {
            panic!("sequence of scalars")
        };
        let block = self.seq_block(node, field)?;
        let link = self.read_word(block.at(8 + i * 8));
        (link != REF_NULL).then(|| self.resolve(link, t))
    }

    pub fn seq_scalar(&self, node: NodeRef, field: usize, i: usize) -> Value {
        let ElemKind::Scalar(k) = *self.elem_kind(node, field) else {
            panic!("sequence of references")
        };
        let block = self.seq_block(node, field).expect("empty sequence");
        let at = block.at(8 + i * k.size());
        Value::read_le(k, &self.space(at.space)[at.offset as usize..])
    }

    /// Moves a sequence out of the buffer so it can change length. Element
    /// storage belongs to the owning object's block, so nothing is released.
    fn relocate_seq(&mut self, node: NodeRef, field: usize) -> u32 {
        let elem = self.elem_kind(node, field).size();
        let (_, word) = self.field(node, field);
        let block = self.seq_block(node, field);
        let data = match block {
            Some(b) if b.space != 0 => return b.space,
            Some(b) => {
                let n = self.read_word(b) as usize;
                let o = b.offset as usize;
                let copy = self.space(0)[o..o + 8 + n * elem].to_vec();
                self.buffer.as_ref().unwrap().accounting().note_relocation(copy.len());
                copy
            }
            None => 0u64.to_le_bytes().to_vec(),
        };
        self.heap.push(data);
        let space = self.heap.len() as u32;
        self.write_word(word, Loc { space, offset: 0 }.link());
        space
    }

    fn set_seq_count(&mut self, space: u32, count: usize) {
        write_u64(self.space_mut(space), 0, count as u64);
    }

    pub fn seq_push_scalar(&mut self, node: NodeRef, field: usize, v: Value) {
        assert_eq!(*self.elem_kind(node, field), ElemKind::Scalar(v.kind()));
        let space = self.relocate_seq(node, field);
        let h = &mut self.heap[space as usize - 1];
        v.write_le(h);
        let n = read_u64(h, 0) as usize + 1;
        self.set_seq_count(space, n);
    }

    /// Appends a new child object, stored outside the buffer.
    pub fn seq_push_node(&mut self, node: NodeRef, field: usize, child: &Node) -> Result<NodeRef, WireError> {
        let ElemKind::Ref(t) = self.elem_kind(node, field).clone() else {
            panic!("sequence of scalars")
        };
        self.registry.accepts(&t, child.class)?;
        let poly = Registry::is_polymorphic(&t);
        let mut bytes = Vec::new();
        super::encode::write_subtree(child, &self.registry, poly, &mut bytes)?;
        let child_space = self.heap.len() as u32 + 1;
        let mut walk = Walk {
            reg: &self.registry,
            space: child_space,
            blocks: 0,
        };
        walk.child(&mut Patching(&mut bytes), 0, &t, 0)?;
        self.heap.push(bytes);
        let link = Loc {
            space: child_space,
            offset: 0,
        }
        .link();
        let space = self.relocate_seq(node, field);
        let h = &mut self.heap[space as usize - 1];
        h.extend_from_slice(&link.to_le_bytes());
        let n = read_u64(h, 0) as usize + 1;
        self.set_seq_count(space, n);
        Ok(self.resolve(link, &t))
    }

    /// Removes element `i`; a removed child subtree is released.
    pub fn seq_remove(&mut self, node: NodeRef, field: usize, i: usize) -> Result<(), WireError> {
        let removed = match self.elem_kind(node, field) {
            ElemKind::Ref(_) => self.seq_node(node, field, i),
            ElemKind::Scalar(_) => None,
        };
        let elem = self.elem_kind(node, field).size();
        let space = self.relocate_seq(node, field);
        let h = &mut self.heap[space as usize - 1];
        let n = read_u64(h, 0) as usize;
        assert!(i < n, "index {i} out of bounds ({n})");
        h.drain(8 + i * elem..8 + (i + 1) * elem);
        self.set_seq_count(space, n - 1);
        if let Some(r) = removed {
            self.release_subtree(r)?;
        }
        Ok(())
    }

    /// Drops null elements from a reference sequence without relocating it.
    /// Returns the new length.
    pub fn seq_compact(&mut self, node: NodeRef, field: usize) -> usize {
        let Some(block) = self.seq_block(node, field) else {
            return 0;
        };
        let n = self.read_word(block) as usize;
        let mut kept = 0;
        for i in 0..n {
            let w = self.read_word(block.at(8 + i * 8));
            if w != REF_NULL {
                self.write_word(block.at(8 + kept * 8), w);
                kept += 1;
            }
        }
        self.write_word(block, kept as u64);
        kept
    }

    pub fn handle(&self, node: NodeRef) -> BlockHandle {
        BlockHandle {
            message: self.id,
            loc: node.loc,
        }
    }

    fn release_loc(&mut self, loc: Loc) -> Result<(), WireError> {
        if self.buffer.is_none() {
            return Err(WireError::Reclaimed);
        }
        if loc.space != 0 || (loc.offset as usize) < HEADER_LEN || loc.offset as usize >= self.buffer_len() {
            return Err(WireError::ForeignHandle);
        }
        if !self.released.insert(loc.offset) {
            return Err(WireError::DoubleRelease);
        }
        self.live_count -= 1;
        if self.live_count == 0 {
            self.reclaim();
        }
        Ok(())
    }

    fn reclaim(&mut self) {
        self.buffer = None;
        self.heap.clear();
    }

    /// Releases one in-buffer block.
    pub fn release(&mut self, handle: BlockHandle) -> Result<(), WireError> {
        if handle.message != self.id {
            return Err(WireError::ForeignHandle);
        }
        self.release_loc(handle.loc)
    }

    /// Releases every in-buffer block of the subtree rooted at `node`.
    /// Returns the number of blocks released.
    pub fn release_subtree(&mut self, node: NodeRef) -> Result<u32, WireError> {
        let mut locs = Vec::new();
        self.collect_blocks(node, &mut locs);
        let n = locs.len() as u32;
        for l in locs {
            self.release_loc(l)?;
        }
        Ok(n)
    }

    fn collect_blocks(&self, node: NodeRef, out: &mut Vec<Loc>) {
        if node.loc.space == 0 {
            out.push(node.loc);
        }
        let desc = &self.registry.types()[node.class as usize];
        for (i, f) in desc.fields.iter().enumerate() {
            match &f.kind {
                FieldKind::Seq(elem) => {
                    if self.seq_block(node, i).is_some() {
                        if let ElemKind::Ref(_) = elem {
                            for k in 0..self.seq_len(node, i) {
                                if let Some(c) = self.seq_node(node, i, k) {
                                    self.collect_blocks(c, out);
                                }
                            }
                        }
                    }
                }
                FieldKind::Ref(_) => {
                    if let Some(c) = self.child(node, i) {
                        self.collect_blocks(c, out);
                    }
                }
                _ => {}
            }
        }
    }

    /// Releases everything still live and reclaims the buffer.
    pub fn release_all(&mut self) {
        if self.buffer.is_some() {
            self.live_count = 0;
            self.reclaim();
        }
    }

    /// Copies a decoded subtree out into a [`Node`].
    pub fn to_node(&self, node: NodeRef) -> Node {
        let desc = &self.registry.types()[node.class as usize];
        if let Some(b) = &self.buffer {
            b.accounting().note_copy(desc.size);
        }
        let mut fields = Vec::with_capacity(desc.fields.len());
        for (i, f) in desc.fields.iter().enumerate() {
            let at = node.loc.at(f.offset);
            let bytes = &self.space(at.space)[at.offset as usize..];
            let v = match &f.kind {
                FieldKind::Scalar(k) => FieldValue::Scalar(Value::read_le(*k, bytes)),
                FieldKind::Array(k, n) => {
                    FieldValue::Array((0..*n).map(|j| Value::read_le(*k, &bytes[j * k.size()..])).collect())
                }
                FieldKind::Seq(ElemKind::Scalar(_)) => {
                    let n = self.seq_len(node, i);
                    FieldValue::Seq(SeqValue::Scalars((0..n).map(|j| self.seq_scalar(node, i, j)).collect()))
                }
                FieldKind::Seq(ElemKind::Ref(_)) => {
                    let n = self.seq_len(node, i);
                    FieldValue::Seq(SeqValue::Nodes(
                        (0..n)
                            .map(|j| self.seq_node(node, i, j).map(|c| std::rc::Rc::new(self.to_node(c))))
                            .collect(),
                    ))
                }
                FieldKind::Ref(_) => FieldValue::Ref(self.child(node, i).map(|c| std::rc::Rc::new(self.to_node(c)))),
                FieldKind::AgentPtr => FieldValue::AgentPtr(self.agent_ptr(node, i)),
            };
            fields.push(v);
        }
        Node::new(node.class, fields)
    }
}

impl Drop for DecodedMessage {
    fn drop(&mut self) {
        if let Some(b) = &self.buffer {
            if self.live_count > 0 {
                b.accounting().note_dropped_live();
            }
        }
    }
}
