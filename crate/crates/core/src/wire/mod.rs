//! Zero-parse serialization of agent object trees.
//!
//! An object tree is written as one contiguous buffer: a 16-byte header
//! followed by the node blocks in depth-first, field-order traversal.
//! Reference words carry only the sentinels `0` (null) and `1` (present);
//! polymorphic children are prefixed by their 4-byte class id and variable
//! sequences live in their own block (`u64 count ‖ elements`).
//!
//! Decoding walks the buffer once, validates it and rewrites each present
//! reference word into a link to the next block. No payload byte is copied
//! out; the returned [`DecodedMessage`] reads and writes fields in place and
//! reclaims the buffer once every block has been released. See
//! `docs/wire-format.md` for byte-level examples.

mod decode;
mod encode;
mod node;
mod registry;
pub mod schema;

pub use decode::{decode, BlockHandle, DecodedMessage, Loc, NodeRef};
pub use encode::{encode, encode_with, measure, skip_subtree, WireEncode, Writer};
pub use node::{FieldValue, Node, SeqValue, Value};
pub use registry::{
    ClassId, CustomIo, DefKind, ElemKind, FieldDesc, FieldKind, Registry, ScalarKind, Target, TypeDef,
    TypeDescriptor, AGENT_PTR_SIZE, CLASS_PREFIX, REF_WORD,
};

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"TAI0";
pub const HEADER_LEN: usize = 16;
pub const REF_NULL: u64 = 0;
pub const REF_PRESENT: u64 = 1;

const _: () = assert!(cfg!(target_endian = "little"), "wire format requires a little-endian host");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("type registry: {0}")]
    Registry(String),
    #[error("type {0} is not registered")]
    UnregisteredType(String),
    #[error("node reachable more than once")]
    SharedNodeDetected,
    #[error("buffer truncated at byte {0}")]
    TruncatedBuffer(usize),
    #[error("unknown class id {0}")]
    UnknownClassId(u32),
    #[error("reference word {value} at byte {offset} is neither 0 nor 1")]
    MalformedSentinel { offset: usize, value: u64 },
    #[error("bad magic")]
    BadMagic,
    #[error("payload length {declared} does not match buffer ({actual})")]
    LengthMismatch { declared: u64, actual: u64 },
    #[error("expected {expected}, found {found}")]
    TypeMismatch { expected: String, found: String },
    #[error("value does not match field layout: {0}")]
    ShapeMismatch(String),
    #[error("nesting deeper than {0}")]
    TooDeep(usize),
    #[error("block already released")]
    DoubleRelease,
    #[error("handle does not belong to this buffer")]
    ForeignHandle,
    #[error("message buffer already reclaimed")]
    Reclaimed,
}

/// Instrumentation shared by all buffers of one accounting domain (a run,
/// or a test). Counters are monotone except `live`.
#[derive(Debug, Default)]
pub struct BufferAccounting {
    next_id: AtomicU64,
    acquired: AtomicU64,
    reclaimed: AtomicU64,
    double_reclaims: AtomicU64,
    dropped_with_live_blocks: AtomicU64,
    payload_bytes_copied: AtomicU64,
    relocated_bytes: AtomicU64,
    high_water: AtomicU64,
    live_ids: Mutex<HashSet<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AccountingSnapshot {
    pub acquired: u64,
    pub reclaimed: u64,
    pub live: u64,
    pub double_reclaims: u64,
    pub dropped_with_live_blocks: u64,
    pub payload_bytes_copied: u64,
    pub relocated_bytes: u64,
    pub high_water: u64,
}

impl BufferAccounting {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    fn register(&self) -> u64 {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.acquired.fetch_add(1, Ordering::Relaxed);
        let mut live = self.live_ids.lock().unwrap();
        live.insert(id);
        let n = live.len() as u64;
        self.high_water.fetch_max(n, Ordering::Relaxed);
        id
    }

    fn reclaim(&self, id: u64) {
        let mut live = self.live_ids.lock().unwrap();
        if live.remove(&id) {
            self.reclaimed.fetch_add(1, Ordering::Relaxed);
        } else {
            self.double_reclaims.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub(crate) fn note_copy(&self, bytes: usize) {
        self.payload_bytes_copied.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub(crate) fn note_relocation(&self, bytes: usize) {
        self.relocated_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub(crate) fn note_dropped_live(&self) {
        self.dropped_with_live_blocks.fetch_add(1, Ordering::Relaxed);
    }

    pub fn live(&self) -> u64 {
        self.live_ids.lock().unwrap().len() as u64
    }

    /// Returns the high-water mark since the last reset and restarts it at the
    /// current live count.
    pub fn take_high_water(&self) -> u64 {
        let live = self.live();
        self.high_water.swap(live, Ordering::Relaxed).max(live)
    }

    pub fn snapshot(&self) -> AccountingSnapshot {
        AccountingSnapshot {
            acquired: self.acquired.load(Ordering::Relaxed),
            reclaimed: self.reclaimed.load(Ordering::Relaxed),
            live: self.live(),
            double_reclaims: self.double_reclaims.load(Ordering::Relaxed),
            dropped_with_live_blocks: self.dropped_with_live_blocks.load(Ordering::Relaxed),
            payload_bytes_copied: self.payload_bytes_copied.load(Ordering::Relaxed),
            relocated_bytes: self.relocated_bytes.load(Ordering::Relaxed),
            high_water: self.high_water.load(Ordering::Relaxed),
        }
    }
}

/// A contiguous serialized message. Dropping it reclaims the storage and
/// records the reclamation with its accounting domain.
#[derive(Debug)]
pub struct WireBuffer {
    bytes: Vec<u8>,
    id: u64,
    accounting: Arc<BufferAccounting>,
}

impl WireBuffer {
    /// Acquires a new, empty buffer with exactly `capacity` bytes of storage.
    pub fn with_capacity(capacity: usize, accounting: &Arc<BufferAccounting>) -> Self {
        WireBuffer {
            bytes: Vec::with_capacity(capacity),
            id: accounting.register(),
            accounting: accounting.clone(),
        }
    }

    /// Takes ownership of received bytes without copying them.
    pub fn adopt(bytes: Vec<u8>, accounting: &Arc<BufferAccounting>) -> Self {
        WireBuffer {
            bytes,
            id: accounting.register(),
            accounting: accounting.clone(),
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub(crate) fn bytes_mut(&mut self) -> &mut Vec<u8> {
        &mut self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.bytes.capacity()
    }

    pub fn root_class(&self) -> Option<ClassId> {
        self.bytes
            .get(4..8)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    /// Hands the bytes to another owner (e.g. the transport). The buffer
    /// counts as reclaimed from this domain.
    pub fn into_bytes(mut self) -> Vec<u8> {
        std::mem::take(&mut self.bytes)
    }

    pub fn accounting(&self) -> &Arc<BufferAccounting> {
        &self.accounting
    }
}

impl Drop for WireBuffer {
    fn drop(&mut self) {
        self.accounting.reclaim(self.id);
    }
}

#[inline]
pub(crate) fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

#[inline]
pub(crate) fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

#[inline]
pub(crate) fn write_u64(b: &mut [u8], at: usize, v: u64) {
    b[at..at + 8].copy_from_slice(&v.to_le_bytes());
}
