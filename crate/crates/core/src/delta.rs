//! Delta frames: an agent batch encoded as the XOR difference against a
//! reference batch held by both sender and receiver.
//!
//! The sender reorders its agents into the reference's slot order
//! ([`reorder_match`]), encodes that matched batch with the plain wire
//! format, and emits per slot either an absence marker, the XOR of the
//! agent's bytes against the reference agent's bytes, or the raw bytes when
//! the lengths differ. Agents unknown to the reference follow as plain
//! subtrees. The body is compressed. The grammar is in `docs/delta-frame.md`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;
use xxhash_rust::xxh3::xxh3_64;

use crate::compress::{compress, decompress};
use crate::ids::{GlobalAgentId, Rank};
use crate::wire::schema::{agent_size, AgentLike, BatchEncoder, AGENT_BATCH};
use crate::wire::{encode, skip_subtree, BufferAccounting, Registry, Target, WireError, HEADER_LEN, MAGIC};

pub const MARK_XOR: u8 = 0x00;
pub const MARK_RAW: u8 = 0x01;
pub const MARK_ABSENT: u8 = 0xFF;
pub const FRAME_HEADER_LEN: usize = 32;

/// Offset of the agents sequence block in a batch buffer.
const SEQ_AT: usize = HEADER_LEN + 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DeltaError {
    #[error("agent {0} appears twice")]
    DuplicateId(GlobalAgentId),
    #[error("frame expects reference epoch {frame_epoch} checksum {frame_checksum:#x}, local is {local_epoch} {local_checksum:#x}")]
    ReferenceMismatch {
        frame_epoch: u64,
        frame_checksum: u64,
        local_epoch: u64,
        local_checksum: u64,
    },
    #[error("corrupt delta frame: {0}")]
    CorruptFrame(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Result of matching a message against a reference: `slots[i]` is the index
/// of the message agent with the reference's i-th id, `appended` are the
/// remaining message indices sorted by id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matched {
    pub slots: Vec<Option<usize>>,
    pub appended: Vec<usize>,
}

pub fn reorder_match(message: &[GlobalAgentId], reference: &[GlobalAgentId]) -> Result<Matched, DeltaError> {
    let mut pos = HashMap::with_capacity(message.len());
    for (i, id) in message.iter().enumerate() {
        if pos.insert(*id, i).is_some() {
            return Err(DeltaError::DuplicateId(*id));
        }
    }
    let mut seen = HashSet::with_capacity(reference.len());
    let mut slots = Vec::with_capacity(reference.len());
    for id in reference {
        if !seen.insert(*id) {
            return Err(DeltaError::DuplicateId(*id));
        }
        slots.push(pos.remove(id));
    }
    let mut appended: Vec<usize> = pos.into_values().collect();
    appended.sort_unstable_by_key(|&i| message[i]);
    Ok(Matched { slots, appended })
}

/// A retained matched batch (unpatched wire bytes) and where its agents sit.
#[derive(Debug, Clone)]
pub struct Reference {
    epoch: u64,
    checksum: u64,
    bytes: Vec<u8>,
    ids: Vec<GlobalAgentId>,
    ranges: Vec<Range<usize>>,
}

impl Reference {
    pub fn from_matched(bytes: Vec<u8>, epoch: u64, reg: &Registry) -> Result<Self, DeltaError> {
        let agents = scan_agents(&bytes, reg)?;
        let (ids, ranges) = agents.into_iter().unzip();
        Ok(Reference {
            epoch,
            checksum: xxh3_64(&bytes),
            bytes,
            ids,
            ranges,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn ids(&self) -> &[GlobalAgentId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

fn agent_target() -> Target {
    Target::Derived("Agent".into())
}

fn word(b: &[u8], at: usize) -> Result<u64, WireError> {
    b.get(at..at + 8)
        .map(|s| u64::from_le_bytes(s.try_into().unwrap()))
        .ok_or(WireError::TruncatedBuffer(b.len()))
}

/// Present agents of an encoded batch with their subtree byte ranges.
fn scan_agents(bytes: &[u8], reg: &Registry) -> Result<Vec<(GlobalAgentId, Range<usize>)>, WireError> {
    if word(bytes, HEADER_LEN + 8)? == 0 {
        return Ok(Vec::new());
    }
    let n = word(bytes, SEQ_AT)? as usize;
    let words = SEQ_AT + 8;
    let mut cur = words + n.checked_mul(8).ok_or(WireError::TruncatedBuffer(bytes.len()))?;
    let target = agent_target();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if word(bytes, words + 8 * i)? == 0 {
            continue;
        }
        let end = skip_subtree(bytes, cur, &target, reg)?;
        let origin = u32::from_le_bytes(bytes[cur + 4..cur + 8].try_into().unwrap());
        let counter = word(bytes, cur + 8)?;
        out.push((GlobalAgentId::new(origin, counter), cur..end));
        cur = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub epoch: u64,
    pub reference_checksum: u64,
    pub slot_count: u64,
    pub appended_len: u64,
}

impl FrameHeader {
    fn write(&self, out: &mut Vec<u8>) {
        for v in [
            self.epoch,
            self.reference_checksum,
            self.slot_count,
            self.appended_len,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn parse(frame: &[u8]) -> Result<FrameHeader, DeltaError> {
        if frame.len() < FRAME_HEADER_LEN {
            return Err(DeltaError::CorruptFrame("frame shorter than header".into()));
        }
        let w = |i: usize| u64::from_le_bytes(frame[i * 8..i * 8 + 8].try_into().unwrap());
        Ok(FrameHeader {
            epoch: w(0),
            reference_checksum: w(1),
            slot_count: w(2),
            appended_len: w(3),
        })
    }
}

/// A finished frame plus the matched batch it was computed from.
#[derive(Debug)]
pub struct EncodedFrame {
    pub frame: Vec<u8>,
    /// Plain wire encoding of the matched batch; becomes the next reference.
    pub matched: Vec<u8>,
    pub slot_count: usize,
    pub appended_count: usize,
}

fn epoch_and_checksum(reference: Option<&Reference>) -> (u64, u64) {
    reference.map_or((0, 0), |r| (r.epoch, r.checksum))
}

pub fn delta_encode<A: AgentLike>(
    iteration: u64,
    agents: &[A],
    reference: Option<&Reference>,
    reg: &Registry,
    accounting: &Arc<BufferAccounting>,
) -> Result<EncodedFrame, DeltaError> {
    let ids: Vec<GlobalAgentId> = agents.iter().map(|a| a.id()).collect();
    let m = reorder_match(&ids, reference.map_or(&[], |r| r.ids()))?;
    let slots: Vec<Option<&A>> = m
        .slots
        .iter()
        .map(|s| s.map(|i| &agents[i]))
        .chain(m.appended.iter().map(|&i| Some(&agents[i])))
        .collect();
    let buf = encode(&BatchEncoder { iteration, slots: &slots }, reg, accounting)?;
    let bytes = buf.as_bytes();

    let mut body = Vec::with_capacity(bytes.len() + m.slots.len());
    body.extend_from_slice(&iteration.to_le_bytes());
    let mut cur = if slots.is_empty() { SEQ_AT } else { SEQ_AT + 8 + 8 * slots.len() };
    for (i, s) in slots[..m.slots.len()].iter().enumerate() {
        let Some(a) = s else {
            body.push(MARK_ABSENT);
            continue;
        };
        let len = agent_size(a);
        let sub = &bytes[cur..cur + len];
        let r = &reference.expect("slots imply a reference").ranges[i];
        if r.len() == len {
            body.push(MARK_XOR);
            let old = &reference.unwrap().bytes[r.clone()];
            body.extend(sub.iter().zip(old).map(|(a, b)| a ^ b));
        } else {
            body.push(MARK_RAW);
            body.extend_from_slice(sub);
        }
        cur += len;
    }
    let appended_len = bytes.len() - cur;
    body.extend_from_slice(&bytes[cur..]);

    let (epoch, reference_checksum) = epoch_and_checksum(reference);
    let packed = compress(&body);
    let mut frame = Vec::with_capacity(FRAME_HEADER_LEN + packed.len());
    FrameHeader {
        epoch,
        reference_checksum,
        slot_count: m.slots.len() as u64,
        appended_len: appended_len as u64,
    }
    .write(&mut frame);
    frame.extend_from_slice(&packed);
    Ok(EncodedFrame {
        frame,
        matched: bytes.to_vec(),
        slot_count: m.slots.len(),
        appended_count: m.appended.len(),
    })
}

/// Rebuilds the sender's matched batch (unpatched wire bytes, placeholders
/// included) from a frame and the local reference.
pub fn delta_decode(frame: &[u8], reference: Option<&Reference>, reg: &Registry) -> Result<Vec<u8>, DeltaError> {
    let h = FrameHeader::parse(frame)?;
    let (local_epoch, local_checksum) = epoch_and_checksum(reference);
    let local_len = reference.map_or(0, Reference::len) as u64;
    if h.epoch != local_epoch || h.reference_checksum != local_checksum || h.slot_count != local_len {
        return Err(DeltaError::ReferenceMismatch {
            frame_epoch: h.epoch,
            frame_checksum: h.reference_checksum,
            local_epoch,
            local_checksum,
        });
    }
    let body = decompress(&frame[FRAME_HEADER_LEN..]).map_err(|e| DeltaError::CorruptFrame(e.to_string()))?;
    let corrupt = |what: &str| DeltaError::CorruptFrame(what.to_string());
    let target = agent_target();

    let iteration = word(&body, 0).map_err(|_| corrupt("body shorter than its iteration"))?;
    let mut present = Vec::with_capacity(h.slot_count as usize);
    let mut agents = Vec::with_capacity(body.len());
    let mut p = 8;
    for i in 0..h.slot_count as usize {
        let marker = *body.get(p).ok_or_else(|| corrupt("slot section truncated"))?;
        p += 1;
        match marker {
            MARK_ABSENT => present.push(false),
            MARK_XOR => {
                let r = &reference.unwrap().ranges[i];
                let sub = body.get(p..p + r.len()).ok_or_else(|| corrupt("xor slot truncated"))?;
                agents.extend(sub.iter().zip(&reference.unwrap().bytes[r.clone()]).map(|(a, b)| a ^ b));
                p += r.len();
                present.push(true);
            }
            MARK_RAW => {
                let end = skip_subtree(&body, p, &target, reg).map_err(|e| corrupt(&e.to_string()))?;
                agents.extend_from_slice(&body[p..end]);
                p = end;
                present.push(true);
            }
            m => return Err(corrupt(&format!("unknown slot marker {m:#04x}"))),
        }
    }
    if (body.len() - p) as u64 != h.appended_len {
        return Err(corrupt("appended section length mismatch"));
    }
    while p < body.len() {
        let end = skip_subtree(&body, p, &target, reg).map_err(|e| corrupt(&e.to_string()))?;
        present.push(true);
        p = end;
    }
    agents.extend_from_slice(&body[body.len() - h.appended_len as usize..]);

    let n = present.len();
    let body_len = 16 + if n > 0 { 8 + 8 * n + agents.len() } else { 0 };
    let mut out = Vec::with_capacity(HEADER_LEN + body_len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&AGENT_BATCH.to_le_bytes());
    out.extend_from_slice(&(body_len as u64).to_le_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&u64::from(n > 0).to_le_bytes());
    if n > 0 {
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for p in present {
            out.extend_from_slice(&u64::from(p).to_le_bytes());
        }
        out.extend_from_slice(&agents);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Sent,
    Received,
}

/// References per (peer, direction) for the aura channel.
#[derive(Debug, Default)]
pub struct ReferenceStore {
    refs: BTreeMap<(Rank, Direction), Reference>,
}

impl ReferenceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, peer: Rank, dir: Direction) -> Option<&Reference> {
        self.refs.get(&(peer, dir))
    }

    /// Adopts `matched` as the new reference when `iteration` is a multiple of
    /// `k`. Returns whether the reference changed.
    pub fn maybe_update(
        &mut self,
        peer: Rank,
        dir: Direction,
        iteration: u64,
        k: u64,
        matched: &[u8],
        reg: &Registry,
    ) -> Result<bool, DeltaError> {
        if iteration % k != 0 {
            return Ok(false);
        }
        let epoch = self.get(peer, dir).map_or(0, Reference::epoch) + 1;
        self.refs
            .insert((peer, dir), Reference::from_matched(matched.to_vec(), epoch, reg)?);
        Ok(true)
    }

    /// Forgets both directions for a peer that is no longer a neighbor.
    pub fn drop_peer(&mut self, peer: Rank) {
        self.refs.remove(&(peer, Direction::Sent));
        self.refs.remove(&(peer, Direction::Received));
    }

    pub fn peers(&self) -> impl Iterator<Item = Rank> + '_ {
        let mut v: Vec<Rank> = self.refs.keys().map(|(p, _)| *p).collect();
        v.dedup();
        v.into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(c: u64) -> GlobalAgentId {
        GlobalAgentId::new(0, c)
    }

    #[test]
    fn identity_order_matches_fully() {
        let ids = [g(1), g(2), g(3)];
        let m = reorder_match(&ids, &ids).unwrap();
        assert_eq!(m.slots, vec![Some(0), Some(1), Some(2)]);
        assert!(m.appended.is_empty());
    }

    #[test]
    fn missing_agents_become_placeholders() {
        let (a, b, c) = (g(1), g(2), g(3));
        let m = reorder_match(&[c, a], &[a, b, c]).unwrap();
        assert_eq!(m.slots, vec![Some(1), None, Some(0)]);
        assert!(m.appended.is_empty());
    }

    #[test]
    fn new_agents_are_appended_by_id() {
        let m = reorder_match(&[g(9), g(1), g(5)], &[g(1)]).unwrap();
        assert_eq!(m.slots, vec![Some(1)]);
        assert_eq!(m.appended, vec![2, 0]);
        assert_eq!(reorder_match(&[g(1), g(1)], &[]), Err(DeltaError::DuplicateId(g(1))));
    }
}
