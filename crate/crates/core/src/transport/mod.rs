//! Rank-to-rank messaging: batched point-to-point sends with tickets,
//! per-(peer, tag) FIFO receive queues, and gather/broadcast collectives.
//!
//! Both backends hand envelopes to an [`Endpoint`] through the same inbox
//! channel, so everything above the envelope is shared.

pub mod inproc;
pub mod tcp;

use std::collections::{HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender, TrySendError};
use thiserror::Error;

use crate::ids::Rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum Tag {
    Aura = 0,
    Migrate = 1,
    LookupReq = 2,
    LookupResp = 3,
    Lb = 4,
    Control = 5,
}

impl Tag {
    pub const ALL: [Tag; 6] = [Tag::Aura, Tag::Migrate, Tag::LookupReq, Tag::LookupResp, Tag::Lb, Tag::Control];

    pub fn from_u16(v: u16) -> Option<Tag> {
        Tag::ALL.get(v as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Tag::Aura => "aura",
            Tag::Migrate => "migrate",
            Tag::LookupReq => "lookup_req",
            Tag::LookupResp => "lookup_resp",
            Tag::Lb => "lb",
            Tag::Control => "control",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("peer {0} closed")]
    PeerClosed(Rank),
    #[error("transport down: {0}")]
    TransportDown(String),
    #[error("peer {peer} closed mid-message on {tag:?}")]
    TruncatedTransfer { peer: Rank, tag: Tag },
    #[error("collective mismatch: expected phase {expected}, rank {rank} sent {got}")]
    CollectiveMismatch { expected: u64, got: u64, rank: Rank },
    #[error("run aborted by rank {0}")]
    Aborted(Rank),
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("no rank {0}")]
    NoSuchPeer(Rank),
}

pub const ENVELOPE_HEADER_LEN: usize = 26;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: Rank,
    pub dst: Rank,
    pub tag: Tag,
    pub batch_index: u32,
    pub batch_total: u32,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn header(&self) -> [u8; ENVELOPE_HEADER_LEN] {
        let mut h = [0u8; ENVELOPE_HEADER_LEN];
        h[0..4].copy_from_slice(&self.src.to_le_bytes());
        h[4..8].copy_from_slice(&self.dst.to_le_bytes());
        h[8..10].copy_from_slice(&(self.tag as u16).to_le_bytes());
        h[10..14].copy_from_slice(&self.batch_index.to_le_bytes());
        h[14..18].copy_from_slice(&self.batch_total.to_le_bytes());
        h[18..26].copy_from_slice(&(self.payload.len() as u64).to_le_bytes());
        h
    }

    /// Parses a header into (envelope without payload, payload length).
    pub fn parse_header(h: &[u8; ENVELOPE_HEADER_LEN]) -> Result<(Envelope, u64), TransportError> {
        let u32_at = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().unwrap());
        let tag = u16::from_le_bytes([h[8], h[9]]);
        let tag = Tag::from_u16(tag).ok_or_else(|| TransportError::Malformed(format!("tag {tag}")))?;
        let env = Envelope {
            src: u32_at(0),
            dst: u32_at(4),
            tag,
            batch_index: u32_at(10),
            batch_total: u32_at(14),
            payload: Vec::new(),
        };
        if env.batch_index >= env.batch_total {
            return Err(TransportError::Malformed("batch index past total".into()));
        }
        Ok((env, u64::from_le_bytes(h[18..26].try_into().unwrap())))
    }
}

/// What a backend delivers into a rank's inbox.
#[derive(Debug)]
pub enum Incoming {
    Envelope(Envelope),
    Closed(Rank),
    Failed(Rank, String),
}

/// Splits `payload` into envelopes of at most `batch_bytes` bytes; an empty
/// payload still travels as one envelope.
pub fn split_batches(src: Rank, dst: Rank, tag: Tag, payload: &[u8], batch_bytes: usize) -> Vec<Envelope> {
    let chunks: Vec<&[u8]> = if payload.is_empty() {
        vec![&[][..]]
    } else {
        payload.chunks(batch_bytes.max(1)).collect()
    };
    let total = chunks.len() as u32;
    chunks
        .into_iter()
        .enumerate()
        .map(|(i, c)| Envelope {
            src,
            dst,
            tag,
            batch_index: i as u32,
            batch_total: total,
            payload: c.to_vec(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ticket {
    peer: Rank,
    first: u64,
    seq: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct TagCounters {
    pub messages: u64,
    pub envelopes: u64,
    pub bytes: u64,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct TransportCounters {
    pub sent: [TagCounters; 6],
    pub received: [TagCounters; 6],
}

struct Outlet {
    tx: Sender<Incoming>,
    pending: VecDeque<(u64, Envelope)>,
    next_seq: u64,
    submitted: u64,
}

struct Partial {
    total: u32,
    next: u32,
    data: Vec<u8>,
}

const ABORT_PHASE: u64 = u64::MAX;

pub struct Endpoint {
    rank: Rank,
    size: usize,
    batch_bytes: usize,
    timeout: Duration,
    outlets: Vec<Outlet>,
    inbox: Receiver<Incoming>,
    queues: HashMap<(Rank, Tag), VecDeque<Vec<u8>>>,
    partial: HashMap<(Rank, Tag), Partial>,
    closed: HashSet<Rank>,
    failed: Option<TransportError>,
    posted: HashSet<(Rank, Tag)>,
    counters: TransportCounters,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("rank", &self.rank).field("size", &self.size).finish()
    }
}

impl Endpoint {
    pub(crate) fn from_parts(
        rank: Rank,
        outlets: Vec<Sender<Incoming>>,
        inbox: Receiver<Incoming>,
        batch_bytes: usize,
    ) -> Self {
        Endpoint {
            rank,
            size: outlets.len(),
            batch_bytes: batch_bytes.max(1),
            timeout: Duration::from_secs(120),
            outlets: outlets
                .into_iter()
                .map(|tx| Outlet {
                    tx,
                    pending: VecDeque::new(),
                    next_seq: 0,
                    submitted: 0,
                })
                .collect(),
            inbox,
            queues: HashMap::new(),
            partial: HashMap::new(),
            closed: HashSet::new(),
            failed: None,
            posted: HashSet::new(),
            counters: TransportCounters::default(),
        }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn batch_bytes(&self) -> usize {
        self.batch_bytes
    }

    pub fn set_timeout(&mut self, t: Duration) {
        self.timeout = t;
    }

    pub fn counters(&self) -> &TransportCounters {
        &self.counters
    }

    /// Queues `payload` for `peer`; returns at once. The payload is copied
    /// into envelopes, so the caller keeps its buffer.
    pub fn isend(&mut self, peer: Rank, tag: Tag, payload: &[u8]) -> Result<Ticket, TransportError> {
        if let Some(e) = &self.failed {
            return Err(e.clone());
        }
        let out = self.outlets.get_mut(peer as usize).ok_or(TransportError::NoSuchPeer(peer))?;
        let envs = split_batches(self.rank, peer, tag, payload, self.batch_bytes);
        let c = &mut self.counters.sent[tag as usize];
        c.messages += 1;
        c.envelopes += envs.len() as u64;
        c.bytes += payload.len() as u64;
        let first = out.next_seq + 1;
        for e in envs {
            out.next_seq += 1;
            out.pending.push_back((out.next_seq, e));
        }
        let t = Ticket {
            peer,
            first,
            seq: out.next_seq,
        };
        self.flush()?;
        Ok(t)
    }

    /// Whether every envelope of the ticket's message has left this endpoint.
    pub fn test(&self, t: &Ticket) -> bool {
        self.outlets[t.peer as usize].submitted >= t.seq
    }

    pub fn wait(&mut self, t: &Ticket) -> Result<(), TransportError> {
        let start = Instant::now();
        while !self.test(t) {
            self.flush()?;
            self.pump(Some(Duration::from_millis(1)))?;
            if start.elapsed() > self.timeout {
                return Err(TransportError::TransportDown("send timed out".into()));
            }
        }
        Ok(())
    }

    /// Drops a message none of whose envelopes has been submitted yet.
    pub fn cancel(&mut self, t: &Ticket) -> bool {
        let out = &mut self.outlets[t.peer as usize];
        let Some(i) = out.pending.iter().position(|(s, _)| *s == t.first) else {
            return false;
        };
        let n = (t.seq - t.first + 1) as usize;
        out.pending.drain(i..i + n);
        true
    }

    pub fn post_speculative(&mut self, peer: Rank, tag: Tag) {
        self.posted.insert((peer, tag));
    }

    /// Discards a posted receive; queued data stays queued.
    pub fn cancel_speculative(&mut self, peer: Rank, tag: Tag) -> bool {
        self.posted.remove(&(peer, tag))
    }

    pub fn is_posted(&self, peer: Rank, tag: Tag) -> bool {
        self.posted.contains(&(peer, tag))
    }

    fn flush(&mut self) -> Result<(), TransportError> {
        for (p, out) in self.outlets.iter_mut().enumerate() {
            while let Some((seq, e)) = out.pending.pop_front() {
                match out.tx.try_send(Incoming::Envelope(e)) {
                    Ok(()) => out.submitted = seq,
                    Err(TrySendError::Full(Incoming::Envelope(e))) => {
                        out.pending.push_front((seq, e));
                        break;
                    }
                    Err(_) => return Err(TransportError::PeerClosed(p as Rank)),
                }
            }
        }
        Ok(())
    }

    fn has_pending(&self) -> bool {
        self.outlets.iter().any(|o| !o.pending.is_empty())
    }

    fn accept(&mut self, inc: Incoming) -> Result<(), TransportError> {
        match inc {
            Incoming::Envelope(e) => {
                let key = (e.src, e.tag);
                let p = self.partial.entry(key).or_insert(Partial {
                    total: e.batch_total,
                    next: 0,
                    data: Vec::new(),
                });
                if e.batch_index != p.next || e.batch_total != p.total {
                    return Err(TransportError::Malformed(format!(
                        "batch {}/{} from {} after {}/{}",
                        e.batch_index, e.batch_total, e.src, p.next, p.total
                    )));
                }
                p.data.extend_from_slice(&e.payload);
                p.next += 1;
                let c = &mut self.counters.received[e.tag as usize];
                c.envelopes += 1;
                if p.next == p.total {
                    let done = self.partial.remove(&key).unwrap();
                    c.messages += 1;
                    c.bytes += done.data.len() as u64;
                    if e.tag == Tag::Control && is_abort(&done.data) {
                        self.failed = Some(TransportError::Aborted(e.src));
                    }
                    self.queues.entry(key).or_default().push_back(done.data);
                }
            }
            Incoming::Closed(r) => {
                self.closed.insert(r);
            }
            Incoming::Failed(r, why) => {
                self.closed.insert(r);
                log::warn!("rank {}: link to {r} failed: {why}", self.rank);
            }
        }
        Ok(())
    }

    /// Moves everything waiting in the inbox into the queues; with a wait,
    /// blocks up to that long for the first arrival.
    fn pump(&mut self, wait: Option<Duration>) -> Result<(), TransportError> {
        if let Some(w) = wait {
            match self.inbox.recv_timeout(w) {
                Ok(inc) => self.accept(inc)?,
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::TransportDown("inbox closed".into())),
            }
        }
        while let Ok(inc) = self.inbox.try_recv() {
            self.accept(inc)?;
        }
        Ok(())
    }

    /// Oldest complete message from `peer` on `tag`.
    pub fn recv_matched(&mut self, peer: Rank, tag: Tag, blocking: bool) -> Result<Option<Vec<u8>>, TransportError> {
        if peer as usize >= self.size {
            return Err(TransportError::NoSuchPeer(peer));
        }
        let start = Instant::now();
        loop {
            self.flush()?;
            self.pump(None)?;
            if let Some(m) = self.queues.get_mut(&(peer, tag)).and_then(VecDeque::pop_front) {
                return Ok(Some(m));
            }
            if let Some(e) = &self.failed {
                return Err(e.clone());
            }
            if self.closed.contains(&peer) {
                return Err(if self.partial.contains_key(&(peer, tag)) {
                    TransportError::TruncatedTransfer { peer, tag }
                } else {
                    TransportError::PeerClosed(peer)
                });
            }
            if !blocking {
                return Ok(None);
            }
            if start.elapsed() > self.timeout {
                return Err(TransportError::TransportDown(format!("timed out waiting for {peer} on {tag:?}")));
            }
            let w = if self.has_pending() { Duration::from_millis(1) } else { Duration::from_millis(50) };
            self.pump(Some(w))?;
        }
    }

    /// Every rank's blob, ordered by rank. `phase` must agree on all ranks.
    pub fn allgather(&mut self, phase: u64, blob: &[u8]) -> Result<Vec<Vec<u8>>, TransportError> {
        let mut msg = phase.to_le_bytes().to_vec();
        msg.extend_from_slice(blob);
        if self.rank != 0 {
            self.isend(0, Tag::Control, &msg)?;
            let all = self.recv_matched(0, Tag::Control, true)?.unwrap();
            return decode_gathered(phase, &all);
        }
        let mut blobs = vec![blob.to_vec()];
        let mut mismatch = None;
        for r in 1..self.size as Rank {
            let m = self.recv_matched(r, Tag::Control, true)?.unwrap();
            let got = u64::from_le_bytes(m[..8].try_into().map_err(|_| TransportError::Malformed("short".into()))?);
            if got != phase && mismatch.is_none() {
                mismatch = Some(TransportError::CollectiveMismatch {
                    expected: phase,
                    got,
                    rank: r,
                });
            }
            blobs.push(m[8..].to_vec());
        }
        // a mismatch is broadcast as an empty gather under the sender's phase
        let mut out = if mismatch.is_some() { u64::MAX - 1 } else { phase }.to_le_bytes().to_vec();
        if mismatch.is_none() {
            for b in &blobs {
                out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                out.extend_from_slice(b);
            }
        }
        for r in 1..self.size as Rank {
            self.isend(r, Tag::Control, &out)?;
        }
        match mismatch {
            Some(e) => Err(e),
            None => Ok(blobs),
        }
    }

    /// Sums `v` over all ranks.
    pub fn sum_over_all_ranks(&mut self, phase: u64, v: &[u64]) -> Result<Vec<u64>, TransportError> {
        let blob: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        let all = self.allgather(phase, &blob)?;
        let mut sum = vec![0u64; v.len()];
        for b in all {
            for (i, c) in b.chunks_exact(8).enumerate() {
                sum[i] += u64::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok(sum)
    }

    pub fn barrier(&mut self, phase: u64) -> Result<(), TransportError> {
        self.allgather(phase, &[]).map(|_| ())
    }

    /// Best-effort notice to every peer that this rank gave up.
    pub fn abort(&mut self) {
        let msg = ABORT_PHASE.to_le_bytes();
        for r in 0..self.size as Rank {
            if r != self.rank {
                let _ = self.isend(r, Tag::Control, &msg);
            }
        }
        let _ = self.flush_all(Duration::from_millis(500));
    }

    /// Pushes out every pending envelope (used before shutdown).
    pub fn flush_all(&mut self, limit: Duration) -> Result<(), TransportError> {
        let start = Instant::now();
        while self.has_pending() {
            self.flush()?;
            self.pump(Some(Duration::from_millis(1)))?;
            if start.elapsed() > limit {
                return Err(TransportError::TransportDown("flush timed out".into()));
            }
        }
        Ok(())
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        let _ = self.flush_all(Duration::from_secs(5));
        for (r, out) in self.outlets.iter().enumerate() {
            if r as Rank != self.rank {
                let _ = out.tx.send_timeout(Incoming::Closed(self.rank), Duration::from_millis(200));
            }
        }
    }
}

fn is_abort(m: &[u8]) -> bool {
    m.len() == 8 && u64::from_le_bytes(m.try_into().unwrap()) == ABORT_PHASE
}

fn decode_gathered(phase: u64, m: &[u8]) -> Result<Vec<Vec<u8>>, TransportError> {
    let bad = || TransportError::Malformed("gather broadcast".into());
    let got = u64::from_le_bytes(m.get(..8).ok_or_else(bad)?.try_into().unwrap());
    if got != phase {
        return Err(TransportError::CollectiveMismatch {
            expected: phase,
            got,
            rank: 0,
        });
    }
    let mut out = Vec::new();
    let mut p = 8;
    while p < m.len() {
        let n = u64::from_le_bytes(m.get(p..p + 8).ok_or_else(bad)?.try_into().unwrap()) as usize;
        p += 8;
        out.push(m.get(p..p + n).ok_or_else(bad)?.to_vec());
        p += n;
    }
    Ok(out)
}
