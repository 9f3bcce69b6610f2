//! Local and global agent identifiers.
//!
//! A [`LocalAgentId`] addresses a slot in a rank-local, vector-backed agent
//! store. Indices are recycled after removal; the reuse counter keeps ids
//! unique over time. A [`GlobalAgentId`] is assigned on demand and never
//! changes, no matter how often the agent migrates.

use serde::{Deserialize, Serialize};
use std::fmt;

pub type Rank = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LocalAgentId {
    pub index: u32,
    pub reuse_counter: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalAgentId {
    pub origin_rank: Rank,
    pub counter: u64,
}

impl GlobalAgentId {
    pub fn new(origin_rank: Rank, counter: u64) -> Self {
        GlobalAgentId {
            origin_rank,
            counter,
        }
    }

    /// Order-independent 64-bit key for an unordered pair of ids.
    pub fn pair_key(a: GlobalAgentId, b: GlobalAgentId) -> u64 {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        crate::rng::mix(crate::rng::mix(lo.as_u64_key()) ^ hi.as_u64_key().rotate_left(17))
    }

    pub fn as_u64_key(self) -> u64 {
        crate::rng::mix((self.origin_rank as u64) << 40 ^ self.counter)
    }
}

impl fmt::Display for GlobalAgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.origin_rank, self.counter)
    }
}

/// Slot allocator for a vector-backed agent map.
#[derive(Debug, Default, Clone)]
pub struct IdAllocator {
    reuse: Vec<u32>,
    live: Vec<bool>,
    free: Vec<u32>,
}

impl IdAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&mut self) -> LocalAgentId {
        if let Some(index) = self.free.pop() {
            let i = index as usize;
            self.reuse[i] += 1;
            self.live[i] = true;
            LocalAgentId {
                index,
                reuse_counter: self.reuse[i],
            }
        } else {
            let index = self.reuse.len() as u32;
            self.reuse.push(0);
            self.live.push(true);
            LocalAgentId {
                index,
                reuse_counter: 0,
            }
        }
    }

    /// Returns false if `id` is stale or not live.
    pub fn free(&mut self, id: LocalAgentId) -> bool {
        let i = id.index as usize;
        if i >= self.live.len() || !self.live[i] || self.reuse[i] != id.reuse_counter {
            return false;
        }
        self.live[i] = false;
        self.free.push(id.index);
        true
    }

    pub fn is_live(&self, id: LocalAgentId) -> bool {
        let i = id.index as usize;
        i < self.live.len() && self.live[i] && self.reuse[i] == id.reuse_counter
    }

    /// Number of slots ever created (fresh + reusable).
    pub fn capacity(&self) -> usize {
        self.reuse.len()
    }

    pub fn live_count(&self) -> usize {
        self.live.len() - self.free.len()
    }

    pub fn clear(&mut self) {
        for i in 0..self.live.len() {
            if self.live[i] {
                self.live[i] = false;
                self.free.push(i as u32);
            }
        }
    }
}

/// Per-rank monotone counter for global id assignment. Never reset.
#[derive(Debug, Clone)]
pub struct GlobalIdCounter {
    rank: Rank,
    next: u64,
}

impl GlobalIdCounter {
    pub fn new(rank: Rank, start: u64) -> Self {
        GlobalIdCounter { rank, next: start }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn peek(&self) -> u64 {
        self.next
    }

    fn next_id(&mut self) -> GlobalAgentId {
        let id = GlobalAgentId::new(self.rank, self.next);
        self.next += 1;
        id
    }
}

/// Returns the agent's global id, assigning `(rank, next counter)` on first use.
pub fn ensure_global_id(slot: &mut Option<GlobalAgentId>, counter: &mut GlobalIdCounter) -> GlobalAgentId {
    *slot.get_or_insert_with(|| counter.next_id())
}
