//! Owned agents of one rank, either as records or still backed by the
//! migration message they arrived in.

use crate::agent::{AgentRecord, Behavior, Payload};
use crate::geom::Vec3;
use crate::ids::{GlobalAgentId, IdAllocator, LocalAgentId};
use crate::models::Outcome;
use crate::wire::schema::{self, AgentLike, AgentView};
use crate::wire::{DecodedMessage, NodeRef, WireError};

#[derive(Debug)]
enum Stored {
    Owned(AgentRecord),
    Buffered { msg: u32, node: NodeRef },
}

#[derive(Debug)]
struct Slot {
    id: LocalAgentId,
    gid: GlobalAgentId,
    agent: Stored,
}

/// Borrowed read access to a stored agent.
#[derive(Clone, Copy)]
pub enum AgentRef<'a> {
    Rec(&'a AgentRecord),
    View(AgentView<'a>),
}

macro_rules! delegate {
    ($s:expr, $a:ident => $e:expr) => {
        match $s {
            AgentRef::Rec($a) => $e,
            AgentRef::View($a) => $e,
        }
    };
}

impl AgentLike for AgentRef<'_> {
    fn global_id(&self) -> Option<GlobalAgentId> {
        delegate!(self, a => a.global_id())
    }
    fn position(&self) -> Vec3 {
        delegate!(self, a => a.position())
    }
    fn diameter(&self) -> f64 {
        delegate!(self, a => a.diameter())
    }
    fn payload(&self) -> Payload {
        delegate!(self, a => a.payload())
    }
    fn mother(&self) -> Option<GlobalAgentId> {
        delegate!(self, a => a.mother())
    }
    fn behavior_count(&self) -> usize {
        delegate!(self, a => a.behavior_count())
    }
    fn for_each_behavior(&self, f: &mut dyn FnMut(&Behavior)) {
        delegate!(self, a => a.for_each_behavior(f))
    }
}

#[derive(Debug, Default)]
pub struct AgentStore {
    ids: IdAllocator,
    slots: Vec<Option<Slot>>,
    msgs: Vec<Option<DecodedMessage>>,
    free_msgs: Vec<u32>,
}

impl AgentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.live_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn put(&mut self, gid: GlobalAgentId, agent: Stored) -> LocalAgentId {
        let id = self.ids.allocate();
        let i = id.index as usize;
        if self.slots.len() <= i {
            self.slots.resize_with(i + 1, || None);
        }
        self.slots[i] = Some(Slot { id, gid, agent });
        id
    }

    pub fn insert(&mut self, rec: AgentRecord) -> LocalAgentId {
        let gid = rec.id();
        self.put(gid, Stored::Owned(rec))
    }

    /// Keeps `msg` alive so its agents can be inserted with
    /// [`insert_buffered`](Self::insert_buffered).
    pub fn adopt_message(&mut self, msg: DecodedMessage) -> u32 {
        match self.free_msgs.pop() {
            Some(i) => {
                self.msgs[i as usize] = Some(msg);
                i
            }
            None => {
                self.msgs.push(Some(msg));
                (self.msgs.len() - 1) as u32
            }
        }
    }

    pub fn message(&self, m: u32) -> &DecodedMessage {
        self.msgs[m as usize].as_ref().expect("live message")
    }

    pub fn insert_buffered(&mut self, msg: u32, node: NodeRef) -> LocalAgentId {
        let gid = AgentView::new(self.message(msg), node).id();
        self.put(gid, Stored::Buffered { msg, node })
    }

    fn slot(&self, i: u32) -> &Slot {
        self.slots[i as usize].as_ref().expect("live slot")
    }

    pub fn gid(&self, i: u32) -> GlobalAgentId {
        self.slot(i).gid
    }

    pub fn get(&self, i: u32) -> AgentRef<'_> {
        match &self.slot(i).agent {
            Stored::Owned(r) => AgentRef::Rec(r),
            Stored::Buffered { msg, node } => AgentRef::View(AgentView::new(self.message(*msg), *node)),
        }
    }

    pub fn is_buffered(&self, i: u32) -> bool {
        matches!(self.slot(i).agent, Stored::Buffered { .. })
    }

    pub fn buffered_count(&self) -> usize {
        self.slots
            .iter()
            .flatten()
            .filter(|s| matches!(s.agent, Stored::Buffered { .. }))
            .count()
    }

    /// Live slot indices in ascending order.
    pub fn indices(&self) -> Vec<u32> {
        (0..self.slots.len() as u32).filter(|&i| self.slots[i as usize].is_some()).collect()
    }

    /// Writes the mutable part of an outcome back, in place for buffered agents.
    pub fn update(&mut self, i: u32, o: &Outcome) {
        let Some(slot) = self.slots[i as usize].as_mut() else {
            panic!("update of a free slot");
        };
        match &mut slot.agent {
            Stored::Owned(r) => {
                r.position = o.position;
                r.diameter = o.diameter;
                r.payload = o.payload;
            }
            Stored::Buffered { msg, node } => {
                let m = self.msgs[*msg as usize].as_mut().expect("live message");
                schema::set_position(m, *node, o.position);
                schema::set_diameter(m, *node, o.diameter);
                schema::set_payload(m, *node, o.payload);
            }
        }
    }

    /// Overwrites the position only.
    pub fn set_position(&mut self, i: u32, p: Vec3) {
        let Some(slot) = self.slots[i as usize].as_mut() else {
            panic!("update of a free slot");
        };
        match &mut slot.agent {
            Stored::Owned(r) => r.position = p,
            Stored::Buffered { msg, node } => {
                schema::set_position(self.msgs[*msg as usize].as_mut().expect("live message"), *node, p)
            }
        }
    }

    /// Removes the agent, copying it out of its message if buffered.
    pub fn take(&mut self, i: u32) -> Result<AgentRecord, WireError> {
        let slot = self.slots[i as usize].take().expect("live slot");
        self.ids.free(slot.id);
        match slot.agent {
            Stored::Owned(r) => Ok(r),
            Stored::Buffered { msg, node } => {
                let m = self.msgs[msg as usize].as_mut().expect("live message");
                let rec = AgentView::new(m, node).to_record();
                m.release_subtree(node)?;
                if m.is_reclaimed() {
                    self.msgs[msg as usize] = None;
                    self.free_msgs.push(msg);
                }
                Ok(rec)
            }
        }
    }

    /// Removes every agent, in slot order.
    pub fn drain(&mut self) -> Result<Vec<AgentRecord>, WireError> {
        let out = self.indices().into_iter().map(|i| self.take(i)).collect();
        debug_assert!(self.msgs.iter().all(Option::is_none));
        self.slots.clear();
        self.ids.clear();
        self.msgs.clear();
        self.free_msgs.clear();
        out
    }

    pub fn live_messages(&self) -> usize {
        self.msgs.iter().flatten().count()
    }
}
