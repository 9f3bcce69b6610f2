//! One rank of a distributed run: agent operations with aura exchange,
//! migration, load balancing and the periodic sort.

mod stats;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use thiserror::Error;

pub use stats::IterationStats;
pub use store::{AgentRef, AgentStore};

use crate::agent::{AgentRecord, Payload};
use crate::compress::{compress, decompress, CompressError};
use crate::config::{ConfigError, LbCost, RunConfig};
use crate::delta::{delta_decode, delta_encode, DeltaError, Direction, ReferenceStore};
use crate::geom::{Aabb, Vec3};
use crate::grid::{morton, GridEntry, GridError, NeighborGrid};
use crate::ids::{ensure_global_id, GlobalAgentId, GlobalIdCounter, Rank};
use crate::loadbalance::{apply_transfers, box_weights, diffusive_rebalance, rcb_rebalance, LbMode};
use crate::models::{evaluate, reflect, Ctx, Outcome};
use crate::partition::{AuraSpec, BoxIndex, PartitionError, PartitionGrid};
use crate::rng::{CounterRng, Stream};
use crate::transport::{Endpoint, Tag, TransportError};
use crate::wire::schema::{agent_registry, field, AgentLike, AgentView, BatchEncoder};
use crate::wire::{decode, encode, measure, BufferAccounting, DecodedMessage, Registry, WireBuffer, WireError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Delta(#[from] DeltaError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("ranks out of step at iteration {iteration}: {detail}")]
    DesyncDetected { iteration: u64, detail: String },
    #[error("unknown frame mode {0:?}")]
    FrameMode(Option<u8>),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Test and instrumentation hooks.
#[derive(Clone, Default)]
pub struct RunHooks {
    /// Called on every surviving agent's new position after agent operations.
    #[allow(clippy::type_complexity)]
    pub after_ops: Option<Arc<dyn Fn(u64, GlobalAgentId, &mut Vec3) + Send + Sync>>,
}

const PHASE_LB: u64 = 1;
const PHASE_LOOKUP: u64 = 2;
pub(crate) const PHASE_SIR: u64 = 3;
pub(crate) const PHASE_END: u64 = 4;

pub(crate) fn phase(iteration: u64, code: u64) -> u64 {
    iteration << 8 | code
}

const MODE_PLAIN: u8 = 0;
const MODE_LZ4: u8 = 1;
const MODE_DELTA: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum GridKey {
    Owned(u32),
    Aura(u32),
}

fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: ts is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

fn entry_of<A: AgentLike + ?Sized>(key: GridKey, a: &A, aura: bool) -> GridEntry<GridKey> {
    GridEntry {
        key,
        gid: a.id(),
        pos: a.position(),
        diameter: a.diameter(),
        tag: a.payload().tag(),
        aura,
    }
}

/// Largest-remainder split of `n` proportional to `volumes`; leftover units go
/// to the largest fractional parts, lower index first on ties.
pub fn apportion(n: u64, volumes: &[f64]) -> Vec<u64> {
    let total: f64 = volumes.iter().sum();
    if total <= 0.0 {
        return vec![0; volumes.len()];
    }
    let quotas: Vec<f64> = volumes.iter().map(|v| n as f64 * v / total).collect();
    let mut out: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let mut left = n.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..volumes.len()).filter(|&i| volumes[i] > 0.0).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Per-box initial counts over the whole space.
pub fn initial_box_counts(cfg: &RunConfig, part: &PartitionGrid) -> Vec<u64> {
    let region = cfg.population.region.map_or(part.bounds(), |r| r.aabb());
    let vols: Vec<f64> = (0..part.box_count())
        .map(|b| part.box_region(b).intersection(&region).map_or(0.0, |x| x.volume()))
        .collect();
    apportion(cfg.population.count, &vols)
}

/// The agents initially on the boxes owned by `rank`. Agent `i` of the
/// population gets id `(0, i)` and positions drawn from keyed streams, so
/// the population does not depend on the rank count.
pub fn initial_agents(cfg: &RunConfig, part: &PartitionGrid, rank: Rank) -> Vec<AgentRecord> {
    let rng = CounterRng::new(cfg.sim.seed);
    let region = cfg.population.region.map_or(part.bounds(), |r| r.aabb());
    let counts = initial_box_counts(cfg, part);
    let mut first = 0u64;
    let mut out = Vec::new();
    for (b, &c) in counts.iter().enumerate() {
        if part.owner(b) == rank && c > 0 {
            let sub = part.box_region(b).intersection(&region).expect("counted box intersects region");
            for i in first..first + c {
                let u = |s| rng.uniform_keyed(i, 0, s);
                let p: [f64; 3] = std::array::from_fn(|d| {
                    let s = [Stream::InitX, Stream::InitY, Stream::InitZ][d];
                    (sub.lo[d] + u(s) * (sub.hi[d] - sub.lo[d])).min(sub.hi[d]).max(sub.lo[d])
                });
                out.push(cfg.make_agent(Vec3(p), u(Stream::InitKind)).with_id(GlobalAgentId::new(0, i)));
            }
        }
        first += c;
    }
    out
}

fn with_mode(mut payload: Vec<u8>, mode: u8) -> Vec<u8> {
    payload.push(mode);
    payload
}

pub struct RankRuntime {
    ep: Endpoint,
    cfg: RunConfig,
    reg: Arc<Registry>,
    acc: Arc<BufferAccounting>,
    part: PartitionGrid,
    cache: Vec<bool>,
    cache_neighbors: BTreeSet<Rank>,
    aura: AuraSpec,
    boundary: Vec<bool>,
    store: AgentStore,
    grid: NeighborGrid<GridKey>,
    aura_count: u32,
    refs: ReferenceStore,
    counter: GlobalIdCounter,
    rng: CounterRng,
    hooks: RunHooks,
    iteration: u64,
    work_since_lb: u64,
    cpu_since_lb: f64,
    bounds: Aabb,
}

impl RankRuntime {
    /// Builds the initial partition and the rank's share of the population.
    pub fn new(ep: Endpoint, cfg: RunConfig, hooks: RunHooks) -> Result<Self, EngineError> {
        cfg.validate()?;
        let rank = ep.rank();
        if ep.size() != cfg.sim.rank_count {
            return Err(EngineError::Config(ConfigError::Invalid {
                field: "sim.rank_count",
                message: format!("transport has {} ranks", ep.size()),
            }));
        }
        let bounds = cfg.sim.space.aabb();
        let part = PartitionGrid::build(bounds, cfg.sim.interaction_radius, cfg.sim.box_factor, ep.size(), None)?;
        let grid = NeighborGrid::new(bounds, cfg.sim.interaction_radius);
        let mut rt = RankRuntime {
            reg: agent_registry(),
            acc: BufferAccounting::new(),
            cache: Vec::new(),
            cache_neighbors: BTreeSet::new(),
            aura: AuraSpec::default(),
            boundary: Vec::new(),
            store: AgentStore::new(),
            grid,
            aura_count: 0,
            refs: ReferenceStore::new(),
            counter: GlobalIdCounter::new(rank, cfg.population.count),
            rng: CounterRng::new(cfg.sim.seed),
            hooks,
            iteration: 0,
            work_since_lb: 0,
            cpu_since_lb: 0.0,
            bounds,
            part,
            cfg,
            ep,
        };
        rt.refresh_partition();
        for a in initial_agents(&rt.cfg, &rt.part, rank) {
            rt.insert_owned(a)?;
        }
        Ok(rt)
    }

    pub fn rank(&self) -> Rank {
        self.ep.rank()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn partition(&self) -> &PartitionGrid {
        &self.part
    }

    pub fn endpoint(&mut self) -> &mut Endpoint {
        &mut self.ep
    }

    pub fn accounting(&self) -> &Arc<BufferAccounting> {
        &self.acc
    }

    pub fn agent_count(&self) -> usize {
        self.store.len()
    }

    /// Copies of all owned agents, sorted by id.
    pub fn agents(&self) -> Vec<AgentRecord> {
        let mut v: Vec<AgentRecord> = self
            .store
            .indices()
            .into_iter()
            .map(|i| match self.store.get(i) {
                AgentRef::Rec(r) => r.clone(),
                AgentRef::View(v) => v.to_record(),
            })
            .collect();
        v.sort_by_key(|a| a.id());
        v
    }

    /// Owned (S, I, R) counts; zero for non-SIR agents.
    pub fn sir_counts(&self) -> [u64; 3] {
        let mut c = [0u64; 3];
        for i in self.store.indices() {
            if let Payload::Sir { state } = self.store.get(i).payload() {
                c[state as usize] += 1;
            }
        }
        c
    }

    fn refresh_partition(&mut self) {
        let r = self.rank();
        self.cache = self.part.cached_boxes(r);
        self.cache_neighbors = self.part.neighbor_ranks(r);
        self.aura = self.part.compute_aura_spec(r);
        let cd = self.part.cell_dims();
        self.boundary = vec![false; cd[0] * cd[1] * cd[2]];
        for t in self.aura.neighbors.values() {
            for c in &t.cells {
                self.boundary[(c[2] * cd[1] + c[1]) * cd[0] + c[0]] = true;
            }
        }
    }

    fn is_boundary(&self, p: Vec3) -> bool {
        let c = self.part.cell_of(p);
        let cd = self.part.cell_dims();
        self.boundary[(c[2] * cd[1] + c[1]) * cd[0] + c[0]]
    }

    fn insert_owned(&mut self, a: AgentRecord) -> Result<u32, EngineError> {
        let e = |i| entry_of(GridKey::Owned(i), &a, false);
        let pending = e(0);
        let i = self.store.insert(a).index;
        self.grid.insert(GridEntry {
            key: GridKey::Owned(i),
            ..pending
        })?;
        Ok(i)
    }

    fn take_owned(&mut self, i: u32) -> Result<AgentRecord, EngineError> {
        self.grid.remove(GridKey::Owned(i))?;
        Ok(self.store.take(i)?)
    }

    fn desync(&self, detail: impl Into<String>) -> EngineError {
        EngineError::DesyncDetected {
            iteration: self.iteration,
            detail: detail.into(),
        }
    }

    fn collective_error(&self, e: TransportError) -> EngineError {
        match e {
            TransportError::CollectiveMismatch { expected, got, rank } => {
                self.desync(format!("phase {expected:#x} against {got:#x} from rank {rank}"))
            }
            e => EngineError::Transport(e),
        }
    }

    fn sum(&mut self, code: u64, v: &[u64]) -> Result<Vec<u64>, EngineError> {
        let p = phase(self.iteration, code);
        self.ep.sum_over_all_ranks(p, v).map_err(|e| self.collective_error(e))
    }

    /// Sums `v` over all ranks under a phase tied to the current iteration.
    pub fn sum_over_all_ranks(&mut self, v: &[u64]) -> Result<Vec<u64>, EngineError> {
        self.sum(PHASE_SIR, v)
    }

    /// Materializes buffered agents, so every message buffer has been
    /// reclaimed, and waits for all ranks.
    pub fn finish(&mut self) -> Result<(), EngineError> {
        self.sort()?;
        let p = phase(self.iteration, PHASE_END);
        self.ep.barrier(p).map_err(|e| self.collective_error(e))?;
        self.ep.flush_all(std::time::Duration::from_secs(30))?;
        Ok(())
    }

    fn decode_batch(&self, bytes: Vec<u8>) -> Result<DecodedMessage, EngineError> {
        Ok(decode(WireBuffer::adopt(bytes, &self.acc), &self.reg)?)
    }

    fn encode_batch(&self, agents: &[AgentRecord]) -> Result<Vec<u8>, EngineError> {
        let slots: Vec<Option<&AgentRecord>> = agents.iter().map(Some).collect();
        let buf = encode(
            &BatchEncoder {
                iteration: self.iteration,
                slots: &slots,
            },
            &self.reg,
            &self.acc,
        )?;
        Ok(if self.cfg.compress {
            with_mode(compress(buf.as_bytes()), MODE_LZ4)
        } else {
            with_mode(buf.into_bytes(), MODE_PLAIN)
        })
    }

    fn unwrap_batch(&self, mut bytes: Vec<u8>) -> Result<Vec<u8>, EngineError> {
        match bytes.pop() {
            Some(MODE_PLAIN) => Ok(bytes),
            Some(MODE_LZ4) => Ok(decompress(&bytes)?),
            m => Err(EngineError::FrameMode(m)),
        }
    }

    /// Runs one iteration.
    pub fn step(&mut self) -> Result<IterationStats, EngineError> {
        let t = self.iteration;
        let sent_before = self.ep.counters().sent;
        let mut st = IterationStats {
            rank: self.rank(),
            iteration: t,
            ..Default::default()
        };

        // aura out
        let t0 = Instant::now();
        for i in 0..self.aura_count {
            self.grid.remove(GridKey::Aura(i))?;
        }
        self.aura_count = 0;
        let peers: Vec<Rank> = self.aura.neighbors.keys().copied().collect();
        for &peer in &peers {
            let msg = self.aura_frame(peer, &mut st)?;
            self.ep.isend(peer, Tag::Aura, &msg)?;
        }
        let mut t_aura = t0.elapsed().as_secs_f64();

        // interior operations overlap the aura in flight
        let ops_start = Instant::now();
        let cpu_start = thread_cpu_seconds();
        let mut order: Vec<(GlobalAgentId, u32)> =
            self.store.indices().into_iter().map(|i| (self.store.gid(i), i)).collect();
        order.sort_unstable();
        let (boundary, interior): (Vec<_>, Vec<_>) =
            order.into_iter().partition(|&(_, i)| self.is_boundary(self.store.get(i).position()));
        let mut outcomes = Vec::with_capacity(boundary.len() + interior.len());
        st.work += self.compute(&interior, &mut outcomes)?;
        st.t_overlap = ops_start.elapsed().as_secs_f64();
        let mut t_ops = st.t_overlap;

        let t1 = Instant::now();
        for &peer in &peers {
            let bytes = self
                .ep
                .recv_matched(peer, Tag::Aura, true)?
                .ok_or_else(|| self.desync(format!("no aura from {peer}")))?;
            st.aura_agents += self.absorb_aura(peer, bytes)?;
            self.ep.post_speculative(peer, Tag::Aura);
        }
        t_aura += t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        st.work += self.compute(&boundary, &mut outcomes)?;
        outcomes.sort_unstable_by_key(|o| o.0);
        st.contacts = outcomes.iter().map(|o| o.2.contacts as u64).sum();
        self.apply(outcomes)?;
        t_ops += t2.elapsed().as_secs_f64();
        st.t_ops = t_ops;
        st.t_ops_cpu = thread_cpu_seconds() - cpu_start;
        st.t_aura = t_aura;
        self.work_since_lb += st.work;
        self.cpu_since_lb += st.t_ops_cpu;

        let t3 = Instant::now();
        self.migrate(&mut st)?;
        st.t_migrate = t3.elapsed().as_secs_f64();

        let t4 = Instant::now();
        let l = self.cfg.sim.lb_interval;
        if t % l == 0 && t > 0 {
            if self.cfg.lb != LbMode::None {
                st.lb_moved = self.rebalance()?;
            }
            self.sort()?;
            self.work_since_lb = 0;
            self.cpu_since_lb = 0.0;
        }
        st.t_lb = t4.elapsed().as_secs_f64();

        st.agents = self.store.len() as u64;
        let sent = self.ep.counters().sent;
        for tag in Tag::ALL {
            st.bytes_sent[tag as usize] = sent[tag as usize].bytes - sent_before[tag as usize].bytes;
        }
        st.live_buffers_high_water = self.acc.take_high_water();
        self.iteration += 1;
        Ok(st)
    }

    fn aura_frame(&mut self, peer: Rank, st: &mut IterationStats) -> Result<Vec<u8>, EngineError> {
        let target = &self.aura.neighbors[&peer];
        let mut keys = Vec::new();
        for c in &target.cells {
            self.grid.for_each_in_cells(*c, c.map(|v| v + 1), |e| {
                if let GridKey::Owned(i) = e.key {
                    keys.push((e.gid, i));
                }
            });
        }
        keys.sort_unstable();
        let agents: Vec<AgentRef<'_>> = keys.iter().map(|&(_, i)| self.store.get(i)).collect();
        let t = self.iteration;
        let slots: Vec<Option<AgentRef<'_>>> = agents.iter().copied().map(Some).collect();
        let plain = BatchEncoder {
            iteration: t,
            slots: &slots,
        };
        st.aura_plain_bytes += measure(&plain, &self.reg)? as u64 + 1;
        if self.cfg.delta {
            let ef = delta_encode(t, &agents, self.refs.get(peer, Direction::Sent), &self.reg, &self.acc)?;
            drop(slots);
            drop(agents);
            self.refs
                .maybe_update(peer, Direction::Sent, t, self.cfg.sim.reference_interval, &ef.matched, &self.reg)?;
            return Ok(with_mode(ef.frame, MODE_DELTA));
        }
        let buf = encode(&plain, &self.reg, &self.acc)?;
        Ok(if self.cfg.compress {
            with_mode(compress(buf.as_bytes()), MODE_LZ4)
        } else {
            with_mode(buf.into_bytes(), MODE_PLAIN)
        })
    }

    fn absorb_aura(&mut self, peer: Rank, mut bytes: Vec<u8>) -> Result<u64, EngineError> {
        let t = self.iteration;
        let plain = match bytes.pop() {
            Some(MODE_DELTA) => {
                let matched = delta_decode(&bytes, self.refs.get(peer, Direction::Received), &self.reg)?;
                self.refs.maybe_update(
                    peer,
                    Direction::Received,
                    t,
                    self.cfg.sim.reference_interval,
                    &matched,
                    &self.reg,
                )?;
                matched
            }
            Some(MODE_LZ4) => decompress(&bytes)?,
            Some(MODE_PLAIN) => bytes,
            m => return Err(EngineError::FrameMode(m)),
        };
        let mut msg = self.decode_batch(plain)?;
        let root = msg.root();
        if msg.scalar(root, field::ITERATION).as_u64() != Some(t) {
            return Err(self.desync(format!("aura from {peer} is for another iteration")));
        }
        let mut n = 0;
        for k in 0..msg.seq_len(root, field::AGENTS) {
            let Some(node) = msg.seq_node(root, field::AGENTS, k) else {
                continue;
            };
            let key = GridKey::Aura(self.aura_count);
            self.aura_count += 1;
            self.grid.insert(entry_of(key, &AgentView::new(&msg, node), true))?;
            msg.release_subtree(node)?;
            n += 1;
        }
        msg.release(msg.handle(root))?;
        debug_assert!(msg.is_reclaimed());
        Ok(n)
    }

    fn compute(&self, ids: &[(GlobalAgentId, u32)], out: &mut Vec<(GlobalAgentId, u32, Outcome)>) -> Result<u64, EngineError> {
        let ctx = Ctx {
            rng: &self.rng,
            iteration: self.iteration,
            bounds: self.bounds,
        };
        let r = self.cfg.sim.interaction_radius;
        let mut buf = Vec::new();
        let mut work = 0;
        for &(gid, i) in ids {
            let a = self.store.get(i);
            self.grid.neighbors_into(a.position(), r, Some(gid), &mut buf)?;
            work += buf.len() as u64 + 1;
            out.push((gid, i, evaluate(&a, &buf, &ctx)));
        }
        Ok(work)
    }

    fn apply(&mut self, outcomes: Vec<(GlobalAgentId, u32, Outcome)>) -> Result<(), EngineError> {
        let t = self.iteration;
        for (gid, i, mut o) in outcomes {
            if let Some(daughters) = o.divide {
                let mother = self.take_owned(i)?;
                let (cell_type, generation) = match o.payload {
                    Payload::Cell {
                        cell_type,
                        generation,
                    } => (cell_type, generation),
                    Payload::Sir { .. } => (0, 0),
                };
                for d in daughters {
                    let mut id = None;
                    ensure_global_id(&mut id, &mut self.counter);
                    self.insert_owned(AgentRecord {
                        global_id: id,
                        position: d.position,
                        diameter: d.diameter,
                        payload: Payload::Cell {
                            cell_type,
                            generation: generation + 1,
                        },
                        behaviors: mother.behaviors.clone(),
                        mother: Some(gid),
                    })?;
                }
                continue;
            }
            if let Some(h) = &self.hooks.after_ops {
                h(t, gid, &mut o.position);
                o.position = reflect(o.position, &self.bounds);
            }
            self.store.update(i, &o);
            self.grid.move_to(GridKey::Owned(i), o.position)?;
            self.grid.set_attrs(GridKey::Owned(i), o.diameter, o.payload.tag())?;
        }
        Ok(())
    }

    fn migrate(&mut self, st: &mut IterationStats) -> Result<(), EngineError> {
        let me = self.rank();
        let mut outgoing: BTreeMap<Rank, Vec<AgentRecord>> = BTreeMap::new();
        let mut unresolved: Vec<(u32, BoxIndex)> = Vec::new();
        for i in self.store.indices() {
            let p = self.store.get(i).position();
            let b = self.part.box_of(p);
            if self.part.owner(b) == me {
                continue;
            }
            match self.part.authoritative_rank(p, Some(&self.cache))? {
                Some(r) => {
                    outgoing.entry(r).or_default().push(self.take_owned(i)?);
                    st.migrations_direct += 1;
                }
                None => unresolved.push((i, b)),
            }
        }

        // owners beyond the cache are found by asking everyone
        let mut claimed_from = BTreeSet::new();
        let pending = self.sum(PHASE_LOOKUP, &[unresolved.len() as u64])?[0];
        if pending > 0 {
            let others: Vec<Rank> = (0..self.ep.size() as Rank).filter(|&r| r != me).collect();
            let req: Vec<u8> = unresolved.iter().flat_map(|&(_, b)| (b as u32).to_le_bytes()).collect();
            for &q in &others {
                self.ep.isend(q, Tag::LookupReq, &req)?;
            }
            for &q in &others {
                let m = self.ep.recv_matched(q, Tag::LookupReq, true)?.unwrap_or_default();
                let claims: Vec<u8> = m
                    .chunks_exact(4)
                    .enumerate()
                    .filter(|(_, c)| self.part.owner(u32::from_le_bytes((*c).try_into().unwrap()) as usize) == me)
                    .flat_map(|(k, _)| (k as u32).to_le_bytes())
                    .collect();
                if !claims.is_empty() {
                    claimed_from.insert(q);
                }
                self.ep.isend(q, Tag::LookupResp, &claims)?;
            }
            let mut dest: Vec<Option<Rank>> = vec![None; unresolved.len()];
            for &q in &others {
                let m = self.ep.recv_matched(q, Tag::LookupResp, true)?.unwrap_or_default();
                for c in m.chunks_exact(4) {
                    let k = u32::from_le_bytes(c.try_into().unwrap()) as usize;
                    if k >= dest.len() || dest[k].replace(q).is_some() {
                        return Err(self.desync(format!("bad lookup claim {k} from {q}")));
                    }
                }
            }
            for (k, &(i, b)) in unresolved.iter().enumerate() {
                let r = dest[k].ok_or_else(|| self.desync(format!("nobody owns box {b}")))?;
                outgoing.entry(r).or_default().push(self.take_owned(i)?);
                st.migrations_collective += 1;
            }
        }

        let mut send_to: BTreeSet<Rank> = self.cache_neighbors.clone();
        send_to.extend(outgoing.keys().copied());
        for &q in &send_to {
            let agents = outgoing.remove(&q).unwrap_or_default();
            let msg = self.encode_batch(&agents)?;
            self.ep.isend(q, Tag::Migrate, &msg)?;
        }
        let mut recv_from = self.cache_neighbors.clone();
        recv_from.extend(claimed_from);
        for &q in &recv_from {
            let bytes = self
                .ep
                .recv_matched(q, Tag::Migrate, true)?
                .ok_or_else(|| self.desync(format!("no migration message from {q}")))?;
            self.absorb_migrants(bytes, Tag::Migrate)?;
        }
        #[cfg(debug_assertions)]
        for i in self.store.indices() {
            let p = self.store.get(i).position();
            if self.part.owner(self.part.box_of(p)) != me {
                return Err(self.desync(format!("agent {} at {p:?} left unowned", self.store.gid(i))));
            }
        }
        Ok(())
    }

    fn absorb_migrants(&mut self, bytes: Vec<u8>, tag: Tag) -> Result<usize, EngineError> {
        let plain = self.unwrap_batch(bytes)?;
        let mut msg = self.decode_batch(plain)?;
        let root = msg.root();
        if msg.scalar(root, field::ITERATION).as_u64() != Some(self.iteration) {
            return Err(self.desync(format!("{} batch is for another iteration", tag.name())));
        }
        let nodes: Vec<_> = (0..msg.seq_len(root, field::AGENTS))
            .filter_map(|k| msg.seq_node(root, field::AGENTS, k))
            .collect();
        msg.release(msg.handle(root))?;
        if nodes.is_empty() {
            return Ok(0);
        }
        let m = self.store.adopt_message(msg);
        for &node in &nodes {
            let i = self.store.insert_buffered(m, node).index;
            let e = entry_of(GridKey::Owned(i), &self.store.get(i), false);
            self.grid.insert(e)?;
        }
        Ok(nodes.len())
    }

    /// New ownership from allgathered loads; returns the agents handed away.
    fn rebalance(&mut self) -> Result<u64, EngineError> {
        let me = self.rank();
        let n = self.ep.size();
        let runtime = match self.cfg.lb_cost {
            LbCost::Work => self.work_since_lb as f64,
            LbCost::Measured => self.cpu_since_lb,
        };
        let mut per_box: BTreeMap<BoxIndex, u32> = BTreeMap::new();
        for i in self.store.indices() {
            *per_box.entry(self.part.box_of(self.store.get(i).position())).or_default() += 1;
        }
        let mut blob = runtime.to_le_bytes().to_vec();
        blob.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for (&b, &c) in &per_box {
            blob.extend_from_slice(&(b as u32).to_le_bytes());
            blob.extend_from_slice(&c.to_le_bytes());
        }
        let p = phase(self.iteration, PHASE_LB);
        let all = self.ep.allgather(p, &blob).map_err(|e| self.collective_error(e))?;
        let mut runtimes = vec![0.0; n];
        let mut rank_agents = vec![0u64; n];
        let mut box_agents = vec![0u64; self.part.box_count()];
        for (r, b) in all.iter().enumerate() {
            if b.len() < 16 || (b.len() - 16) % 8 != 0 {
                return Err(self.desync(format!("load report from {r} has {} bytes", b.len())));
            }
            runtimes[r] = f64::from_le_bytes(b[0..8].try_into().unwrap());
            rank_agents[r] = u64::from_le_bytes(b[8..16].try_into().unwrap());
            for c in b[16..].chunks_exact(8) {
                let bx = u32::from_le_bytes(c[0..4].try_into().unwrap()) as usize;
                box_agents[bx] += u32::from_le_bytes(c[4..8].try_into().unwrap()) as u64;
            }
        }
        let weights = box_weights(&self.part, &box_agents, &runtimes, &rank_agents);
        let owner = match self.cfg.lb {
            LbMode::None => return Ok(0),
            LbMode::Diffusive => apply_transfers(
                self.part.owners(),
                &diffusive_rebalance(&self.part, &runtimes, &weights),
            ),
            LbMode::Rcb => rcb_rebalance(&self.part, &weights)?,
        };
        if owner == self.part.owners() {
            return Ok(0);
        }
        let old_peers: Vec<Rank> = self.aura.neighbors.keys().copied().collect();
        self.part.set_owners(owner);
        self.refresh_partition();
        for q in old_peers {
            if !self.aura.neighbors.contains_key(&q) {
                self.refs.drop_peer(q);
                self.ep.cancel_speculative(q, Tag::Aura);
            }
        }

        let mut outgoing: BTreeMap<Rank, Vec<AgentRecord>> = BTreeMap::new();
        for i in self.store.indices() {
            let o = self.part.owner(self.part.box_of(self.store.get(i).position()));
            if o != me {
                outgoing.entry(o).or_default().push(self.take_owned(i)?);
            }
        }
        let moved = outgoing.values().map(Vec::len).sum::<usize>() as u64;
        for q in (0..n as Rank).filter(|&q| q != me) {
            let agents = outgoing.remove(&q).unwrap_or_default();
            let msg = self.encode_batch(&agents)?;
            self.ep.isend(q, Tag::Lb, &msg)?;
        }
        for q in (0..n as Rank).filter(|&q| q != me) {
            let bytes = self
                .ep
                .recv_matched(q, Tag::Lb, true)?
                .ok_or_else(|| self.desync(format!("no rebalance message from {q}")))?;
            self.absorb_migrants(bytes, Tag::Lb)?;
        }
        Ok(moved)
    }

    /// Reorders local storage along a space-filling curve, copying buffered
    /// agents out of their messages.
    fn sort(&mut self) -> Result<(), EngineError> {
        for i in self.store.indices() {
            self.grid.remove(GridKey::Owned(i))?;
        }
        let mut all = self.store.drain()?;
        let part = &self.part;
        all.sort_by_cached_key(|a| (morton(part.cell_of(a.position)), a.id()));
        for a in all {
            self.insert_owned(a)?;
        }
        Ok(())
    }
}

/// State counts of a set of SIR agents.
pub fn count_states<'a>(agents: impl IntoIterator<Item = &'a AgentRecord>) -> [u64; 3] {
    let mut c = [0; 3];
    for a in agents {
        if let Payload::Sir { state } = a.payload {
            c[state as usize] += 1;
        }
    }
    c
}

