//! Self-checks runnable from the command line: fuzzed codec roundtrips,
//! grid queries against brute force, and rank-count invariance.

use std::sync::Arc;

use crate::agent::AgentRecord;
use crate::config::RunConfig;
use crate::delta::{delta_decode, delta_encode, Reference};
use crate::engine::RunHooks;
use crate::geom::{Aabb, Vec3};
use crate::grid::{GridEntry, NeighborGrid};
use crate::ids::GlobalAgentId;
use crate::sim::{merged_agents, run_inproc};
use crate::testkit::{brute, fuzz_registry, random_agent, random_entries, random_node, FuzzRng};
use crate::wire::schema::{self, agent_registry, AgentView, BatchEncoder};
use crate::wire::{decode, encode, BufferAccounting, WireBuffer};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Generic trees and typed agent batches survive encode/decode, with one
/// buffer acquisition and no payload copies per message.
pub fn wire_roundtrip(cases: usize, seed: u64) -> Check {
    let fuzz = Arc::new(fuzz_registry());
    let root_class = fuzz.id_of("Root").ok_or("fuzz registry has no Root")?;
    let reg = agent_registry();
    let mut r = FuzzRng::new(seed);
    for case in 0..cases {
        let acc = BufferAccounting::new();
        let tree = random_node(&fuzz, root_class, 4, 16, &mut r);
        let buf = encode(&tree, &fuzz, &acc).map_err(|e| format!("case {case}: {e}"))?;
        let msg = decode(buf, &fuzz).map_err(|e| format!("case {case}: {e}"))?;
        let s = acc.snapshot();
        ensure!(s.acquired == 1, "case {case}: {} buffer acquisitions for one tree", s.acquired);
        ensure!(s.payload_bytes_copied == 0, "case {case}: decode copied {} payload bytes", s.payload_bytes_copied);
        ensure!(msg.to_node(msg.root()) == tree, "case {case}: tree differs after decode");

        let acc = BufferAccounting::new();
        let n = r.below(12);
        let agents: Vec<Option<AgentRecord>> = (0..n)
            .map(|i| (!r.chance(0.2)).then(|| random_agent(GlobalAgentId::new(3, i as u64), 3, &mut r)))
            .collect();
        let slots: Vec<Option<&AgentRecord>> = agents.iter().map(Option::as_ref).collect();
        let buf = encode(
            &BatchEncoder {
                iteration: case as u64,
                slots: &slots,
            },
            &reg,
            &acc,
        )
        .map_err(|e| format!("case {case}: {e}"))?;
        let batch = decode(buf, &reg).map_err(|e| format!("case {case}: {e}"))?;
        let s = acc.snapshot();
        ensure!(s.acquired == 1, "case {case}: {} buffer acquisitions for one batch", s.acquired);
        ensure!(s.payload_bytes_copied == 0, "case {case}: decode copied {} payload bytes", s.payload_bytes_copied);
        let root = batch.root();
        for (i, want) in agents.iter().enumerate() {
            let got = batch
                .seq_node(root, schema::field::AGENTS, i)
                .map(|nd| AgentView::new(&batch, nd).to_record());
            let same = match (&got, want) {
                (Some(g), Some(w)) => g.bitwise_eq(w),
                (None, None) => true,
                _ => false,
            };
            ensure!(same, "case {case}: agent slot {i} differs");
        }
    }
    Ok(format!("{cases} trees and {cases} agent batches"))
}

fn sorted_records(matched: Vec<u8>, acc: &Arc<BufferAccounting>) -> Result<Vec<AgentRecord>, String> {
    let reg = agent_registry();
    let mut msg = decode(WireBuffer::adopt(matched, acc), &reg).map_err(|e| e.to_string())?;
    let root = msg.root();
    let n = msg.seq_compact(root, schema::field::AGENTS);
    let mut v: Vec<AgentRecord> = (0..n)
        .filter_map(|i| msg.seq_node(root, schema::field::AGENTS, i))
        .map(|nd| AgentView::new(&msg, nd).to_record())
        .collect();
    msg.release_all();
    v.sort_by_key(|a| a.id());
    Ok(v)
}

/// Random (message, reference) pairs: decoding an encoded frame against the
/// same reference reproduces the message as a multiset, field for field.
pub fn delta_roundtrip(cases: usize, seed: u64) -> Check {
    let reg = agent_registry();
    let acc = BufferAccounting::new();
    let mut r = FuzzRng::new(seed);
    for case in 0..cases {
        let pool: Vec<AgentRecord> = (0..r.below(40) as u64)
            .map(|i| random_agent(GlobalAgentId::new(1, i), 3, &mut r))
            .collect();
        let reference: Vec<AgentRecord> = pool.iter().filter(|_| r.chance(0.6)).cloned().collect();
        let mut message = Vec::new();
        for a in &pool {
            if !r.chance(0.6) {
                continue;
            }
            let mut a = a.clone();
            if r.chance(0.5) {
                a.position = Vec3::new(r.f64_any(), r.f64_any(), r.f64_any());
            }
            if r.chance(0.3) {
                a.diameter = r.unit() * 3.0;
            }
            message.push(a);
        }
        for k in 0..r.below(4) {
            message.push(random_agent(GlobalAgentId::new(2, k as u64), 3, &mut r));
        }
        let rf = if reference.is_empty() && r.chance(0.5) {
            None
        } else {
            let e = delta_encode(0, &reference, None, &reg, &acc).map_err(|e| e.to_string())?;
            Some(Reference::from_matched(e.matched, 1 + case as u64, &reg).map_err(|e| e.to_string())?)
        };
        let e = delta_encode(case as u64, &message, rf.as_ref(), &reg, &acc).map_err(|e| format!("case {case}: {e}"))?;
        let matched = delta_decode(&e.frame, rf.as_ref(), &reg).map_err(|e| format!("case {case}: {e}"))?;
        let got = sorted_records(matched, &acc)?;
        message.sort_by_key(|a| a.id());
        ensure!(got.len() == message.len(), "case {case}: {} agents, want {}", got.len(), message.len());
        ensure!(
            got.iter().zip(&message).all(|(a, b)| a.bitwise_eq(b)),
            "case {case}: decoded agents differ"
        );
    }
    ensure!(acc.live() == 0, "{} buffers still live", acc.live());
    Ok(format!("{cases} pairs"))
}

/// Neighbor and region queries against brute force.
pub fn grid_oracle(configs: usize, agents: usize, seed: u64) -> Check {
    let bounds = Aabb::new([0.0, -5.0, 10.0], [30.0, 20.0, 33.0]);
    let mut r = FuzzRng::new(seed);
    let mut queries = 0;
    for c in 0..configs {
        let all = random_entries(agents, &bounds, &mut r);
        let edge = 1.0 + r.unit() * 4.0;
        let mut g = NeighborGrid::new(bounds, edge);
        for e in &all {
            g.insert(*e).map_err(|e| e.to_string())?;
        }
        let ids = |v: &[GridEntry<u32>]| v.iter().map(|e| e.gid).collect::<Vec<_>>();
        for _ in 0..20 {
            let q = all[r.below(all.len())];
            let radius = r.unit() * edge;
            let got = g.neighbors_sorted(q.pos, radius, Some(q.gid)).map_err(|e| e.to_string())?;
            ensure!(
                ids(&got) == brute::neighbors(&all, q.pos, radius, Some(q.gid)),
                "config {c}: neighbors of {} differ",
                q.gid
            );
            let (a, b) = (r.unit(), r.unit());
            let lo: [f64; 3] = std::array::from_fn(|d| bounds.lo[d] + a.min(b) * (bounds.hi[d] - bounds.lo[d]));
            let hi: [f64; 3] = std::array::from_fn(|d| bounds.lo[d] + a.max(b) * (bounds.hi[d] - bounds.lo[d]));
            let region = Aabb::new(lo, hi);
            ensure!(
                ids(&g.query_region(&region)) == brute::region(&all, &region),
                "config {c}: region query differs"
            );
            queries += 2;
        }
    }
    Ok(format!("{configs} configurations, {queries} queries"))
}

/// Sorted (id, position bits, type) of every agent after a run.
pub fn fingerprint(agents: &[AgentRecord]) -> Vec<(GlobalAgentId, [u64; 3], u32)> {
    agents
        .iter()
        .map(|a| (a.id(), a.position.to_bits(), a.payload.tag()))
        .collect()
}

/// Runs `cfg` once per rank count; all final states must be bitwise equal.
pub fn rank_invariance(cfg: &RunConfig, ranks: &[usize]) -> Check {
    let mut base = None;
    for &n in ranks {
        let mut c = cfg.clone();
        c.sim.rank_count = n;
        let res = run_inproc(&c, RunHooks::default()).map_err(|e| format!("{n} ranks: {e}"))?;
        let f = fingerprint(&merged_agents(&res));
        match &base {
            None => base = Some(f),
            Some(b) => ensure!(*b == f, "{n} ranks differ from {} ranks", ranks[0]),
        }
    }
    Ok(format!(
        "{} agents after {} iterations on {ranks:?} ranks",
        cfg.population.count, cfg.iterations
    ))
}

/// All suites at small sizes, in order.
pub fn all_suites() -> Vec<(&'static str, Check)> {
    let mut cfg = RunConfig::default();
    cfg.population.count = 2000;
    cfg.sim.space.hi = [16.0; 3];
    cfg.iterations = 20;
    let mut delta_cfg = cfg.clone();
    delta_cfg.compress = true;
    delta_cfg.delta = true;
    vec![
        ("wire roundtrip", wire_roundtrip(200, 1)),
        ("delta roundtrip", delta_roundtrip(200, 2)),
        ("grid oracle", grid_oracle(10, 1000, 3)),
        ("rank invariance", rank_invariance(&cfg, &[1, 2, 4])),
        ("rank invariance with delta", rank_invariance(&delta_cfg, &[1, 3])),
    ]
}
