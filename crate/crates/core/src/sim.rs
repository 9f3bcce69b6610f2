//! Driving a run: one thread per rank for in-process runs, or a single rank
//! over TCP, plus the CSV outputs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::agent::{AgentRecord, Payload};
use crate::config::{ModelKind, RunConfig, TransportKind};
use crate::engine::{EngineError, IterationStats, RankRuntime, RunHooks};
use crate::ids::Rank;
use crate::transport::{inproc, tcp, Endpoint};
use crate::wire::AccountingSnapshot;

#[derive(Debug, Clone)]
pub struct RankResult {
    pub rank: Rank,
    pub stats: Vec<IterationStats>,
    /// Owned agents after the last iteration, sorted by id.
    pub agents: Vec<AgentRecord>,
    /// Global (S, I, R) before the first and after every iteration; rank 0 only.
    pub sir: Vec<[u64; 3]>,
    pub accounting: AccountingSnapshot,
    pub partition_csv: String,
    pub wall: Duration,
}

/// Runs every iteration of `cfg` on this endpoint's rank.
pub fn run_rank(ep: Endpoint, cfg: &RunConfig, hooks: RunHooks) -> Result<RankResult, EngineError> {
    let start = Instant::now();
    let mut rt = RankRuntime::new(ep, cfg.clone(), hooks)?;
    match drive(&mut rt, cfg) {
        Ok((stats, sir)) => Ok(RankResult {
            rank: rt.rank(),
            stats,
            agents: rt.agents(),
            sir,
            accounting: rt.accounting().snapshot(),
            partition_csv: rt.partition().to_csv(),
            wall: start.elapsed(),
        }),
        Err(e) => {
            log::error!("rank {}: {e}", rt.rank());
            rt.endpoint().abort();
            Err(e)
        }
    }
}

type Series = (Vec<IterationStats>, Vec<[u64; 3]>);

fn drive(rt: &mut RankRuntime, cfg: &RunConfig) -> Result<Series, EngineError> {
    let sir_model = cfg.model == ModelKind::Sir;
    let mut sir = Vec::new();
    let mut record_sir = |rt: &mut RankRuntime| -> Result<(), EngineError> {
        if sir_model {
            let c = rt.sir_counts();
            let total = rt.sum_over_all_ranks(&c)?;
            if rt.rank() == 0 {
                sir.push([total[0], total[1], total[2]]);
            }
        }
        Ok(())
    };
    record_sir(rt)?;
    let mut stats = Vec::with_capacity(cfg.iterations as usize);
    for _ in 0..cfg.iterations {
        stats.push(rt.step()?);
        record_sir(rt)?;
    }
    rt.finish()?;
    Ok((stats, sir))
}

/// All ranks as threads of this process, results ordered by rank.
pub fn run_inproc(cfg: &RunConfig, hooks: RunHooks) -> Result<Vec<RankResult>, EngineError> {
    cfg.validate()?;
    let eps = inproc::mesh(cfg.sim.rank_count, cfg.sim.batch_bytes);
    let handles: Vec<_> = eps
        .into_iter()
        .map(|ep| {
            let cfg = cfg.clone();
            let hooks = hooks.clone();
            std::thread::Builder::new()
                .name(format!("rank-{}", ep.rank()))
                .spawn(move || run_rank(ep, &cfg, hooks))
                .expect("spawn rank thread")
        })
        .collect();
    let results: Vec<Result<RankResult, EngineError>> =
        handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect();
    // report the rank that failed first rather than the ones it aborted
    let mut first_err = None;
    let mut ok = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e @ EngineError::Transport(crate::transport::TransportError::Aborted(_))) => {
                first_err.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(ok),
    }
}

/// Runs this process's rank over TCP.
pub fn run_tcp(cfg: &RunConfig, rank: Rank, hooks: RunHooks) -> Result<RankResult, EngineError> {
    cfg.validate()?;
    let roster_path = cfg.roster.as_ref().expect("validated tcp config has a roster");
    let roster = tcp::load_roster(roster_path)?;
    let ep = tcp::connect(&roster, rank, cfg.sim.batch_bytes, Duration::from_secs(60))?;
    run_rank(ep, cfg, hooks)
}

pub fn run(cfg: &RunConfig, rank: Option<Rank>, hooks: RunHooks) -> Result<Vec<RankResult>, EngineError> {
    match cfg.transport {
        TransportKind::Inproc => run_inproc(cfg, hooks),
        TransportKind::Tcp => Ok(vec![run_tcp(cfg, rank.unwrap_or(0), hooks)?]),
    }
}

pub fn agents_csv(agents: &[AgentRecord]) -> String {
    let mut s = String::from("gid_origin,gid_counter,x,y,z,diameter,kind,state,generation,mother\n");
    for a in agents {
        let id = a.id();
        let (kind, state, generation) = match a.payload {
            Payload::Cell {
                cell_type,
                generation,
            } => ("cell", cell_type, generation),
            Payload::Sir { state } => ("person", state as u32, 0),
        };
        let mother = a.mother.map_or(String::new(), |m| m.to_string());
        let [x, y, z] = a.position.0;
        let _ = writeln!(
            s,
            "{},{},{x},{y},{z},{},{kind},{state},{generation},{mother}",
            id.origin_rank, id.counter, a.diameter
        );
    }
    s
}

pub fn stats_csv(stats: &[IterationStats]) -> String {
    let mut s = IterationStats::csv_header();
    s.push('\n');
    for r in stats {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn sir_csv(series: &[[u64; 3]]) -> String {
    let mut s = String::from("iteration,S,I,R\n");
    for (t, [a, b, c]) in series.iter().enumerate() {
        let _ = writeln!(s, "{t},{a},{b},{c}");
    }
    s
}

/// Writes `stats_rank{r}.csv` and `agents_rank{r}.csv` for each result, and
/// `partition.csv` / `sir.csv` from rank 0.
pub fn write_outputs(dir: &Path, results: &[RankResult]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in results {
        std::fs::write(dir.join(format!("stats_rank{}.csv", r.rank)), stats_csv(&r.stats))?;
        std::fs::write(dir.join(format!("agents_rank{}.csv", r.rank)), agents_csv(&r.agents))?;
        if r.rank == 0 {
            std::fs::write(dir.join("partition.csv"), &r.partition_csv)?;
            if !r.sir.is_empty() {
                std::fs::write(dir.join("sir.csv"), sir_csv(&r.sir))?;
            }
        }
    }
    Ok(())
}

/// All agents of a run, sorted by id.
pub fn merged_agents(results: &[RankResult]) -> Vec<AgentRecord> {
    let mut v: Vec<AgentRecord> = results.iter().flat_map(|r| r.agents.iter().cloned()).collect();
    v.sort_by_key(|a| a.id());
    v
}

/// Aura payload bytes per iteration, summed over ranks.
pub fn aura_bytes_per_iteration(results: &[RankResult]) -> Vec<u64> {
    let n = results.iter().map(|r| r.stats.len()).max().unwrap_or(0);
    (0..n)
        .map(|t| {
            results
                .iter()
                .filter_map(|r| r.stats.get(t))
                .map(|s| s.bytes(crate::transport::Tag::Aura))
                .sum()
        })
        .collect()
}
