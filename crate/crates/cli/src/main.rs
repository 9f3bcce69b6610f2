use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use aurasim_core::config::{LbCost, ModelKind, RunConfig, TransportKind};
use aurasim_core::sim::{self, RankResult};
use aurasim_core::transport::tcp;
use aurasim_core::{selftest, LbMode, RunHooks};

#[derive(Parser)]
#[command(name = "aurasim", version, about = "Distributed agent-based simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a model and write per-rank CSVs.
    Run(RunArgs),
    /// Codec roundtrips, grid oracle and rank-count invariance.
    Selftest,
    /// Run plain, compressed and delta aura exchange and compare bytes and times.
    Bench(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_model)]
    model: Option<ModelKind>,
    /// In-process ranks to spawn.
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial population size.
    #[arg(long)]
    agents: Option<u64>,
    #[arg(long, value_parser = parse_transport)]
    transport: Option<TransportKind>,
    /// JSON list of host:port, one per rank.
    #[arg(long)]
    roster: Option<PathBuf>,
    /// This process's rank with the tcp transport.
    #[arg(long)]
    rank: Option<u32>,
    #[arg(long)]
    compress: bool,
    /// Delta-encode the aura (implies --compress).
    #[arg(long)]
    delta: bool,
    #[arg(long, value_parser = parse_lb)]
    lb: Option<LbMode>,
    #[arg(long)]
    lb_interval: Option<u64>,
    #[arg(long, value_parser = parse_lb_cost)]
    lb_cost: Option<LbCost>,
    #[arg(long)]
    batch_bytes: Option<usize>,
    #[arg(long)]
    interaction_radius: Option<f64>,
    #[arg(long)]
    box_factor: Option<usize>,
    #[arg(long)]
    reference_interval: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    match s {
        "clustering" => Ok(ModelKind::Clustering),
        "proliferation" => Ok(ModelKind::Proliferation),
        "sir" => Ok(ModelKind::Sir),
        _ => Err("expected clustering, proliferation or sir".into()),
    }
}

fn parse_transport(s: &str) -> Result<TransportKind, String> {
    match s {
        "inproc" => Ok(TransportKind::Inproc),
        "tcp" => Ok(TransportKind::Tcp),
        _ => Err("expected inproc or tcp".into()),
    }
}

fn parse_lb(s: &str) -> Result<LbMode, String> {
    match s {
        "none" => Ok(LbMode::None),
        "diffusive" => Ok(LbMode::Diffusive),
        "rcb" => Ok(LbMode::Rcb),
        _ => Err("expected none, diffusive or rcb".into()),
    }
}

fn parse_lb_cost(s: &str) -> Result<LbCost, String> {
    match s {
        "work" => Ok(LbCost::Work),
        "measured" => Ok(LbCost::Measured),
        _ => Err("expected work or measured".into()),
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.model {
            c.model = v;
        }
        if let Some(v) = self.ranks {
            c.sim.rank_count = v;
        }
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.seed {
            c.sim.seed = v;
        }
        if let Some(v) = self.agents {
            c.population.count = v;
        }
        if let Some(v) = self.transport {
            c.transport = v;
        }
        if let Some(v) = &self.roster {
            c.roster = Some(v.clone());
        }
        if self.compress || self.delta {
            c.compress = true;
        }
        if self.delta {
            c.delta = true;
        }
        if let Some(v) = self.lb {
            c.lb = v;
        }
        if let Some(v) = self.lb_interval {
            c.sim.lb_interval = v;
        }
        if let Some(v) = self.lb_cost {
            c.lb_cost = v;
        }
        if let Some(v) = self.batch_bytes {
            c.sim.batch_bytes = v;
        }
        if let Some(v) = self.interaction_radius {
            c.sim.interaction_radius = v;
        }
        if let Some(v) = self.box_factor {
            c.sim.box_factor = v;
        }
        if let Some(v) = self.reference_interval {
            c.sim.reference_interval = v;
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        if c.transport == TransportKind::Tcp && self.ranks.is_none() {
            if let Some(r) = &c.roster {
                c.sim.rank_count = tcp::load_roster(r)?.len();
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Writes into a staging directory first so a failure leaves no partial set.
fn write_outputs(dir: &Path, results: &[RankResult]) -> Result<()> {
    let stage = dir.join(format!(".partial-{}", std::process::id()));
    let res = (|| -> Result<()> {
        sim::write_outputs(&stage, results)?;
        for e in std::fs::read_dir(&stage)? {
            let e = e?;
            std::fs::rename(e.path(), dir.join(e.file_name()))?;
        }
        Ok(())
    })();
    let _ = std::fs::remove_dir_all(&stage);
    res.with_context(|| format!("writing outputs to {}", dir.display()))
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    if cfg.transport == TransportKind::Tcp && args.rank.is_none() {
        bail!("--rank is required with the tcp transport");
    }
    let results = sim::run(&cfg, args.rank, RunHooks::default())?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    write_outputs(&out, &results)?;
    for r in &results {
        let bytes: u64 = r.stats.iter().map(|s| s.bytes_sent.iter().sum::<u64>()).sum();
        println!(
            "rank {}: {} agents, {} iterations, {} bytes sent, {:.3} s",
            r.rank,
            r.agents.len(),
            r.stats.len(),
            bytes,
            r.wall.as_secs_f64()
        );
    }
    if let Some(s) = results.first().and_then(|r| r.sir.last()) {
        println!("final S/I/R: {}/{}/{}", s[0], s[1], s[2]);
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn selftest() -> Result<()> {
    let mut failed = 0;
    for (name, check) in selftest::all_suites() {
        match check {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} suite(s) failed");
    }
    Ok(())
}

struct BenchRow {
    mode: &'static str,
    per_iteration: Vec<u64>,
    plain: u64,
    t_aura: f64,
    t_ops: f64,
    t_migrate: f64,
    wall: f64,
}

fn bench(args: &RunArgs) -> Result<()> {
    let mut base = args.config()?;
    if args.iterations.is_none() && args.config.is_none() {
        base.iterations = 50;
    }
    if base.transport != TransportKind::Inproc {
        bail!("bench runs in-process only");
    }
    let modes: [(&'static str, bool, bool); 3] = [("plain", false, false), ("compress", true, false), ("delta", true, true)];
    let mut rows = Vec::new();
    for (mode, compress, delta) in modes {
        let mut c = base.clone();
        c.compress = compress;
        c.delta = delta;
        let start = std::time::Instant::now();
        let res = sim::run_inproc(&c, RunHooks::default())?;
        let wall = start.elapsed().as_secs_f64();
        let stats = || res.iter().flat_map(|r| r.stats.iter());
        rows.push(BenchRow {
            mode,
            per_iteration: sim::aura_bytes_per_iteration(&res),
            plain: stats().map(|s| s.aura_plain_bytes).sum(),
            t_aura: stats().map(|s| s.t_aura).sum(),
            t_ops: stats().map(|s| s.t_ops).sum(),
            t_migrate: stats().map(|s| s.t_migrate).sum(),
            wall,
        });
    }
    let n = base.iterations as usize;
    println!(
        "{} ranks, {} agents, {} iterations, K={}",
        base.sim.rank_count, base.population.count, n, base.sim.reference_interval
    );
    println!(
        "{:<9} {:>14} {:>12} {:>9} {:>11} {:>10} {:>13} {:>9}",
        "mode", "aura_bytes", "bytes/iter", "vs_plain", "t_aura_s", "t_ops_s", "t_migrate_s", "wall_s"
    );
    for r in &rows {
        let total: u64 = r.per_iteration.iter().sum();
        println!(
            "{:<9} {:>14} {:>12} {:>9.3} {:>11.3} {:>10.3} {:>13.3} {:>9.3}",
            r.mode,
            total,
            total / n.max(1) as u64,
            total as f64 / r.plain.max(1) as f64,
            r.t_aura,
            r.t_ops,
            r.t_migrate,
            r.wall
        );
    }
    let (p, c, d) = (&rows[0].per_iteration, &rows[1].per_iteration, &rows[2].per_iteration);
    let ordered = (0..n).filter(|&t| d[t] <= c[t] && c[t] <= p[t]).count();
    println!("delta <= compress <= plain on {ordered}/{n} iterations");
    if let Some(dir) = &base.out {
        std::fs::create_dir_all(dir)?;
        let mut s = String::from("iteration,plain,compress,delta\n");
        for t in 0..n {
            s.push_str(&format!("{t},{},{},{}\n", p[t], c[t], d[t]));
        }
        std::fs::write(dir.join("bench.csv"), s)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => run(a),
        Command::Selftest => selftest(),
        Command::Bench(a) => bench(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
