//! Fixtures shared by the benches.

use aurasim_core::engine::initial_agents;
use aurasim_core::partition::PartitionGrid;
use aurasim_core::{AgentRecord, RunConfig, Vec3};

/// Initial clustering population of `n` agents in a cube of edge `space`.
pub fn population(n: u64, space: f64) -> (RunConfig, Vec<AgentRecord>) {
    let mut c = RunConfig::default();
    c.population.count = n;
    c.sim.space.hi = [space; 3];
    let g = PartitionGrid::build(c.sim.space.aabb(), c.sim.interaction_radius, c.sim.box_factor, 1, None)
        .expect("one-rank partition");
    let agents = initial_agents(&c, &g, 0);
    (c, agents)
}

/// Moves every agent by a small deterministic offset, like one iteration of
/// a slow model.
pub fn jitter(agents: &[AgentRecord], step: f64) -> Vec<AgentRecord> {
    agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut a = a.clone();
            let s = ((i as f64) * 0.618_033_988_75).fract() - 0.5;
            a.position = a.position + Vec3::new(s * step, -s * step, 0.5 * s * step);
            a
        })
        .collect()
}
