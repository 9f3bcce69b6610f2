//! Per-iteration measurements and their CSV form.

use crate::ids::Rank;
use crate::transport::Tag;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationStats {
    pub rank: Rank,
    pub iteration: u64,
    /// Owned agents at the end of the iteration.
    pub agents: u64,
    /// Aura copies received this iteration.
    pub aura_agents: u64,
    pub migrations_direct: u64,
    pub migrations_collective: u64,
    /// Agents handed away by the load balancer.
    pub lb_moved: u64,
    /// Neighbor evaluations plus one per agent.
    pub work: u64,
    /// Neighbors within an infection radius, summed over agents.
    pub contacts: u64,
    pub t_ops: f64,
    pub t_ops_cpu: f64,
    pub t_aura: f64,
    pub t_migrate: f64,
    pub t_lb: f64,
    /// Interior agent operations done while the aura was in flight.
    pub t_overlap: f64,
    /// Payload bytes sent, by tag.
    pub bytes_sent: [u64; 6],
    /// What the aura would have cost as plain wire bytes.
    pub aura_plain_bytes: u64,
    pub live_buffers_high_water: u64,
}

impl IterationStats {
    pub fn csv_header() -> String {
        let mut h = String::from(
            "rank,iteration,agents,aura_agents,migrations_direct,migrations_collective,lb_moved,work,contacts,\
             t_ops,t_ops_cpu,t_aura,t_migrate,t_lb,t_overlap",
        );
        for t in Tag::ALL {
            h.push_str(",bytes_");
            h.push_str(t.name());
        }
        h.push_str(",aura_plain_bytes,live_buffers_high_water");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.rank,
            self.iteration,
            self.agents,
            self.aura_agents,
            self.migrations_direct,
            self.migrations_collective,
            self.lb_moved,
            self.work,
            self.contacts,
            self.t_ops,
            self.t_ops_cpu,
            self.t_aura,
            self.t_migrate,
            self.t_lb,
            self.t_overlap
        );
        for b in self.bytes_sent {
            r.push_str(&format!(",{b}"));
        }
        r.push_str(&format!(",{},{}", self.aura_plain_bytes, self.live_buffers_high_water));
        r
    }

    pub fn bytes(&self, tag: Tag) -> u64 {
        self.bytes_sent[tag as usize]
    }
}
