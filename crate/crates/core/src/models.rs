//! Behavior evaluation for the shipped models. Every function here is a pure
//! function of the agent's start-of-iteration state, its sorted neighbors and
//! counter-based draws; none knows which rank it runs on.

use crate::agent::{Behavior, Payload, SirState};
use crate::geom::{reflect_into, Aabb, Vec3};
use crate::grid::GridEntry;
use crate::ids::GlobalAgentId;
use crate::rng::{CounterRng, Stream};
use crate::wire::schema::AgentLike;

#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub rng: &'a CounterRng,
    pub iteration: u64,
    pub bounds: Aabb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Daughter {
    pub position: Vec3,
    pub diameter: f64,
}

/// New state of one agent after its behaviors ran.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub position: Vec3,
    pub diameter: f64,
    pub payload: Payload,
    pub divide: Option<[Daughter; 2]>,
    /// Neighbors within the infection radius, counted by infection behaviors.
    pub contacts: u32,
}

pub fn reflect(p: Vec3, b: &Aabb) -> Vec3 {
    Vec3(std::array::from_fn(|d| reflect_into(p.0[d], b.lo[d], b.hi[d])))
}

/// Sum of pairwise repulsion and same-type adhesion along `a − b`, in
/// neighbor order, clamped to `max_step`.
#[allow(clippy::too_many_arguments)]
pub fn clustering_displacement<K>(
    id: GlobalAgentId,
    pos: Vec3,
    diameter: f64,
    cell_type: u32,
    neighbors: &[GridEntry<K>],
    params: (f64, f64, f64, f64),
    ctx: &Ctx<'_>,
) -> Vec3 {
    let (k_rep, k_adh, r_cut, max_step) = params;
    let mut disp = Vec3::ZERO;
    for n in neighbors {
        let delta = pos - n.pos;
        let dist = delta.norm();
        let dir = if dist > 0.0 {
            delta * (1.0 / dist)
        } else {
            let u = ctx.rng.unit_vector(
                GlobalAgentId::pair_key(id, n.gid),
                ctx.iteration,
                Stream::SeparateTheta,
                Stream::SeparatePhi,
            );
            if id < n.gid {
                u
            } else {
                -u
            }
        };
        let same = if n.tag == cell_type { 1.0 } else { 0.0 };
        let f = k_rep * ((diameter + n.diameter) / 2.0 - dist).max(0.0) - k_adh * same * (r_cut - dist).max(0.0);
        disp += dir * f;
    }
    let len = disp.norm();
    if len > max_step {
        disp = disp * (max_step / len);
    }
    disp
}

struct Eval<'a, 'c, K> {
    id: GlobalAgentId,
    start_pos: Vec3,
    start_payload: Payload,
    neighbors: &'a [GridEntry<K>],
    ctx: &'a Ctx<'c>,
    out: Outcome,
}

impl<K> Eval<'_, '_, K> {
    fn run(&mut self, b: &Behavior) {
        let ctx = self.ctx;
        match *b {
            Behavior::ClusterMechanics {
                k_rep,
                k_adh,
                r_cut,
                max_step,
            } => {
                let d = clustering_displacement(
                    self.id,
                    self.start_pos,
                    self.out.diameter,
                    self.start_payload.tag(),
                    self.neighbors,
                    (k_rep, k_adh, r_cut, max_step),
                    ctx,
                );
                self.out.position = reflect(self.out.position + d, &ctx.bounds);
            }
            Behavior::GrowDivide { rate, max_diameter } => {
                if self.out.divide.is_some() {
                    return;
                }
                let d = self.out.diameter + rate;
                if d < max_diameter {
                    self.out.diameter = d;
                    return;
                }
                let dd = max_diameter * 2f64.powf(-1.0 / 3.0);
                let u = ctx
                    .rng
                    .unit_vector(self.id.as_u64_key(), ctx.iteration, Stream::DivideTheta, Stream::DividePhi);
                let off = u * (dd / 2.0);
                let p = self.out.position;
                self.out.divide = Some([
                    Daughter {
                        position: reflect(p + off, &ctx.bounds),
                        diameter: dd,
                    },
                    Daughter {
                        position: reflect(p - off, &ctx.bounds),
                        diameter: dd,
                    },
                ]);
            }
            Behavior::Infection { beta, radius } => {
                let r2 = radius * radius;
                let mut infected = false;
                let mut contacts = 0;
                for n in self.neighbors {
                    if n.pos.distance_sq(self.start_pos) > r2 {
                        continue;
                    }
                    contacts += 1;
                    if self.start_payload == (Payload::Sir { state: SirState::Susceptible })
                        && n.tag == SirState::Infected as u32
                        && ctx.rng.uniform_keyed(GlobalAgentId::pair_key(self.id, n.gid), ctx.iteration, Stream::Infect)
                            < beta
                    {
                        infected = true;
                    }
                }
                self.out.contacts += contacts;
                if infected {
                    self.out.payload = Payload::Sir {
                        state: SirState::Infected,
                    };
                }
            }
            Behavior::Recovery { gamma } => {
                if self.start_payload
                    == (Payload::Sir {
                        state: SirState::Infected,
                    })
                    && ctx.rng.uniform(self.id, ctx.iteration, Stream::Recover) < gamma
                {
                    self.out.payload = Payload::Sir {
                        state: SirState::Recovered,
                    };
                }
            }
            Behavior::RandomWalk { step } => {
                let u = ctx
                    .rng
                    .unit_vector(self.id.as_u64_key(), ctx.iteration, Stream::MoveTheta, Stream::MovePhi);
                self.out.position = reflect(self.out.position + u * step, &ctx.bounds);
            }
            Behavior::Periodic { every, ref inner } => {
                if every != 0 && ctx.iteration % every as u64 == 0 {
                    if let Some(b) = inner {
                        self.run(b);
                    }
                }
            }
        }
    }
}

/// Runs `a`'s behaviors in list order. `neighbors` are the entries within
/// the interaction radius, sorted by id, excluding `a`.
pub fn evaluate<A: AgentLike + ?Sized, K>(a: &A, neighbors: &[GridEntry<K>], ctx: &Ctx<'_>) -> Outcome {
    let payload = a.payload();
    let mut e = Eval {
        id: a.id(),
        start_pos: a.position(),
        start_payload: payload,
        neighbors,
        ctx,
        out: Outcome {
            position: a.position(),
            diameter: a.diameter(),
            payload,
            divide: None,
            contacts: 0,
        },
    };
    a.for_each_behavior(&mut |b| e.run(b));
    e.out
}

/// Fraction of (agent, neighbor) pairs sharing a tag, over agents with at
/// least one neighbor.
pub fn same_type_fraction(entries: &[(Vec3, u32)], radius: f64) -> f64 {
    let mut same = 0u64;
    let mut total = 0u64;
    for (i, a) in entries.iter().enumerate() {
        for (j, b) in entries.iter().enumerate() {
            if i != j && a.0.distance_sq(b.0) <= radius * radius {
                total += 1;
                same += (a.1 == b.1) as u64;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        same as f64 / total as f64
    }
}

/// Forward integration of the mean-field SIR model (fractions, unit step
/// split into `substeps`). Returns the trajectory sampled once per step.
pub fn sir_ode(beta_hat: f64, gamma: f64, s0: f64, i0: f64, steps: usize, substeps: usize) -> Vec<[f64; 3]> {
    let f = |s: f64, i: f64| (-beta_hat * s * i, beta_hat * s * i - gamma * i);
    let h = 1.0 / substeps as f64;
    let (mut s, mut i) = (s0, i0);
    let mut out = vec![[s, i, 1.0 - s - i]];
    for _ in 0..steps {
        for _ in 0..substeps {
            let (a1, b1) = f(s, i);
            let (a2, b2) = f(s + h / 2.0 * a1, i + h / 2.0 * b1);
            let (a3, b3) = f(s + h / 2.0 * a2, i + h / 2.0 * b2);
            let (a4, b4) = f(s + h * a3, i + h * b3);
            s += h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            i += h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
        }
        out.push([s, i, 1.0 - s - i]);
    }
    out
}
