//! Repartitioning: global RCB over weighted boxes, and diffusive box
//! hand-off between face-adjacent territories.
//!
//! Both are computed redundantly on every rank from allgathered inputs, so
//! all ranks arrive at the same ownership without a further exchange.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ids::Rank;
use crate::partition::{connected, rcb, BoxIndex, PartitionError, PartitionGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LbMode {
    #[default]
    None,
    Diffusive,
    Rcb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub box_index: BoxIndex,
    pub from: Rank,
    pub to: Rank,
}

/// `count_b × runtime_r / agents_r` with `r` the owner of box `b`.
pub fn box_weights(grid: &PartitionGrid, box_agents: &[u64], rank_runtime: &[f64], rank_agents: &[u64]) -> Vec<f64> {
    (0..grid.box_count())
        .map(|b| {
            let r = grid.owner(b) as usize;
            if rank_agents[r] == 0 {
                0.0
            } else {
                box_agents[b] as f64 * rank_runtime[r] / rank_agents[r] as f64
            }
        })
        .collect()
}

pub fn rcb_rebalance(grid: &PartitionGrid, weights: &[f64]) -> Result<Vec<Rank>, PartitionError> {
    rcb(grid.dims(), grid.rank_count(), Some(weights))
}

fn face_neighbor_ranks(grid: &PartitionGrid, owner: &[Rank], r: Rank) -> BTreeSet<Rank> {
    let mut out = BTreeSet::new();
    for b in (0..owner.len()).filter(|&b| owner[b] == r) {
        for n in grid.neighbors6(b) {
            if owner[n] != r {
                out.insert(owner[n]);
            }
        }
    }
    out
}

/// Box transfers for one diffusive round. Ranks are visited in ascending
/// order; a rank slower than the mean of itself and its face neighbors hands
/// boxes, heaviest first, to the fastest neighbor below that mean. Runtime
/// moves with weight at the donor's cost per unit weight.
pub fn diffusive_rebalance(grid: &PartitionGrid, runtimes: &[f64], weights: &[f64]) -> Vec<Transfer> {
    let n = grid.rank_count();
    let mut owner = grid.owners().to_vec();
    let mut proj = runtimes.to_vec();
    let mut load = vec![0.0; n];
    for (b, &o) in owner.iter().enumerate() {
        load[o as usize] += weights[b];
    }
    let rate: Vec<f64> = (0..n).map(|r| if load[r] > 0.0 { runtimes[r] / load[r] } else { 0.0 }).collect();
    let mut transfers = Vec::new();

    for r in 0..n as Rank {
        let ru = r as usize;
        let neigh = face_neighbor_ranks(grid, &owner, r);
        if neigh.is_empty() {
            continue;
        }
        let mean = (proj[ru] + neigh.iter().map(|&q| proj[q as usize]).sum::<f64>()) / (neigh.len() + 1) as f64;
        if proj[ru] <= mean {
            continue;
        }
        let mut receivers: Vec<Rank> = neigh.iter().copied().filter(|&q| proj[q as usize] < mean).collect();
        receivers.sort_by(|&a, &b| proj[a as usize].total_cmp(&proj[b as usize]).then(a.cmp(&b)));
        for q in receivers {
            loop {
                if proj[ru] <= mean || proj[q as usize] >= mean {
                    break;
                }
                let mut cands: Vec<BoxIndex> = (0..owner.len())
                    .filter(|&b| owner[b] == r && grid.neighbors6(b).iter().any(|&m| owner[m] == q))
                    .collect();
                cands.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
                let mut moved = false;
                for b in cands {
                    let delta = rate[ru] * weights[b];
                    if delta <= 0.0 {
                        continue;
                    }
                    let before = (proj[ru] - mean).abs();
                    let after = (proj[ru] - delta - mean).abs();
                    if after >= before || proj[q as usize] + delta > proj[ru] - delta {
                        continue;
                    }
                    owner[b] = q;
                    let ok = owner.contains(&r) && connected(grid, &owner, r);
                    if !ok {
                        owner[b] = r;
                        continue;
                    }
                    proj[ru] -= delta;
                    proj[q as usize] += delta;
                    transfers.push(Transfer {
                        box_index: b,
                        from: r,
                        to: q,
                    });
                    moved = true;
                    break;
                }
                if !moved {
                    break;
                }
            }
        }
    }
    transfers
}

/// Ownership after applying `transfers` in order.
pub fn apply_transfers(owner: &[Rank], transfers: &[Transfer]) -> Vec<Rank> {
    let mut o = owner.to_vec();
    for t in transfers {
        debug_assert_eq!(o[t.box_index], t.from);
        o[t.box_index] = t.to;
    }
    o
}

/// max / mean of per-rank sums of `weights` under `owner`.
pub fn imbalance(owner: &[Rank], weights: &[f64], ranks: usize) -> f64 {
    let mut per = vec![0.0; ranks];
    for (b, &o) in owner.iter().enumerate() {
        per[o as usize] += weights[b];
    }
    let mean = per.iter().sum::<f64>() / ranks as f64;
    if mean == 0.0 {
        return 1.0;
    }
    per.iter().cloned().fold(0.0, f64::max) / mean
}
