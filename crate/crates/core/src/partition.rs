//! Partitioning grid, box ownership and aura geometry.
//!
//! Boxes are `box_factor` neighbor-grid cells wide. Position → cell → box
//! always goes through the same clamped cell index, so an agent's cell and
//! its box never disagree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::geom::{Aabb, Vec3};
use crate::grid::CellIndex;
use crate::ids::Rank;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("cannot give {ranks} ranks at least one of {boxes} boxes each")]
    InfeasiblePartition { ranks: usize, boxes: usize },
    #[error("position outside the simulation space")]
    OutOfBounds,
    #[error("weights cover {got} boxes, grid has {want}")]
    WeightCount { got: usize, want: usize },
}

pub type BoxIndex = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionGrid {
    bounds: Aabb,
    cell_edge: f64,
    box_factor: usize,
    cell_dims: [usize; 3],
    dims: [usize; 3],
    owner: Vec<Rank>,
    rank_count: usize,
}

/// Cell-aligned rectangle `lo..hi` in neighbor-grid cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub lo: CellIndex,
    pub hi: CellIndex,
}

impl CellRect {
    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        let (lo, hi) = (self.lo, self.hi);
        (lo[2]..hi[2]).flat_map(move |z| (lo[1]..hi[1]).flat_map(move |y| (lo[0]..hi[0]).map(move |x| [x, y, z])))
    }
}

/// Aura geometry for one rank: per neighbor rank, the owned (box, cell
/// rectangle) pairs to send, and the deduplicated cell list covering them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuraSpec {
    pub neighbors: BTreeMap<Rank, AuraTarget>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuraTarget {
    pub parts: Vec<(BoxIndex, CellRect)>,
    pub cells: Vec<CellIndex>,
}

impl PartitionGrid {
    /// Grid over `bounds` with all boxes unassigned (owned by rank 0).
    pub fn new(bounds: Aabb, cell_edge: f64, box_factor: usize) -> Self {
        assert!(box_factor >= 1 && cell_edge > 0.0);
        let cell_dims = bounds.extent().map(|e| ((e / cell_edge).ceil() as usize).max(1));
        let dims = cell_dims.map(|c| c.div_ceil(box_factor));
        PartitionGrid {
            bounds,
            cell_edge,
            box_factor,
            cell_dims,
            dims,
            owner: vec![0; dims[0] * dims[1] * dims[2]],
            rank_count: 1,
        }
    }

    /// RCB decomposition over box centers; `weights` default to uniform.
    pub fn build(
        bounds: Aabb,
        cell_edge: f64,
        box_factor: usize,
        rank_count: usize,
        weights: Option<&[f64]>,
    ) -> Result<Self, PartitionError> {
        let mut g = Self::new(bounds, cell_edge, box_factor);
        let owner = rcb(g.dims, rank_count, weights)?;
        g.owner = owner;
        g.rank_count = rank_count;
        Ok(g)
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cell_dims(&self) -> [usize; 3] {
        self.cell_dims
    }

    pub fn cell_edge(&self) -> f64 {
        self.cell_edge
    }

    pub fn box_factor(&self) -> usize {
        self.box_factor
    }

    pub fn box_count(&self) -> usize {
        self.owner.len()
    }

    pub fn rank_count(&self) -> usize {
        self.rank_count
    }

    pub fn owners(&self) -> &[Rank] {
        &self.owner
    }

    pub fn owner(&self, b: BoxIndex) -> Rank {
        self.owner[b]
    }

    pub fn set_owners(&mut self, owner: Vec<Rank>) {
        assert_eq!(owner.len(), self.owner.len());
        self.owner = owner;
    }

    pub fn index(&self, c: [usize; 3]) -> BoxIndex {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    pub fn coord(&self, b: BoxIndex) -> [usize; 3] {
        [
            b % self.dims[0],
            (b / self.dims[0]) % self.dims[1],
            b / (self.dims[0] * self.dims[1]),
        ]
    }

    pub fn cell_of(&self, p: Vec3) -> CellIndex {
        std::array::from_fn(|d| {
            let c = ((p.0[d] - self.bounds.lo[d]) / self.cell_edge).floor();
            (c.max(0.0) as usize).min(self.cell_dims[d] - 1)
        })
    }

    pub fn box_of_cell(&self, c: CellIndex) -> BoxIndex {
        self.index(c.map(|v| v / self.box_factor))
    }

    pub fn box_of(&self, p: Vec3) -> BoxIndex {
        self.box_of_cell(self.cell_of(p))
    }

    /// Cells of box `b`.
    pub fn box_cells(&self, b: BoxIndex) -> CellRect {
        let c = self.coord(b);
        let f = self.box_factor;
        CellRect {
            lo: std::array::from_fn(|d| c[d] * f),
            hi: std::array::from_fn(|d| ((c[d] + 1) * f).min(self.cell_dims[d])),
        }
    }

    /// Spatial extent of the cells `r` (the last layer reaches the upper bound).
    pub fn rect_region(&self, r: &CellRect) -> Aabb {
        let edge = |d: usize, i: usize| {
            if i >= self.cell_dims[d] {
                self.bounds.hi[d]
            } else {
                self.bounds.lo[d] + i as f64 * self.cell_edge
            }
        };
        Aabb::new(
            std::array::from_fn(|d| edge(d, r.lo[d])),
            std::array::from_fn(|d| edge(d, r.hi[d])),
        )
    }

    pub fn box_region(&self, b: BoxIndex) -> Aabb {
        self.rect_region(&self.box_cells(b))
    }

    pub fn boxes_of(&self, r: Rank) -> Vec<BoxIndex> {
        (0..self.owner.len()).filter(|&b| self.owner[b] == r).collect()
    }

    /// The up to 26 boxes sharing a face, edge or corner with `b`.
    pub fn neighbors26(&self, b: BoxIndex) -> Vec<BoxIndex> {
        let c = self.coord(b);
        let mut out = Vec::with_capacity(26);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dx, dy, dz) == (0, 0, 0) {
                        continue;
                    }
                    if let Some(n) = self.offset(c, [dx, dy, dz]) {
                        out.push(self.index(n));
                    }
                }
            }
        }
        out
    }

    /// The up to 6 face-adjacent boxes of `b`.
    pub fn neighbors6(&self, b: BoxIndex) -> Vec<BoxIndex> {
        let c = self.coord(b);
        let mut out = Vec::with_capacity(6);
        for d in 0..3 {
            for s in [-1i64, 1] {
                let mut o = [0i64; 3];
                o[d] = s;
                if let Some(n) = self.offset(c, o) {
                    out.push(self.index(n));
                }
            }
        }
        out
    }

    fn offset(&self, c: [usize; 3], o: [i64; 3]) -> Option<[usize; 3]> {
        let mut n = [0usize; 3];
        for d in 0..3 {
            let v = c[d] as i64 + o[d];
            if v < 0 || v >= self.dims[d] as i64 {
                return None;
            }
            n[d] = v as usize;
        }
        Some(n)
    }

    /// Boxes whose owner `r` knows without asking: its own plus one layer
    /// around them.
    pub fn cached_boxes(&self, r: Rank) -> Vec<bool> {
        let mut cached = vec![false; self.owner.len()];
        for b in self.boxes_of(r) {
            cached[b] = true;
            for n in self.neighbors26(b) {
                cached[n] = true;
            }
        }
        cached
    }

    /// Owner of the box containing `p`. With a cache, boxes outside it give
    /// `Ok(None)`.
    pub fn authoritative_rank(&self, p: Vec3, cache: Option<&[bool]>) -> Result<Option<Rank>, PartitionError> {
        if !self.bounds.contains_closed(p) {
            return Err(PartitionError::OutOfBounds);
        }
        let b = self.box_of(p);
        Ok(match cache {
            Some(c) if !c[b] => None,
            _ => Some(self.owner[b]),
        })
    }

    /// Ranks owning a box adjacent to one of `r`'s boxes.
    pub fn neighbor_ranks(&self, r: Rank) -> BTreeSet<Rank> {
        let mut out = BTreeSet::new();
        for b in self.boxes_of(r) {
            for n in self.neighbors26(b) {
                if self.owner[n] != r {
                    out.insert(self.owner[n]);
                }
            }
        }
        out
    }

    /// Per neighbor rank, the owned cells within one cell layer of that
    /// neighbor's boxes. A cell edge is at least the interaction radius, so
    /// this covers every owned point within the radius of the neighbor.
    pub fn compute_aura_spec(&self, r: Rank) -> AuraSpec {
        let mut spec = AuraSpec::default();
        let mut cellsets: BTreeMap<Rank, BTreeSet<[usize; 3]>> = BTreeMap::new();
        for b in self.boxes_of(r) {
            let own = self.box_cells(b);
            let c = self.coord(b);
            for n in self.neighbors26(b) {
                let peer = self.owner[n];
                if peer == r {
                    continue;
                }
                let nc = self.coord(n);
                let rect = CellRect {
                    lo: std::array::from_fn(|d| if nc[d] > c[d] { own.hi[d] - 1 } else { own.lo[d] }),
                    hi: std::array::from_fn(|d| if nc[d] < c[d] { own.lo[d] + 1 } else { own.hi[d] }),
                };
                let set = cellsets.entry(peer).or_default();
                // z-major so the cell list sorts like the grid's storage order
                set.extend(rect.cells().map(|[x, y, z]| [z, y, x]));
                spec.neighbors.entry(peer).or_default().parts.push((b, rect));
            }
        }
        for (peer, set) in cellsets {
            spec.neighbors.get_mut(&peer).unwrap().cells = set.into_iter().map(|[z, y, x]| [x, y, z]).collect();
        }
        spec
    }

    /// `box,ix,iy,iz,rank` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("box,ix,iy,iz,rank\n");
        for b in 0..self.owner.len() {
            let c = self.coord(b);
            let _ = writeln!(s, "{b},{},{},{},{}", c[0], c[1], c[2], self.owner[b]);
        }
        s
    }

    /// Whether rank `r`'s boxes form one 6-connected component.
    pub fn is_connected(&self, r: Rank) -> bool {
        connected(self, &self.owner, r)
    }
}

/// 6-connected flood fill over the boxes assigned to `r` in `owner`.
pub fn connected(g: &PartitionGrid, owner: &[Rank], r: Rank) -> bool {
    let Some(start) = owner.iter().position(|&o| o == r) else {
        return true;
    };
    let total = owner.iter().filter(|&&o| o == r).count();
    let mut seen = vec![false; owner.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut n = 0;
    while let Some(b) = stack.pop() {
        n += 1;
        for nb in g.neighbors6(b) {
            if owner[nb] == r && !seen[nb] {
                seen[nb] = true;
                stack.push(nb);
            }
        }
    }
    n == total
}

/// Recursive coordinate bisection of a `dims` box grid over `ranks` ranks.
pub fn rcb(dims: [usize; 3], ranks: usize, weights: Option<&[f64]>) -> Result<Vec<Rank>, PartitionError> {
    let n = dims[0] * dims[1] * dims[2];
    if ranks == 0 || ranks > n {
        return Err(PartitionError::InfeasiblePartition { ranks, boxes: n });
    }
    let uniform;
    let w = match weights {
        Some(w) if w.len() != n => return Err(PartitionError::WeightCount { got: w.len(), want: n }),
        Some(w) => w,
        None => {
            uniform = vec![1.0; n];
            &uniform
        }
    };
    let mut owner = vec![0; n];
    split(dims, w, [0, 0, 0], dims, 0, ranks, &mut owner)?;
    Ok(owner)
}

fn split(
    dims: [usize; 3],
    w: &[f64],
    lo: [usize; 3],
    hi: [usize; 3],
    first: usize,
    ranks: usize,
    owner: &mut [Rank],
) -> Result<(), PartitionError> {
    let idx = |c: [usize; 3]| (c[2] * dims[1] + c[1]) * dims[0] + c[0];
    if ranks == 1 {
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    owner[idx([x, y, z])] = first as Rank;
                }
            }
        }
        return Ok(());
    }
    let len: [usize; 3] = std::array::from_fn(|d| hi[d] - lo[d]);
    let mut axes = [0usize, 1, 2];
    axes.sort_by_key(|&d| std::cmp::Reverse(len[d]));
    // even rank split first; uneven ones only when no cut can host it
    let mut splits: Vec<usize> = (1..ranks).collect();
    splits.sort_by_key(|&l| ((2 * l).abs_diff(ranks), l));
    for n_left in splits {
        for &axis in &axes {
            if let Some(k) = best_cut(dims, w, lo, hi, axis, n_left, ranks) {
                let mut mid_hi = hi;
                mid_hi[axis] = lo[axis] + k;
                let mut mid_lo = lo;
                mid_lo[axis] = lo[axis] + k;
                split(dims, w, lo, mid_hi, first, n_left, owner)?;
                return split(dims, w, mid_lo, hi, first + n_left, ranks - n_left, owner);
            }
        }
    }
    Err(PartitionError::InfeasiblePartition {
        ranks,
        boxes: len.iter().product(),
    })
}

fn best_cut(
    dims: [usize; 3],
    w: &[f64],
    lo: [usize; 3],
    hi: [usize; 3],
    axis: usize,
    n_left: usize,
    ranks: usize,
) -> Option<usize> {
    let idx = |c: [usize; 3]| (c[2] * dims[1] + c[1]) * dims[0] + c[0];
    let len: [usize; 3] = std::array::from_fn(|d| hi[d] - lo[d]);
    let slab_boxes = len[(axis + 1) % 3] * len[(axis + 2) % 3];
    let mut slab = vec![0.0; len[axis]];
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                let c = [x, y, z];
                slab[c[axis] - lo[axis]] += w[idx(c)];
            }
        }
    }
    // no weight to balance: balance box counts instead
    if slab.iter().sum::<f64>() <= 0.0 {
        slab.iter_mut().for_each(|v| *v = slab_boxes as f64);
    }
    let total: f64 = slab.iter().sum();
    let target = total * n_left as f64 / ranks as f64;
    let mut best: Option<(f64, usize)> = None;
    let mut left = 0.0;
    for k in 1..len[axis] {
        left += slab[k - 1];
        if k * slab_boxes < n_left || (len[axis] - k) * slab_boxes < ranks - n_left {
            continue;
        }
        let err = (left - target).abs();
        if best.is_none_or(|(e, _)| err < e) {
            best = Some((err, k));
        }
    }
    best.map(|(_, k)| k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize) -> PartitionGrid {
        PartitionGrid::new(Aabb::new([0.0; 3], [n as f64; 3]), 1.0, 1)
    }

    #[test]
    fn single_rank_owns_everything() {
        let owner = rcb([3, 4, 5], 1, None).unwrap();
        assert!(owner.iter().all(|&o| o == 0));
    }

    #[test]
    fn eight_ranks_give_octants() {
        let g = cube(4);
        let owner = rcb(g.dims(), 8, None).unwrap();
        for r in 0..8u32 {
            let boxes: Vec<_> = (0..64).filter(|&b| owner[b] == r).map(|b| g.coord(b)).collect();
            assert_eq!(boxes.len(), 8);
            let lo: [usize; 3] = std::array::from_fn(|d| boxes.iter().map(|c| c[d]).min().unwrap());
            let hi: [usize; 3] = std::array::from_fn(|d| boxes.iter().map(|c| c[d]).max().unwrap());
            assert!((0..3).all(|d| hi[d] - lo[d] == 1 && lo[d] % 2 == 0));
        }
    }

    #[test]
    fn too_many_ranks_is_infeasible() {
        assert!(matches!(rcb([2, 1, 1], 3, None), Err(PartitionError::InfeasiblePartition { .. })));
    }

    #[test]
    fn boxes_cover_partial_cells() {
        let g = PartitionGrid::new(Aabb::new([0.0; 3], [10.0, 10.0, 10.0]), 3.0, 2);
        assert_eq!(g.cell_dims(), [4, 4, 4]);
        assert_eq!(g.dims(), [2, 2, 2]);
        assert_eq!(g.box_region(7).hi, [10.0; 3]);
        assert_eq!(g.box_of(Vec3::new(10.0, 10.0, 10.0)), 7);
        assert_eq!(g.box_of(Vec3::new(5.999, 0.0, 0.0)), 0);
        assert_eq!(g.box_of(Vec3::new(6.0, 0.0, 0.0)), 1);
    }
}
