//! Uniform neighbor-search grid with incremental updates.

use std::collections::HashMap;
use std::hash::Hash;

use thiserror::Error;

use crate::geom::{Aabb, Vec3};
use crate::ids::GlobalAgentId;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("agent not in grid")]
    NotFound,
    #[error("agent already in grid")]
    DuplicateInsert,
    #[error("query radius {radius} exceeds cell edge {cell_edge}")]
    RadiusTooLarge { radius: f64, cell_edge: f64 },
}

/// What a grid cell stores about an agent: enough for neighbor evaluation
/// without touching the agent store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridEntry<K> {
    pub key: K,
    pub gid: GlobalAgentId,
    pub pos: Vec3,
    pub diameter: f64,
    pub tag: u32,
    pub aura: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum Update<K> {
    Insert(GridEntry<K>),
    Remove(K),
    Move { key: K, old: Vec3, new: Vec3 },
}

#[derive(Debug, Clone)]
pub struct NeighborGrid<K> {
    bounds: Aabb,
    cell_edge: f64,
    dims: [usize; 3],
    cells: Vec<Vec<GridEntry<K>>>,
    index: HashMap<K, u32>,
    relinks: u64,
    rebuilds: u64,
}

pub type CellIndex = [usize; 3];

impl<K: Copy + Eq + Hash> NeighborGrid<K> {
    pub fn new(bounds: Aabb, cell_edge: f64) -> Self {
        assert!(cell_edge > 0.0);
        let ext = bounds.extent();
        let dims = ext.map(|e| ((e / cell_edge).ceil() as usize).max(1));
        NeighborGrid {
            bounds,
            cell_edge,
            dims,
            cells: vec![Vec::new(); dims[0] * dims[1] * dims[2]],
            index: HashMap::new(),
            relinks: 0,
            rebuilds: 0,
        }
    }

    pub fn cell_edge(&self) -> f64 {
        self.cell_edge
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn relink_count(&self) -> u64 {
        self.relinks
    }

    pub fn rebuild_count(&self) -> u64 {
        self.rebuilds
    }

    pub fn cell_of(&self, p: Vec3) -> CellIndex {
        std::array::from_fn(|d| {
            let c = ((p.0[d] - self.bounds.lo[d]) / self.cell_edge).floor();
            (c.max(0.0) as usize).min(self.dims[d] - 1)
        })
    }

    fn flat(&self, c: CellIndex) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    pub fn contains(&self, key: K) -> bool {
        self.index.contains_key(&key)
    }

    pub fn get(&self, key: K) -> Option<&GridEntry<K>> {
        let c = *self.index.get(&key)? as usize;
        self.cells[c].iter().find(|e| e.key == key)
    }

    fn get_mut(&mut self, key: K) -> Option<&mut GridEntry<K>> {
        let c = *self.index.get(&key)? as usize;
        self.cells[c].iter_mut().find(|e| e.key == key)
    }

    pub fn apply(&mut self, u: Update<K>) -> Result<(), GridError> {
        match u {
            Update::Insert(e) => self.insert(e),
            Update::Remove(k) => self.remove(k).map(|_| ()),
            Update::Move { key, new, .. } => self.move_to(key, new),
        }
    }

    pub fn insert(&mut self, e: GridEntry<K>) -> Result<(), GridError> {
        let c = self.flat(self.cell_of(e.pos));
        if self.index.insert(e.key, c as u32).is_some() {
            return Err(GridError::DuplicateInsert);
        }
        self.cells[c].push(e);
        Ok(())
    }

    pub fn remove(&mut self, key: K) -> Result<GridEntry<K>, GridError> {
        let c = self.index.remove(&key).ok_or(GridError::NotFound)? as usize;
        let i = self.cells[c].iter().position(|e| e.key == key).expect("grid index out of sync");
        Ok(self.cells[c].swap_remove(i))
    }

    /// Updates an entry's position, relinking it only if its cell changes.
    pub fn move_to(&mut self, key: K, new: Vec3) -> Result<(), GridError> {
        let from = *self.index.get(&key).ok_or(GridError::NotFound)? as usize;
        let to = self.flat(self.cell_of(new));
        if from == to {
            self.get_mut(key).unwrap().pos = new;
            return Ok(());
        }
        let i = self.cells[from].iter().position(|e| e.key == key).unwrap();
        let mut e = self.cells[from].swap_remove(i);
        e.pos = new;
        self.cells[to].push(e);
        self.index.insert(key, to as u32);
        self.relinks += 1;
        Ok(())
    }

    pub fn set_attrs(&mut self, key: K, diameter: f64, tag: u32) -> Result<(), GridError> {
        let e = self.get_mut(key).ok_or(GridError::NotFound)?;
        e.diameter = diameter;
        e.tag = tag;
        Ok(())
    }

    /// Replaces the contents wholesale. Counted, so tests can assert the
    /// engine never needs it.
    pub fn rebuild(&mut self, entries: impl IntoIterator<Item = GridEntry<K>>) -> Result<(), GridError> {
        self.rebuilds += 1;
        self.cells.iter_mut().for_each(Vec::clear);
        self.index.clear();
        for e in entries {
            self.insert(e)?;
        }
        Ok(())
    }

    /// Entries within `radius` of `center` (inclusive, on squared distance),
    /// excluding `exclude`, sorted by global id.
    pub fn neighbors_sorted(
        &self,
        center: Vec3,
        radius: f64,
        exclude: Option<GlobalAgentId>,
    ) -> Result<Vec<GridEntry<K>>, GridError> {
        let mut out = Vec::new();
        self.neighbors_into(center, radius, exclude, &mut out)?;
        Ok(out)
    }

    pub fn neighbors_into(
        &self,
        center: Vec3,
        radius: f64,
        exclude: Option<GlobalAgentId>,
        out: &mut Vec<GridEntry<K>>,
    ) -> Result<(), GridError> {
        if radius > self.cell_edge {
            return Err(GridError::RadiusTooLarge {
                radius,
                cell_edge: self.cell_edge,
            });
        }
        out.clear();
        let c = self.cell_of(center);
        let r2 = radius * radius;
        let lo = c.map(|v| v.saturating_sub(1));
        let hi: [usize; 3] = std::array::from_fn(|d| (c[d] + 1).min(self.dims[d] - 1));
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                let row = (z * self.dims[1] + y) * self.dims[0];
                for cell in &self.cells[row + lo[0]..=row + hi[0]] {
                    for e in cell {
                        if Some(e.gid) != exclude && e.pos.distance_sq(center) <= r2 {
                            out.push(*e);
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|e| e.gid);
        Ok(())
    }

    /// Owned entries (aura excluded) with position in the half-open box,
    /// sorted by global id.
    pub fn query_region(&self, region: &Aabb) -> Vec<GridEntry<K>> {
        let mut out = Vec::new();
        if region.is_degenerate() {
            return out;
        }
        let lo = self.cell_of(Vec3(region.lo));
        let hi = self.cell_of(Vec3(region.hi));
        self.for_each_in_cells(lo, hi.map(|v| v + 1), |e| {
            if !e.aura && region.contains_half_open(e.pos) {
                out.push(*e);
            }
        });
        out.sort_unstable_by_key(|e| e.gid);
        out
    }

    /// Visits every entry in cells `lo..hi` (half-open per axis), in cell order.
    pub fn for_each_in_cells(&self, lo: CellIndex, hi: CellIndex, mut f: impl FnMut(&GridEntry<K>)) {
        let hi: [usize; 3] = std::array::from_fn(|d| hi[d].min(self.dims[d]));
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    self.cells[self.flat([x, y, z])].iter().for_each(&mut f);
                }
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &GridEntry<K>> {
        self.cells.iter().flatten()
    }
}

/// Interleaves the low 21 bits of each coordinate.
pub fn morton(c: CellIndex) -> u64 {
    fn spread(v: u64) -> u64 {
        let mut x = v & 0x1f_ffff;
        x = (x | x << 32) & 0x1f_0000_0000_ffff;
        x = (x | x << 16) & 0x1f_0000_ff00_00ff;
        x = (x | x << 8) & 0x100f_00f0_0f00_f00f;
        x = (x | x << 4) & 0x10c3_0c30_c30c_30c3;
        x = (x | x << 2) & 0x1249_2492_4924_9249;
        x
    }
    spread(c[0] as u64) | spread(c[1] as u64) << 1 | spread(c[2] as u64) << 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(k: u32, p: Vec3) -> GridEntry<u32> {
        GridEntry {
            key: k,
            gid: GlobalAgentId::new(0, k as u64),
            pos: p,
            diameter: 1.0,
            tag: 0,
            aura: false,
        }
    }

    fn grid() -> NeighborGrid<u32> {
        NeighborGrid::new(Aabb::new([0.0; 3], [10.0; 3]), 2.0)
    }

    #[test]
    fn insert_lands_in_containing_cell() {
        let mut g = grid();
        g.insert(entry(1, Vec3::new(0.5, 0.5, 0.5))).unwrap();
        assert_eq!(g.cell_of(Vec3::new(0.5, 0.5, 0.5)), [0, 0, 0]);
        assert_eq!(g.insert(entry(1, Vec3::ZERO)), Err(GridError::DuplicateInsert));
        assert_eq!(g.remove(2), Err(GridError::NotFound));
        assert_eq!(g.cell_of(Vec3::new(10.0, 10.0, 10.0)), [4, 4, 4]);
    }

    #[test]
    fn move_within_cell_does_not_relink() {
        let mut g = grid();
        g.insert(entry(1, Vec3::new(0.5, 0.5, 0.5))).unwrap();
        g.move_to(1, Vec3::new(1.5, 0.5, 0.5)).unwrap();
        assert_eq!(g.relink_count(), 0);
        g.move_to(1, Vec3::new(2.5, 0.5, 0.5)).unwrap();
        assert_eq!(g.relink_count(), 1);
        assert_eq!(g.rebuild_count(), 0);
    }

    #[test]
    fn boundary_distance_is_inclusive() {
        let mut g = grid();
        g.insert(entry(1, Vec3::new(1.0, 1.0, 1.0))).unwrap();
        g.insert(entry(2, Vec3::new(3.0, 1.0, 1.0))).unwrap();
        let n = g.neighbors_sorted(Vec3::new(1.0, 1.0, 1.0), 2.0, Some(GlobalAgentId::new(0, 1))).unwrap();
        assert_eq!(n.iter().map(|e| e.key).collect::<Vec<_>>(), vec![2]);
        assert!(matches!(
            g.neighbors_sorted(Vec3::ZERO, 2.5, None),
            Err(GridError::RadiusTooLarge { .. })
        ));
        assert!(grid().neighbors_sorted(Vec3::ZERO, 1.0, None).unwrap().is_empty());
    }

    #[test]
    fn morton_interleaves() {
        assert_eq!(morton([1, 0, 0]), 1);
        assert_eq!(morton([0, 1, 0]), 2);
        assert_eq!(morton([0, 0, 1]), 4);
        assert_eq!(morton([3, 0, 0]), 9);
    }
}
