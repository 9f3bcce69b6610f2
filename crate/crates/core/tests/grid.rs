use aurasim_core::geom::{Aabb, Vec3};
use aurasim_core::grid::{GridEntry, NeighborGrid, Update};
use aurasim_core::testkit::{brute, random_entries, FuzzRng};
use proptest::prelude::*;

fn ids<K>(v: &[GridEntry<K>]) -> Vec<aurasim_core::ids::GlobalAgentId> {
    v.iter().map(|e| e.gid).collect()
}

#[test]
fn queries_match_brute_force() {
    let bounds = Aabb::new([0.0, -5.0, 10.0], [30.0, 20.0, 33.0]);
    let mut r = FuzzRng::new(42);
    for _ in 0..50 {
        let all = random_entries(1000, &bounds, &mut r);
        let edge = 1.0 + r.unit() * 4.0;
        let mut g = NeighborGrid::new(bounds, edge);
        for e in &all {
            g.insert(*e).unwrap();
        }
        for _ in 0..50 {
            let q = all[r.below(all.len())];
            let radius = r.unit() * edge;
            let got = g.neighbors_sorted(q.pos, radius, Some(q.gid)).unwrap();
            assert_eq!(ids(&got), brute::neighbors(&all, q.pos, radius, Some(q.gid)));
            let c = Vec3(std::array::from_fn(|d| bounds.lo[d] + r.unit() * (bounds.hi[d] - bounds.lo[d])));
            let got = g.neighbors_sorted(c, edge, None).unwrap();
            assert_eq!(ids(&got), brute::neighbors(&all, c, edge, None));

            let (a, b) = (r.unit(), r.unit());
            let lo: [f64; 3] = std::array::from_fn(|d| bounds.lo[d] + a.min(b) * (bounds.hi[d] - bounds.lo[d]) - 1.0);
            let hi: [f64; 3] = std::array::from_fn(|d| bounds.lo[d] + a.max(b) * (bounds.hi[d] - bounds.lo[d]));
            let region = Aabb::new(lo, hi);
            assert_eq!(ids(&g.query_region(&region)), brute::region(&all, &region));
        }
        assert_eq!(g.query_region(&bounds).len(), all.iter().filter(|e| !e.aura).count());
        assert!(g.query_region(&Aabb::new([1.0; 3], [1.0, 5.0, 5.0])).is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn incremental_updates_equal_rebuild(seed in any::<u64>()) {
        let bounds = Aabb::new([0.0; 3], [20.0; 3]);
        let mut r = FuzzRng::new(seed);
        let mut g = NeighborGrid::new(bounds, 2.5);
        let mut live: Vec<GridEntry<u32>> = Vec::new();
        let mut next = 0u32;
        for _ in 0..10_000 {
            match r.below(3) {
                0 => {
                    let mut e = random_entries(1, &bounds, &mut r)[0];
                    e.key = next;
                    e.gid = aurasim_core::ids::GlobalAgentId::new(0, next as u64);
                    next += 1;
                    g.apply(Update::Insert(e)).unwrap();
                    live.push(e);
                }
                1 if !live.is_empty() => {
                    let e = live.swap_remove(r.below(live.len()));
                    g.apply(Update::Remove(e.key)).unwrap();
                }
                _ if !live.is_empty() => {
                    let i = r.below(live.len());
                    let new = Vec3(std::array::from_fn(|d| (live[i].pos.0[d] + (r.unit() - 0.5) * 3.0).clamp(0.0, 20.0)));
                    g.apply(Update::Move { key: live[i].key, old: live[i].pos, new }).unwrap();
                    live[i].pos = new;
                }
                _ => {}
            }
        }
        prop_assert_eq!(g.rebuild_count(), 0);
        let mut fresh = NeighborGrid::new(bounds, 2.5);
        fresh.rebuild(live.iter().copied()).unwrap();
        let mut a: Vec<_> = g.iter().map(|e| (g.cell_of(e.pos), e.key, e.pos.to_bits())).collect();
        let mut b: Vec<_> = fresh.iter().map(|e| (fresh.cell_of(e.pos), e.key, e.pos.to_bits())).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}
