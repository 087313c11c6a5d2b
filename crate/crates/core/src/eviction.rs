//! Greedy path eviction planning.

use crate::block::PathId;
use crate::tree::TreeGeometry;

/// A stash block offered for eviction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub label: PathId,
    pub backup: bool,
    /// False when the block must stay in the stash this round.
    pub placeable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedBucket {
    pub node: usize,
    pub depth: u32,
    /// Exactly `z` slots; `Some(i)` refers to `candidates[i]`, `None` is a dummy.
    pub slots: Vec<Option<usize>>,
}

/// Bucket contents for one path write, leaf first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WritePlan {
    pub label: PathId,
    pub buckets: Vec<PlannedBucket>,
    /// Backups that did not fit on their own path and were given `label`.
    pub relabeled: Vec<usize>,
}

impl WritePlan {
    /// Candidate indices placed by this plan.
    pub fn placed(&self) -> impl Iterator<Item = usize> + '_ {
        self.buckets
            .iter()
            .flat_map(|b| b.slots.iter().flatten().copied())
    }

    pub fn is_placed(&self, candidate: usize) -> bool {
        self.placed().any(|i| i == candidate)
    }
}

/// Plans the write-back of path `label`.
///
/// Live blocks go first: buckets are filled from the leaf upward, each taking
/// eligible blocks in stash (FIFO) order. Backups then fill the remaining
/// slots the same way, so live placement is identical to a plain Path ORAM
/// eviction of the same stash. A backup that still has no slot is moved to
/// the eviction path itself, where every free slot is legal.
pub fn plan_eviction(geom: &TreeGeometry, label: PathId, candidates: &[Candidate]) -> WritePlan {
    let mut buckets: Vec<PlannedBucket> = (0..=geom.height)
        .rev()
        .map(|depth| PlannedBucket {
            node: geom.node_at_depth(label, depth),
            depth,
            slots: Vec::with_capacity(geom.z),
        })
        .collect();
    let mut placed = vec![false; candidates.len()];
    let depth_limit: Vec<u32> = candidates
        .iter()
        .map(|c| geom.common_depth(c.label, label))
        .collect();

    for backups in [false, true] {
        for bucket in buckets.iter_mut() {
            for (i, c) in candidates.iter().enumerate() {
                if bucket.slots.len() == geom.z {
                    break;
                }
                if placed[i] || c.backup != backups || !c.placeable {
                    continue;
                }
                if depth_limit[i] >= bucket.depth {
                    bucket.slots.push(Some(i));
                    placed[i] = true;
                }
            }
        }
    }
    let mut relabeled = Vec::new();
    for bucket in buckets.iter_mut() {
        for (i, c) in candidates.iter().enumerate() {
            if bucket.slots.len() == geom.z {
                break;
            }
            if !placed[i] && c.backup && c.placeable {
                bucket.slots.push(Some(i));
                placed[i] = true;
                relabeled.push(i);
            }
        }
    }
    for bucket in &mut buckets {
        bucket.slots.resize(geom.z, None);
    }
    WritePlan {
        label,
        buckets,
        relabeled,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn live(label: u32) -> Candidate {
        Candidate {
            label: PathId(label),
            backup: false,
            placeable: true,
        }
    }

    #[test]
    fn empty_stash_gives_all_dummy_path() {
        let g = TreeGeometry::new(3, 4).unwrap();
        let plan = plan_eviction(&g, PathId(5), &[]);
        assert_eq!(plan.buckets.len(), 4);
        assert!(plan
            .buckets
            .iter()
            .all(|b| b.slots.len() == 4 && b.slots.iter().all(Option::is_none)));
        assert_eq!(plan.buckets[0].node, 12);
    }

    #[test]
    fn single_block_goes_to_leaf() {
        let g = TreeGeometry::new(3, 4).unwrap();
        let plan = plan_eviction(&g, PathId(5), &[live(5)]);
        assert_eq!(plan.buckets[0].slots[0], Some(0));
    }

    #[test]
    fn root_only_block_stays_when_root_is_claimed() {
        // Labels 4, 6 and 7 share only the root with path 0 at L=3. The four
        // earliest root-only blocks take all of its slots.
        let g = TreeGeometry::new(3, 4).unwrap();
        let mut cands = vec![live(7); 4];
        cands.push(live(6));
        cands.push(live(4));
        let plan = plan_eviction(&g, PathId(0), &cands);
        let placed: Vec<usize> = plan.placed().collect();
        assert_eq!(placed.len(), 4);
        assert!(!plan.is_placed(4));
        assert!(!plan.is_placed(5));
    }

    #[test]
    fn unplaceable_and_backup_ordering() {
        let g = TreeGeometry::new(1, 1).unwrap();
        let cands = [
            Candidate {
                label: PathId(0),
                backup: true,
                placeable: true,
            },
            live(0),
            Candidate {
                label: PathId(0),
                backup: false,
                placeable: false,
            },
        ];
        let plan = plan_eviction(&g, PathId(0), &cands);
        // The live block wins the leaf; the backup moves to the root.
        assert_eq!(plan.buckets[0].slots, vec![Some(1)]);
        assert_eq!(plan.buckets[1].slots, vec![Some(0)]);
        assert!(!plan.is_placed(2));
    }

    #[test]
    fn crowded_backup_moves_to_eviction_path() {
        // Path 0 at L=1: root shared with label 1, leaf 1 is off-path.
        let g = TreeGeometry::new(1, 1).unwrap();
        let cands = [
            live(1),
            Candidate {
                label: PathId(1),
                backup: true,
                placeable: true,
            },
        ];
        let plan = plan_eviction(&g, PathId(0), &cands);
        assert_eq!(plan.buckets[0].slots, vec![Some(1)]);
        assert_eq!(plan.buckets[1].slots, vec![Some(0)]);
        assert_eq!(plan.relabeled, vec![1]);
    }

    /// Brute-force check that a plan is legal.
    fn legal(g: &TreeGeometry, plan: &WritePlan, cands: &[Candidate]) -> bool {
        let mut seen = vec![false; cands.len()];
        for b in &plan.buckets {
            if b.slots.len() != g.z {
                return false;
            }
            for i in b.slots.iter().flatten() {
                if seen[*i] || !cands[*i].placeable {
                    return false;
                }
                seen[*i] = true;
                let label = if plan.relabeled.contains(i) { plan.label } else { cands[*i].label };
                if g.node_at_depth(label, b.depth) != b.node {
                    return false;
                }
            }
        }
        true
    }

    proptest! {
        #[test]
        fn plans_are_legal_and_maximal(height in 0u32..6, z in 1usize..5,
                                       raw in proptest::collection::vec((any::<u32>(), any::<bool>()), 0..40),
                                       path: u32) {
            let g = TreeGeometry::new(height, z).unwrap();
            let mask = (1u32 << height) - 1;
            let cands: Vec<Candidate> = raw.iter()
                .map(|(l, b)| Candidate { label: PathId(l & mask), backup: *b, placeable: true })
                .collect();
            let plan = plan_eviction(&g, PathId(path & mask), &cands);
            prop_assert!(legal(&g, &plan, &cands));
            // Any unplaced block finds every bucket it could use already full.
            for (i, c) in cands.iter().enumerate() {
                if plan.is_placed(i) { continue; }
                if c.backup {
                    prop_assert!(plan.buckets.iter().all(|b| b.slots.iter().all(Option::is_some)));
                }
                let d = g.common_depth(c.label, plan.label);
                for b in &plan.buckets {
                    if b.depth <= d {
                        prop_assert!(b.slots.iter().all(Option::is_some));
                    }
                }
            }
        }
    }
}
