//! A rank's share of the block forest, as seen from inside a rank program.

use std::collections::{BTreeMap, BTreeSet};

use crate::block_id::BlockId;
use crate::domain::Domain;
use crate::forest::{Block, BlockForest};
use crate::migration::DataRegistry;
use crate::sim::Rank;

#[derive(Clone, Debug)]
pub struct LocalForest {
    pub domain: Domain,
    pub rank: Rank,
    pub blocks: BTreeMap<BlockId, Block>,
    pub registry: DataRegistry,
}

impl LocalForest {
    /// Ranks owning a block adjacent to one of ours.
    pub fn process_neighbors(&self) -> BTreeSet<Rank> {
        self.blocks
            .values()
            .flat_map(|b| b.neighbor_ranks())
            .filter(|&r| r != self.rank)
            .collect()
    }

    /// For every neighbor rank, the local blocks adjacent to it (id order).
    pub fn boundary(&self) -> BTreeMap<Rank, Vec<BlockId>> {
        let mut out: BTreeMap<Rank, Vec<BlockId>> = BTreeMap::new();
        for b in self.blocks.values() {
            let ranks: BTreeSet<Rank> = b.neighbor_ranks().filter(|&r| r != self.rank).collect();
            for r in ranks {
                out.entry(r).or_default().push(b.id);
            }
        }
        out
    }
}

impl BlockForest {
    /// Splits the forest into its per-rank shares.
    pub fn into_locals(self) -> Vec<LocalForest> {
        let (domain, ranks, registry) = self.into_parts();
        ranks
            .into_iter()
            .enumerate()
            .map(|(rank, blocks)| LocalForest {
                domain: domain.clone(),
                rank,
                blocks,
                registry: registry.clone(),
            })
            .collect()
    }

    /// Reassembles a forest from per-rank shares (rank order).
    pub fn from_locals(domain: Domain, registry: DataRegistry, locals: Vec<LocalForest>) -> Self {
        let ranks = locals.into_iter().map(|l| l.blocks).collect();
        BlockForest::from_parts(domain, ranks, registry)
    }

    /// Per-rank shares without consuming the forest.
    pub fn locals(&self) -> Vec<LocalForest> {
        self.clone().into_locals()
    }
}
