//! Space-filling-curve keys for blocks.
//!
//! Both keys place the row-major root index in the most significant bits and
//! left-align the per-level digits to `max_levels`, so keys of leaves on
//! different levels are directly comparable and a coarse block sorts where
//! its first descendant would.

use crate::block_id::BlockId;
use crate::domain::Domain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CurveOrder {
    Morton,
    Hilbert,
}

// Hilbert traversal state tables, indexed [state][morton child digit].
// `POS` gives the position of the child along the curve inside its parent,
// `NEXT` the state used to descend into that child. State 0 visits the
// children of the 2D root in the order (0,0), (0,1), (1,1), (1,0).
const HILBERT2_POS: [[u8; 4]; 4] = [[0, 3, 1, 2], [0, 1, 3, 2], [2, 3, 1, 0], [2, 1, 3, 0]];
const HILBERT2_NEXT: [[u8; 4]; 4] = [[1, 2, 0, 0], [0, 1, 3, 1], [2, 0, 2, 3], [3, 3, 1, 2]];

const HILBERT3_POS: [[u8; 8]; 12] = [
    [0, 7, 1, 6, 3, 4, 2, 5],
    [0, 3, 7, 4, 1, 2, 6, 5],
    [4, 7, 3, 0, 5, 6, 2, 1],
    [0, 1, 3, 2, 7, 6, 4, 5],
    [6, 7, 5, 4, 1, 0, 2, 3],
    [2, 5, 3, 4, 1, 6, 0, 7],
    [2, 1, 5, 6, 3, 0, 4, 7],
    [4, 5, 7, 6, 3, 2, 0, 1],
    [6, 1, 7, 0, 5, 2, 4, 3],
    [6, 5, 1, 2, 7, 4, 0, 3],
    [2, 3, 1, 0, 5, 4, 6, 7],
    [4, 3, 5, 2, 7, 0, 6, 1],
];
const HILBERT3_NEXT: [[u8; 8]; 12] = [
    [1, 2, 3, 4, 5, 5, 3, 4],
    [3, 6, 7, 6, 0, 0, 8, 8],
    [9, 4, 9, 10, 0, 0, 8, 8],
    [0, 1, 10, 1, 11, 9, 10, 9],
    [2, 0, 2, 7, 6, 11, 6, 7],
    [7, 10, 0, 0, 7, 10, 9, 6],
    [11, 11, 5, 5, 1, 4, 1, 10],
    [4, 1, 8, 1, 4, 9, 5, 9],
    [7, 10, 1, 2, 7, 10, 11, 11],
    [11, 11, 5, 5, 3, 2, 7, 2],
    [2, 3, 2, 8, 6, 3, 6, 5],
    [8, 8, 3, 4, 9, 6, 3, 4],
];

impl Domain {
    /// Morton key: the child digits are already Morton digits, so this is the
    /// packed path shifted to a common width.
    pub fn morton_key(&self, id: BlockId) -> u64 {
        let d = self.dim() as u32;
        let level = self.level(id) as u32;
        let ml = self.max_levels() as u32;
        let root = self.root_of(id) as u64;
        (root << (d * ml)) | (self.path_bits(id) << (d * (ml - level)))
    }

    pub fn hilbert_key(&self, id: BlockId) -> u64 {
        let d = self.dim() as u32;
        let level = self.level(id) as u32;
        let ml = self.max_levels() as u32;
        let path = self.path_bits(id);
        let mask = (1u64 << d) - 1;
        let mut state = 0usize;
        let mut key = 0u64;
        for j in (0..level).rev() {
            let digit = ((path >> (j * d)) & mask) as usize;
            let (pos, next) = if d == 2 {
                (HILBERT2_POS[state][digit], HILBERT2_NEXT[state][digit])
            } else {
                (HILBERT3_POS[state][digit], HILBERT3_NEXT[state][digit])
            };
            key = (key << d) | pos as u64;
            state = next as usize;
        }
        let root = self.root_of(id) as u64;
        (root << (d * ml)) | (key << (d * (ml - level)))
    }

    pub fn curve_key(&self, id: BlockId, order: CurveOrder) -> u64 {
        match order {
            CurveOrder::Morton => self.morton_key(id),
            CurveOrder::Hilbert => self.hilbert_key(id),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AdjacencyKind;

    fn full_level(d: &Domain, level: u8) -> Vec<BlockId> {
        let e = d.extent(level);
        let mut out = Vec::new();
        for z in 0..e[2] {
            for y in 0..e[1] {
                for x in 0..e[0] {
                    out.push(d.id_at(level, [x, y, z]));
                }
            }
        }
        out
    }

    fn interleave(c: [u64; 3], dim: u8, bits: u32) -> u64 {
        let mut key = 0;
        for j in (0..bits).rev() {
            for k in (0..dim as usize).rev() {
                key = (key << 1) | ((c[k] >> j) & 1);
            }
        }
        key
    }

    #[test]
    fn morton_level_one_visits_digits_in_order() {
        let d = Domain::new(2, [1, 1, 1], 3).unwrap();
        let mut kids = d.children(d.root_block(0)).unwrap();
        kids.sort_by_key(|&k| d.morton_key(k));
        let digits: Vec<u8> = kids.iter().map(|&k| d.child_digit(k)).collect();
        assert_eq!(digits, vec![0, 1, 2, 3]);
    }

    #[test]
    fn morton_matches_bit_interleave() {
        for dim in [2u8, 3] {
            let d = Domain::new(dim, [1, 1, 1], 3).unwrap();
            for level in 0..=3u8 {
                let blocks = full_level(&d, level);
                let mut by_id = blocks.clone();
                by_id.sort();
                let mut by_key = blocks.clone();
                by_key.sort_by_key(|&b| d.morton_key(b));
                let mut by_interleave = blocks.clone();
                by_interleave.sort_by_key(|&b| interleave(d.coords(b), dim, level as u32));
                assert_eq!(by_id, by_interleave);
                assert_eq!(by_key, by_interleave);
            }
        }
    }

    #[test]
    fn morton_roots_are_segments() {
        let d = Domain::new(2, [2, 1, 1], 2).unwrap();
        let mut blocks = full_level(&d, 2);
        blocks.sort_by_key(|&b| d.morton_key(b));
        let roots: Vec<u32> = blocks.iter().map(|&b| d.root_of(b)).collect();
        assert!(roots[..16].iter().all(|&r| r == 0));
        assert!(roots[16..].iter().all(|&r| r == 1));
    }

    #[test]
    fn hilbert_level_one_order_2d() {
        let d = Domain::new(2, [1, 1, 1], 1).unwrap();
        let mut blocks = full_level(&d, 1);
        blocks.sort_by_key(|&b| d.hilbert_key(b));
        let coords: Vec<[u64; 3]> = blocks.iter().map(|&b| d.coords(b)).collect();
        assert_eq!(coords, vec![[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]);
    }

    #[test]
    fn hilbert_consecutive_blocks_share_faces() {
        for dim in [2u8, 3] {
            for level in 1..=3u8 {
                let d = Domain::new(dim, [1, 1, 1], level).unwrap();
                let mut blocks = full_level(&d, level);
                blocks.sort_by_key(|&b| d.hilbert_key(b));
                let keys: std::collections::HashSet<u64> = blocks.iter().map(|&b| d.hilbert_key(b)).collect();
                assert_eq!(keys.len(), blocks.len());
                for w in blocks.windows(2) {
                    assert_eq!(d.adjacency(w[0], w[1]), Some(AdjacencyKind::Face));
                }
            }
        }
    }
}
