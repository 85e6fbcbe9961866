//! Packed block identifiers.
//!
//! An id is a single `u64` laid out as `marker | root index | child digits`,
//! where the marker is a single set bit above the root index, the root index
//! occupies `Domain::root_bits()` bits and every refinement level appends one
//! child digit of `dim` bits (x in the lowest bit, then y, then z). The octree
//! itself is never stored; parent/child relations are pure bit arithmetic.
//!
//! Within one level, comparing packed values compares (root, path)
//! lexicographically, which is row-major root order followed by Morton order.

use std::fmt;

use crate::domain::Domain;
use crate::error::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(u64);

impl BlockId {
    pub const fn from_raw(raw: u64) -> Self {
        BlockId(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub(crate) fn bit_len(self) -> u32 {
        64 - self.0.leading_zeros()
    }
}

impl fmt::Debug for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockId({:#x})", self.0)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:x}", self.0)
    }
}

impl Domain {
    /// Builds the id of the block reached from `root` by following `path`.
    pub fn make_block_id(&self, root: u32, path: &[u8]) -> Result<BlockId> {
        if root >= self.num_roots() {
            return Err(Error::Domain(format!(
                "root index {root} out of range ({} roots)",
                self.num_roots()
            )));
        }
        if path.len() > self.max_levels() as usize {
            return Err(Error::Capacity(format!(
                "path of length {} exceeds {} levels",
                path.len(),
                self.max_levels()
            )));
        }
        let d = self.dim() as u32;
        let mut raw = (1u64 << self.root_bits()) | root as u64;
        for &digit in path {
            if digit as usize >= self.children_per_split() {
                return Err(Error::Domain(format!("child digit {digit} out of range")));
            }
            raw = (raw << d) | digit as u64;
        }
        Ok(BlockId(raw))
    }

    pub fn root_block(&self, root: u32) -> BlockId {
        BlockId((1u64 << self.root_bits()) | root as u64)
    }

    pub fn level(&self, id: BlockId) -> u8 {
        ((id.bit_len() - 1 - self.root_bits() as u32) / self.dim() as u32) as u8
    }

    pub fn root_of(&self, id: BlockId) -> u32 {
        let shift = self.dim() as u32 * self.level(id) as u32;
        ((id.0 >> shift) & ((1u64 << self.root_bits()) - 1)) as u32
    }

    /// The child path bits, right-aligned (`dim` bits per level).
    pub(crate) fn path_bits(&self, id: BlockId) -> u64 {
        let bits = self.dim() as u32 * self.level(id) as u32;
        if bits == 0 {
            0
        } else {
            id.0 & ((1u64 << bits) - 1)
        }
    }

    pub fn decode(&self, id: BlockId) -> (u32, Vec<u8>) {
        let level = self.level(id) as u32;
        let d = self.dim() as u32;
        let mask = (1u64 << d) - 1;
        let path = (0..level).rev().map(|j| ((id.0 >> (j * d)) & mask) as u8).collect();
        (self.root_of(id), path)
    }

    /// Whether `id` is a well-formed id of this domain.
    pub fn is_valid(&self, id: BlockId) -> bool {
        if id.0 == 0 {
            return false;
        }
        let above_root = id.bit_len() - 1;
        if above_root < self.root_bits() as u32 {
            return false;
        }
        let path_len = above_root - self.root_bits() as u32;
        path_len.is_multiple_of(self.dim() as u32)
            && path_len / self.dim() as u32 <= self.max_levels() as u32
            && self.root_of(id) < self.num_roots()
    }

    pub fn parent(&self, id: BlockId) -> Result<BlockId> {
        if self.level(id) == 0 {
            return Err(Error::Domain(format!("root block {id} has no parent")));
        }
        Ok(BlockId(id.0 >> self.dim()))
    }

    /// The last child digit of `id`, i.e. its position among its siblings.
    pub fn child_digit(&self, id: BlockId) -> u8 {
        (id.0 & ((1u64 << self.dim()) - 1)) as u8
    }

    pub fn child(&self, id: BlockId, digit: u8) -> Result<BlockId> {
        if self.level(id) >= self.max_levels() {
            return Err(Error::Domain(format!(
                "block {id} is already at the finest level {}",
                self.max_levels()
            )));
        }
        if digit as usize >= self.children_per_split() {
            return Err(Error::Domain(format!("child digit {digit} out of range")));
        }
        Ok(BlockId((id.0 << self.dim()) | digit as u64))
    }

    pub fn children(&self, id: BlockId) -> Result<Vec<BlockId>> {
        (0..self.children_per_split() as u8)
            .map(|c| self.child(id, c))
            .collect()
    }

    /// Siblings of `id` including itself, in digit order.
    pub fn siblings(&self, id: BlockId) -> Result<Vec<BlockId>> {
        let parent = self.parent(id)?;
        Ok((0..self.children_per_split() as u64)
            .map(|c| BlockId((parent.0 << self.dim()) | c))
            .collect())
    }

    /// `ancestor` is `id` itself or one of its ancestors.
    pub fn is_ancestor_or_self(&self, ancestor: BlockId, id: BlockId) -> bool {
        let la = self.level(ancestor);
        let li = self.level(id);
        li >= la && (id.0 >> (self.dim() as u32 * (li - la) as u32)) == ancestor.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quad() -> Domain {
        Domain::new(2, [3, 2, 1], 6).unwrap()
    }

    #[test]
    fn root_identity() {
        let d = quad();
        let id = d.make_block_id(5, &[]).unwrap();
        assert_eq!(d.level(id), 0);
        assert_eq!(d.root_of(id), 5);
        assert_eq!(d.decode(id), (5, vec![]));
    }

    #[test]
    fn digit_order_is_value_order() {
        let d = quad();
        let a = d.make_block_id(0, &[2]).unwrap();
        let b = d.make_block_id(0, &[3]).unwrap();
        assert!(a < b);
    }

    #[test]
    fn parent_children_level() {
        let d = quad();
        let id = d.make_block_id(0, &[3, 1]).unwrap();
        assert_eq!(d.parent(id).unwrap(), d.make_block_id(0, &[3]).unwrap());
        assert_eq!(d.level(d.make_block_id(2, &[0, 1, 2]).unwrap()), 3);
        let kids = d.children(id).unwrap();
        assert_eq!(kids.len(), 4);
        for (c, k) in kids.iter().enumerate() {
            assert_eq!(d.parent(*k).unwrap(), id);
            assert_eq!(d.child_digit(*k) as usize, c);
        }
        let oct = Domain::new(3, [1, 1, 1], 4).unwrap();
        assert_eq!(oct.children(oct.root_block(0)).unwrap().len(), 8);
    }

    #[test]
    fn level_bound_errors() {
        let d = Domain::new(2, [1, 1, 1], 2).unwrap();
        let root = d.root_block(0);
        assert!(matches!(d.parent(root), Err(Error::Domain(_))));
        let deep = d.make_block_id(0, &[1, 1]).unwrap();
        assert!(matches!(d.children(deep), Err(Error::Domain(_))));
        assert!(matches!(d.make_block_id(0, &[1, 1, 1]), Err(Error::Capacity(_))));
        assert!(matches!(d.make_block_id(1, &[]), Err(Error::Domain(_))));
        assert!(matches!(d.make_block_id(0, &[4]), Err(Error::Domain(_))));
    }

    #[test]
    fn random_round_trip() {
        let d = Domain::new(3, [5, 3, 2], 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let root = rng.gen_range(0..d.num_roots());
            let len = rng.gen_range(0..=12);
            let path: Vec<u8> = (0..len).map(|_| rng.gen_range(0..8)).collect();
            let id = d.make_block_id(root, &path).unwrap();
            assert!(d.is_valid(id));
            assert_eq!(d.level(id) as usize, len);
            assert_eq!(d.decode(id), (root, path));
        }
    }

    #[test]
    fn exhaustive_round_trip_small_quadtrees() {
        for roots in [[1, 1, 1], [2, 1, 1], [3, 1, 1], [2, 2, 1], [4, 1, 1]] {
            let d = Domain::new(2, roots, 3).unwrap();
            let mut seen = std::collections::HashSet::new();
            for root in 0..d.num_roots() {
                let mut frontier = vec![d.root_block(root)];
                while let Some(id) = frontier.pop() {
                    let (r, p) = d.decode(id);
                    assert_eq!(d.make_block_id(r, &p).unwrap(), id);
                    assert!(seen.insert(id));
                    if d.level(id) < 3 {
                        frontier.extend(d.children(id).unwrap());
                    }
                }
            }
            assert_eq!(seen.len() as u32, d.num_roots() * (1 + 4 + 16 + 64));
        }
    }

    #[test]
    fn ancestry() {
        let d = quad();
        let a = d.make_block_id(1, &[2]).unwrap();
        let b = d.make_block_id(1, &[2, 3, 0]).unwrap();
        assert!(d.is_ancestor_or_self(a, b));
        assert!(d.is_ancestor_or_self(a, a));
        assert!(!d.is_ancestor_or_self(b, a));
        let c = d.make_block_id(1, &[1, 3, 0]).unwrap();
        assert!(!d.is_ancestor_or_self(a, c));
    }
}
