//! Root grid description and block geometry.

use crate::block_id::BlockId;
use crate::error::{Error, Result};

/// How two blocks touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AdjacencyKind {
    Face,
    Edge,
    Corner,
}

impl AdjacencyKind {
    /// Connection strength used when scoring migration candidates.
    pub fn strength(self) -> i64 {
        match self {
            AdjacencyKind::Face => 4,
            AdjacencyKind::Edge => 2,
            AdjacencyKind::Corner => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdjacencyKind::Face => "face",
            AdjacencyKind::Edge => "edge",
            AdjacencyKind::Corner => "corner",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AdjacencyKind::Face => 0,
            AdjacencyKind::Edge => 1,
            AdjacencyKind::Corner => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AdjacencyKind::Face),
            1 => Some(AdjacencyKind::Edge),
            2 => Some(AdjacencyKind::Corner),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "face" => Some(AdjacencyKind::Face),
            "edge" => Some(AdjacencyKind::Edge),
            "corner" => Some(AdjacencyKind::Corner),
            _ => None,
        }
    }
}

/// Axis-aligned box of a block in units of the finest level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockBox {
    pub lo: [u64; 3],
    pub size: u64,
}

/// A grid of root blocks, each the root of an implicit octree (quadtree in 2D).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    dim: u8,
    roots: [u32; 3],
    max_levels: u8,
    periodic: [bool; 3],
    root_bits: u8,
}

impl Domain {
    pub fn new(dim: u8, roots: [u32; 3], max_levels: u8) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Domain(format!("dimension must be 2 or 3, got {dim}")));
        }
        if roots.contains(&0) {
            return Err(Error::Domain("root grid extents must be positive".into()));
        }
        if dim == 2 && roots[2] != 1 {
            return Err(Error::Domain("2D domains need a root z-extent of 1".into()));
        }
        let num_roots = roots.iter().map(|&r| r as u64).product::<u64>();
        if num_roots > u32::MAX as u64 {
            return Err(Error::Capacity(format!("{num_roots} roots")));
        }
        let root_bits = if num_roots <= 1 {
            0
        } else {
            64 - (num_roots - 1).leading_zeros()
        };
        let needed = max_levels as u32 * dim as u32 + root_bits + 1;
        if needed > 64 {
            return Err(Error::Capacity(format!(
                "{max_levels} levels in {dim}D with {num_roots} roots need {needed} id bits"
            )));
        }
        Ok(Domain {
            dim,
            roots,
            max_levels,
            periodic: [false; 3],
            root_bits: root_bits as u8,
        })
    }

    pub fn with_periodic(mut self, periodic: [bool; 3]) -> Self {
        self.periodic = periodic;
        if self.dim == 2 {
            self.periodic[2] = false;
        }
        self
    }

    pub fn dim(&self) -> u8 {
        self.dim
    }

    pub fn roots(&self) -> [u32; 3] {
        self.roots
    }

    pub fn max_levels(&self) -> u8 {
        self.max_levels
    }

    pub fn periodic(&self) -> [bool; 3] {
        self.periodic
    }

    pub fn root_bits(&self) -> u8 {
        self.root_bits
    }

    pub fn num_roots(&self) -> u32 {
        self.roots[0] * self.roots[1] * self.roots[2]
    }

    pub fn children_per_split(&self) -> usize {
        1 << self.dim
    }

    /// Row-major (x fastest) root coordinates.
    pub fn root_coords(&self, root: u32) -> [u32; 3] {
        let [rx, ry, _] = self.roots;
        [root % rx, (root / rx) % ry, root / (rx * ry)]
    }

    pub fn root_index(&self, coords: [u32; 3]) -> u32 {
        let [rx, ry, _] = self.roots;
        coords[0] + rx * (coords[1] + ry * coords[2])
    }

    /// Number of same-level cells along each axis at `level`.
    pub fn extent(&self, level: u8) -> [u64; 3] {
        let mut e = [1u64; 3];
        for (k, ext) in e.iter_mut().enumerate().take(self.dim as usize) {
            *ext = (self.roots[k] as u64) << level;
        }
        e
    }

    /// Global integer coordinates of a block among all blocks of its level.
    pub fn coords(&self, id: BlockId) -> [u64; 3] {
        let level = self.level(id);
        let root = self.root_coords(self.root_of(id));
        let path = self.path_bits(id);
        let d = self.dim as u32;
        let mut c = [0u64; 3];
        for (k, ck) in c.iter_mut().enumerate().take(self.dim as usize) {
            let mut local = 0u64;
            for j in 0..level as u32 {
                local |= ((path >> (j * d + k as u32)) & 1) << j;
            }
            *ck = ((root[k] as u64) << level) | local;
        }
        c
    }

    /// Inverse of [`Domain::coords`].
    pub fn id_at(&self, level: u8, coords: [u64; 3]) -> BlockId {
        let d = self.dim as u32;
        let mut root = [0u32; 3];
        for k in 0..self.dim as usize {
            root[k] = (coords[k] >> level) as u32;
        }
        let mut raw = (1u64 << self.root_bits) | self.root_index(root) as u64;
        for j in (0..level as u32).rev() {
            let mut digit = 0u64;
            for (k, ck) in coords.iter().enumerate().take(self.dim as usize) {
                digit |= ((ck >> j) & 1) << k;
            }
            raw = (raw << d) | digit;
        }
        BlockId::from_raw(raw)
    }

    pub fn block_box(&self, id: BlockId) -> BlockBox {
        let level = self.level(id);
        let shift = self.max_levels - level;
        let c = self.coords(id);
        BlockBox {
            lo: [c[0] << shift, c[1] << shift, c[2] << shift],
            size: 1u64 << shift,
        }
    }

    /// Fraction of one root block covered by a block of `level`.
    pub fn volume_fraction(&self, level: u8) -> f64 {
        (self.children_per_split() as f64).powi(-(level as i32))
    }

    /// Geometric relation between two distinct blocks, honouring periodicity.
    /// Returns `None` if they do not touch (or overlap, which never happens
    /// between distinct leaves of a forest).
    pub fn adjacency(&self, a: BlockId, b: BlockId) -> Option<AdjacencyKind> {
        if a == b {
            return None;
        }
        let ba = self.block_box(a);
        let bb = self.block_box(b);
        let mut touching = 0;
        for k in 0..self.dim as usize {
            let len = (self.roots[k] as i64) << self.max_levels;
            let a0 = ba.lo[k] as i64;
            let a1 = a0 + ba.size as i64;
            let shifts: &[i64] = if self.periodic[k] { &[-1, 0, 1] } else { &[0] };
            // 2 = overlap, 1 = touch, 0 = apart
            let mut best = 0;
            for &s in shifts {
                let b0 = bb.lo[k] as i64 + s * len;
                let b1 = b0 + bb.size as i64;
                let rel = if a0 < b1 && b0 < a1 {
                    2
                } else if a1 == b0 || b1 == a0 {
                    1
                } else {
                    0
                };
                best = best.max(rel);
            }
            match best {
                0 => return None,
                1 => touching += 1,
                _ => {}
            }
        }
        match (touching, self.dim) {
            (0, _) => None,
            (1, _) => Some(AdjacencyKind::Face),
            (2, 3) => Some(AdjacencyKind::Edge),
            _ => Some(AdjacencyKind::Corner),
        }
    }

    /// All `3^dim - 1` neighbor directions.
    pub fn directions(&self) -> Vec<[i8; 3]> {
        let zr: &[i8] = if self.dim == 3 { &[-1, 0, 1] } else { &[0] };
        let mut out = Vec::new();
        for &z in zr {
            for y in [-1i8, 0, 1] {
                for x in [-1i8, 0, 1] {
                    if (x, y, z) != (0, 0, 0) {
                        out.push([x, y, z]);
                    }
                }
            }
        }
        out
    }

    /// Same-level cell next to `id` in direction `dir`, wrapping periodic
    /// axes; `None` if that cell lies outside the domain.
    pub fn neighbor_cell(&self, id: BlockId, dir: [i8; 3]) -> Option<BlockId> {
        let level = self.level(id);
        let ext = self.extent(level);
        let mut c = self.coords(id);
        for k in 0..self.dim as usize {
            let v = c[k] as i64 + dir[k] as i64;
            let e = ext[k] as i64;
            c[k] = if (0..e).contains(&v) {
                v as u64
            } else if self.periodic[k] {
                v.rem_euclid(e) as u64
            } else {
                return None;
            };
        }
        Some(self.id_at(level, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_domains() {
        assert!(matches!(Domain::new(4, [1, 1, 1], 2), Err(Error::Domain(_))));
        assert!(matches!(Domain::new(2, [0, 1, 1], 2), Err(Error::Domain(_))));
        assert!(matches!(Domain::new(2, [2, 2, 2], 2), Err(Error::Domain(_))));
        assert!(matches!(Domain::new(3, [1, 1, 1], 22), Err(Error::Capacity(_))));
        // 3D supports at least 18 levels on small root grids
        assert!(Domain::new(3, [4, 4, 4], 18).is_ok());
    }

    #[test]
    fn coords_round_trip() {
        let d = Domain::new(3, [3, 2, 2], 3).unwrap();
        for level in 0..=3u8 {
            let e = d.extent(level);
            for x in 0..e[0] {
                for y in 0..e[1] {
                    for z in 0..e[2] {
                        let id = d.id_at(level, [x, y, z]);
                        assert_eq!(d.level(id), level);
                        assert_eq!(d.coords(id), [x, y, z]);
                    }
                }
            }
        }
    }

    #[test]
    fn adjacency_kinds_2d() {
        let d = Domain::new(2, [2, 2, 1], 2).unwrap();
        let a = d.id_at(0, [0, 0, 0]);
        assert_eq!(d.adjacency(a, d.id_at(0, [1, 0, 0])), Some(AdjacencyKind::Face));
        assert_eq!(d.adjacency(a, d.id_at(0, [1, 1, 0])), Some(AdjacencyKind::Corner));
        assert_eq!(d.adjacency(a, a), None);
        let far = d.id_at(2, [7, 7, 0]);
        assert_eq!(d.adjacency(a, far), None);
        // fine block touching the coarse one along part of its face
        let fine = d.id_at(1, [2, 1, 0]);
        assert_eq!(d.adjacency(a, fine), Some(AdjacencyKind::Face));
        let fine_corner = d.id_at(1, [2, 2, 0]);
        assert_eq!(d.adjacency(a, fine_corner), Some(AdjacencyKind::Corner));
    }

    #[test]
    fn adjacency_kinds_3d() {
        let d = Domain::new(3, [2, 2, 2], 1).unwrap();
        let a = d.id_at(0, [0, 0, 0]);
        assert_eq!(d.adjacency(a, d.id_at(0, [1, 0, 0])), Some(AdjacencyKind::Face));
        assert_eq!(d.adjacency(a, d.id_at(0, [1, 1, 0])), Some(AdjacencyKind::Edge));
        assert_eq!(d.adjacency(a, d.id_at(0, [1, 1, 1])), Some(AdjacencyKind::Corner));
    }

    #[test]
    fn periodic_wrap() {
        let d = Domain::new(2, [3, 1, 1], 1)
            .unwrap()
            .with_periodic([true, false, false]);
        let a = d.id_at(0, [0, 0, 0]);
        let c = d.id_at(0, [2, 0, 0]);
        assert_eq!(d.adjacency(a, c), Some(AdjacencyKind::Face));
        assert_eq!(d.neighbor_cell(a, [-1, 0, 0]), Some(c));
        assert_eq!(d.neighbor_cell(a, [0, 1, 0]), None);
        let open = Domain::new(2, [3, 1, 1], 1).unwrap();
        assert_eq!(open.adjacency(a, c), None);
    }

    #[test]
    fn direction_counts() {
        assert_eq!(Domain::new(2, [1, 1, 1], 1).unwrap().directions().len(), 8);
        assert_eq!(Domain::new(3, [1, 1, 1], 1).unwrap().directions().len(), 26);
    }
}
