//! Heap-ordered binary tree geometry.

use crate::block::PathId;
use crate::error::{OramError, Result};

/// Shape of one ORAM tree: `height + 1` levels of `z`-slot buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeGeometry {
    pub height: u32,
    pub z: usize,
}

impl TreeGeometry {
    pub fn new(height: u32, z: usize) -> Result<Self> {
        if height > 24 {
            return Err(OramError::Config(format!(
                "tree height {height} exceeds the 24-bit label width"
            )));
        }
        if z == 0 {
            return Err(OramError::Config("bucket size must be positive".into()));
        }
        Ok(TreeGeometry { height, z })
    }

    pub fn leaves(&self) -> u64 {
        1u64 << self.height
    }

    pub fn buckets(&self) -> usize {
        (1usize << (self.height + 1)) - 1
    }

    pub fn slots(&self) -> usize {
        self.buckets() * self.z
    }

    /// Number of blocks on one root-to-leaf path.
    pub fn path_blocks(&self) -> usize {
        self.z * (self.height as usize + 1)
    }

    pub fn check_label(&self, label: PathId) -> Result<()> {
        PathId::checked(label.0, self.height).map(|_| ())
    }

    /// Bucket index at `depth` (root = 0) on the path to `label`.
    pub fn node_at_depth(&self, label: PathId, depth: u32) -> usize {
        debug_assert!(depth <= self.height);
        ((1usize << depth) - 1) + (label.0 as usize >> (self.height - depth))
    }

    /// Deepest depth shared by the paths of two labels.
    pub fn common_depth(&self, a: PathId, b: PathId) -> u32 {
        let diff = a.0 ^ b.0;
        if diff == 0 {
            self.height
        } else {
            let highest = 31 - diff.leading_zeros();
            self.height - (highest + 1)
        }
    }

    /// Bucket indices of the path to `label`, leaf first.
    pub fn path_nodes(&self, label: PathId) -> Result<Vec<usize>> {
        self.check_label(label)?;
        Ok((0..=self.height)
            .rev()
            .map(|d| self.node_at_depth(label, d))
            .collect())
    }
}

/// Free-function form of [`TreeGeometry::path_nodes`].
pub fn path_nodes(label: PathId, height: u32) -> Result<Vec<usize>> {
    TreeGeometry::new(height, 1)?.path_nodes(label)
}
