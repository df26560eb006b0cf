//! Shared data model: interaction logs, block-structured embedding tables,
//! and grouping plans.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Which split a (user, item) interaction belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Unassigned,
    Train,
    Validation,
    Test,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Unassigned => 0,
            Role::Train => 1,
            Role::Validation => 2,
            Role::Test => 3,
        }
    }

    pub fn from_code(c: u8) -> Result<Role> {
        Ok(match c {
            0 => Role::Unassigned,
            1 => Role::Train,
            2 => Role::Validation,
            3 => Role::Test,
            _ => {
                return Err(Error::Corrupt {
                    path: String::new(),
                    msg: format!("invalid role code {c}"),
                })
            }
        })
    }
}

/// Deduplicated implicit-feedback interactions over dense 0-based ids.
///
/// `user_adjacency`/`item_adjacency` are exact inverses of each other over the
/// train triples (over all triples before roles are assigned). Adjacency lists
/// are sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub num_users: usize,
    pub num_items: usize,
    /// Dense id -> original id, for reporting.
    pub user_orig: Vec<String>,
    pub item_orig: Vec<String>,
    /// Sorted by (user, item).
    pub triples: Vec<(u32, u32, Role)>,
    /// Present only when every input record carried a timestamp; aligned with
    /// `triples` and used for chronological splits.
    pub timestamps: Option<Vec<Option<i64>>>,
    pub user_adjacency: Vec<Vec<u32>>,
    pub item_adjacency: Vec<Vec<u32>>,
}

impl InteractionLog {
    /// Rebuild adjacency from triples with the given role (train adjacency
    /// once roles are assigned, everything while still unassigned).
    pub fn rebuild_adjacency(&mut self) {
        let assigned = self.triples.iter().any(|t| t.2 != Role::Unassigned);
        let mut ua = vec![Vec::new(); self.num_users];
        let mut ia = vec![Vec::new(); self.num_items];
        for &(u, i, role) in &self.triples {
            if !assigned || role == Role::Train {
                ua[u as usize].push(i);
                ia[i as usize].push(u);
            }
        }
        for l in ua.iter_mut().chain(ia.iter_mut()) {
            l.sort_unstable();
        }
        self.user_adjacency = ua;
        self.item_adjacency = ia;
    }

    pub fn triples_with_role(&self, role: Role) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.triples
            .iter()
            .filter(move |t| t.2 == role)
            .map(|&(u, i, _)| (u, i))
    }

    /// Per-user item lists for one role, sorted ascending.
    pub fn items_by_user(&self, role: Role) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_users];
        for (u, i) in self.triples_with_role(role) {
            out[u as usize].push(i);
        }
        for l in &mut out {
            l.sort_unstable();
        }
        out
    }

    pub fn train_count(&self) -> usize {
        self.triples.iter().filter(|t| t.2 == Role::Train).count()
    }
}

/// Position of one item inside a [`BlockGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemSlot {
    pub group: u32,
    pub row: u32,
}

/// The item embedding table organized as `num_item_groups x n_blocks`
/// block matrices, each `(items_in_group x block_dim)`.
///
/// The concatenation of row `r` across blocks `0..n_blocks` of one group is
/// that item's full embedding of length `D = n_blocks * block_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrid {
    pub n_blocks: usize,
    pub block_dim: usize,
    pub group_sizes: Vec<usize>,
    /// Indexed by dense item id.
    pub membership: Vec<ItemSlot>,
    /// Indexed `group * n_blocks + block`.
    pub blocks: Vec<Matrix<f32>>,
}

impl BlockGrid {
    pub fn num_item_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn full_dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }

    pub fn num_items(&self) -> usize {
        self.membership.len()
    }

    pub fn block(&self, group: usize, block: usize) -> &Matrix<f32> {
        &self.blocks[group * self.n_blocks + block]
    }

    pub fn block_mut(&mut self, group: usize, block: usize) -> &mut Matrix<f32> {
        &mut self.blocks[group * self.n_blocks + block]
    }

    /// Zero-valued grid with the same layout as `plan` describes.
    pub fn zeros(plan: &GroupingPlan, n_blocks: usize, block_dim: usize) -> BlockGrid {
        let group_sizes: Vec<usize> = plan.item_groups.iter().map(|g| g.len()).collect();
        let num_items: usize = group_sizes.iter().sum();
        let mut membership = vec![ItemSlot { group: 0, row: 0 }; num_items];
        for (g, items) in plan.item_groups.iter().enumerate() {
            for (r, &item) in items.iter().enumerate() {
                membership[item as usize] = ItemSlot {
                    group: g as u32,
                    row: r as u32,
                };
            }
        }
        let blocks = group_sizes
            .iter()
            .flat_map(|&sz| (0..n_blocks).map(move |_| Matrix::zeros(sz, block_dim)))
            .collect();
        BlockGrid {
            n_blocks,
            block_dim,
            group_sizes,
            membership,
            blocks,
        }
    }

    /// Concatenate the item's row across blocks `0..n_blocks` of its group.
    pub fn full_embedding_of(&self, item: u32) -> Result<Vec<f32>> {
        let slot = self
            .membership
            .get(item as usize)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("item {item}")))?;
        let mut out = Vec::with_capacity(self.full_dim());
        for n in 0..self.n_blocks {
            out.extend_from_slice(self.block(slot.group as usize, n).row(slot.row as usize));
        }
        Ok(out)
    }

    /// Write a full-length embedding back as the item's block rows.
    pub fn set_full_embedding(&mut self, item: u32, values: &[f32]) {
        assert_eq!(values.len(), self.full_dim());
        let slot = self.membership[item as usize];
        let d = self.block_dim;
        for n in 0..self.n_blocks {
            self.block_mut(slot.group as usize, n)
                .row_mut(slot.row as usize)
                .copy_from_slice(&values[n * d..(n + 1) * d]);
        }
    }

    pub fn param_count(&self) -> usize {
        self.num_items() * self.full_dim()
    }
}

/// Row-per-user embedding table of width `D`.
pub type UserEmbeddingTable = Matrix<f32>;

/// User partition and popularity-ordered item segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupingPlan {
    /// Ordered (popularity-descending) item lists; groups partition the items.
    pub item_groups: Vec<Vec<u32>>,
    /// Per-item train interaction count, indexed by dense item id.
    pub popularity: Vec<u32>,
    /// Disjoint user sets; empty until clustering has run.
    pub user_groups: Vec<Vec<u32>>,
}

impl GroupingPlan {
    pub fn num_item_groups(&self) -> usize {
        self.item_groups.len()
    }

    /// Dense item id -> (group, row) lookup table.
    pub fn item_slots(&self) -> Vec<ItemSlot> {
        let num_items: usize = self.item_groups.iter().map(|g| g.len()).sum();
        let mut slots = vec![ItemSlot { group: 0, row: 0 }; num_items];
        for (g, items) in self.item_groups.iter().enumerate() {
            for (r, &item) in items.iter().enumerate() {
                slots[item as usize] = ItemSlot {
                    group: g as u32,
                    row: r as u32,
                };
            }
        }
        slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_from_rows(n_blocks: usize, d: usize, rows: &[Vec<f32>]) -> BlockGrid {
        let plan = GroupingPlan {
            item_groups: vec![(0..rows.len() as u32).collect()],
            popularity: vec![0; rows.len()],
            user_groups: vec![],
        };
        let mut grid = BlockGrid::zeros(&plan, n_blocks, d);
        for (i, row) in rows.iter().enumerate() {
            grid.set_full_embedding(i as u32, row);
        }
        grid
    }

    #[test]
    fn full_embedding_concatenates_blocks_in_order() {
        let grid = grid_from_rows(2, 2, &[vec![1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(grid.full_embedding_of(0).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(grid.block(0, 0).row(0), &[1.0, 2.0]);
        assert_eq!(grid.block(0, 1).row(0), &[3.0, 4.0]);
    }

    #[test]
    fn single_block_is_identity() {
        let grid = grid_from_rows(1, 3, &[vec![5.0, 6.0, 7.0]]);
        assert_eq!(grid.full_embedding_of(0).unwrap(), vec![5.0, 6.0, 7.0]);
    }

    #[test]
    fn sixteen_block_round_trip_is_bit_identical() {
        let d = 8;
        let n = 16;
        let row: Vec<f32> = (0..n * d).map(|i| (i as f32) * 0.25 - 3.0).collect();
        let grid = grid_from_rows(n, d, &[row.clone()]);
        let full = grid.full_embedding_of(0).unwrap();
        assert_eq!(full.len(), 128);
        assert_eq!(full, row);
        for (k, chunk) in full.chunks_exact(d).enumerate() {
            assert_eq!(chunk, grid.block(0, k).row(0));
        }
    }

    #[test]
    fn unknown_item_is_not_found() {
        let grid = grid_from_rows(1, 2, &[vec![0.0, 0.0]]);
        assert!(matches!(grid.full_embedding_of(9), Err(Error::NotFound(_))));
    }
}
