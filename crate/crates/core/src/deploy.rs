//! Package construction: budget arithmetic, weight-ranked block selection
//! with a per-group floor, bit-exact serialization, and offline shrink.
//!
//! Selection follows one canonical priority order derived from the frozen
//! importance weights: the per-group argmax blocks first (never dropped),
//! then every remaining (group, block) pair by weight descending. Building at
//! a budget takes the longest prefix that fits; shrinking drops the suffix
//! until the smaller budget holds. The two are therefore exactly coherent:
//! shrinking a package equals building it at the smaller budget.

use crate::error::{Error, Result};
use crate::finetune::{GroupModel, Layout};
use crate::io::{
    expect_magic, read_f32_vec, read_u16, read_u32, write_f32_slice, write_u16, write_u32,
};
use crate::matrix::Matrix;
use crate::types::{GroupingPlan, ItemSlot};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Decimal megabytes to bytes (1 MB = 1e6 bytes).
pub fn mb_to_bytes(mb: f64) -> u64 {
    (mb * 1e6).round() as u64
}

/// A deployable package: one user's embedding plus the selected, normalized
/// blocks of every item group, with the weights used for selection embedded
/// so the device can shrink the package on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct PeePackage {
    pub user_id: u32,
    pub user_embedding: Vec<f32>,
    /// Per item group, ascending block indices; never empty.
    pub selection: Vec<Vec<u8>>,
    /// Normalized block data for selected blocks only, keyed
    /// `(group, block)` in (group asc, block asc) order.
    pub blocks: Vec<((u16, u8), Matrix<f32>)>,
    pub alpha: Vec<f32>,
    pub n_blocks: usize,
    pub block_dim: usize,
    pub group_sizes: Vec<usize>,
    pub membership: Vec<ItemSlot>,
    pub bytes_per_parameter: u64,
    /// Byte budget this package currently satisfies.
    pub budget_bytes: u64,
}

impl PeePackage {
    pub fn num_item_groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn full_dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }

    /// Embedding parameters only: selected blocks plus the user embedding.
    pub fn param_count(&self) -> u64 {
        let mut total = self.user_embedding.len() as u64;
        for (g, sel) in self.selection.iter().enumerate() {
            total += sel.len() as u64 * self.group_sizes[g] as u64 * self.block_dim as u64;
        }
        total
    }

    pub fn byte_size(&self) -> u64 {
        self.param_count() * self.bytes_per_parameter
    }

    pub fn block(&self, group: usize, block: u8) -> Option<&Matrix<f32>> {
        self.blocks
            .binary_search_by_key(&(group as u16, block), |&(k, _)| k)
            .ok()
            .map(|i| &self.blocks[i].1)
    }
}

/// Upper bound on how many blocks fit in `budget_bytes` after the user
/// embedding, at the per-block cost of the smallest group (the exact cost for
/// uniform groups).
pub fn max_blocks_for_budget(
    budget_bytes: u64,
    group_sizes: &[usize],
    block_dim: usize,
    bytes_per_parameter: u64,
    user_embedding_bytes: u64,
) -> Result<u64> {
    let min_rows = *group_sizes.iter().min().expect("at least one group") as u64;
    let per_block = min_rows * block_dim as u64 * bytes_per_parameter;
    let floor_bytes: u64 = group_sizes
        .iter()
        .map(|&rows| rows as u64 * block_dim as u64 * bytes_per_parameter)
        .sum();
    if budget_bytes < user_embedding_bytes + floor_bytes {
        return Err(Error::BudgetInfeasible {
            min_bytes: user_embedding_bytes + floor_bytes,
            got_bytes: budget_bytes,
        });
    }
    Ok((budget_bytes - user_embedding_bytes) / per_block)
}

/// The canonical priority order: per-group argmax blocks (ties to the lowest
/// block index), then all remaining pairs by weight descending (ties by group
/// then block index).
pub fn selection_order(
    alpha: &[f32],
    n_blocks: usize,
    n_groups: usize,
) -> (Vec<(usize, u8)>, Vec<(usize, u8)>) {
    assert_eq!(alpha.len(), n_blocks * n_groups);
    let weight = |n: usize, g: usize| alpha[n * n_groups + g];
    let mut protected = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let mut best = 0usize;
        for n in 1..n_blocks {
            if weight(n, g) > weight(best, g) {
                best = n;
            }
        }
        protected.push((g, best as u8));
    }
    let mut rest: Vec<(usize, u8)> = Vec::with_capacity(n_groups * n_blocks.saturating_sub(1));
    for g in 0..n_groups {
        for n in 0..n_blocks {
            if protected[g].1 != n as u8 {
                rest.push((g, n as u8));
            }
        }
    }
    rest.sort_by(|&(ga, na), &(gb, nb)| {
        weight(nb as usize, gb)
            .partial_cmp(&weight(na as usize, ga))
            .expect("weights must be finite")
            .then(ga.cmp(&gb))
            .then(na.cmp(&nb))
    });
    (protected, rest)
}

/// Keep the per-group argmax block, then the top `c - n_groups` remaining
/// pairs by weight. Returns ascending block indices per group.
pub fn select_blocks(
    alpha: &[f32],
    c: u64,
    n_blocks: usize,
    n_groups: usize,
) -> Result<Vec<Vec<u8>>> {
    if (c as usize) < n_groups {
        return Err(Error::BudgetInfeasible {
            min_bytes: n_groups as u64,
            got_bytes: c,
        });
    }
    let (protected, rest) = selection_order(alpha, n_blocks, n_groups);
    let take = (c as usize - n_groups).min(rest.len());
    Ok(selection_from_prefix(&protected, &rest, take, n_groups))
}

fn selection_from_prefix(
    protected: &[(usize, u8)],
    rest: &[(usize, u8)],
    prefix: usize,
    n_groups: usize,
) -> Vec<Vec<u8>> {
    let mut selection = vec![Vec::new(); n_groups];
    for &(g, n) in protected.iter().chain(rest[..prefix].iter()) {
        selection[g].push(n);
    }
    for sel in &mut selection {
        sel.sort_unstable();
    }
    selection
}

/// Build a package for one user of the group at the given byte budget.
pub fn build_package(model: &GroupModel, user_id: u32, budget_bytes: u64) -> Result<PeePackage> {
    let row = model.user_row(user_id)?;
    let layout = Layout::from_grid(&model.grid);
    let n_groups = layout.n_item_groups;
    let bpp = 4u64;
    let user_bytes = layout.full_dim() as u64 * bpp;

    let (protected, rest) = selection_order(&model.alpha, layout.n_blocks, n_groups);
    let block_bytes = |g: usize| model.grid.group_sizes[g] as u64 * layout.block_dim as u64 * bpp;
    let floor_bytes: u64 = protected.iter().map(|&(g, _)| block_bytes(g)).sum();
    if budget_bytes < user_bytes + floor_bytes {
        return Err(Error::BudgetInfeasible {
            min_bytes: user_bytes + floor_bytes,
            got_bytes: budget_bytes,
        });
    }

    // Longest prefix of the priority order that fits.
    let mut used = user_bytes + floor_bytes;
    let mut prefix = 0usize;
    for &(g, _) in &rest {
        if used + block_bytes(g) > budget_bytes {
            break;
        }
        used += block_bytes(g);
        prefix += 1;
    }
    let selection = selection_from_prefix(&protected, &rest, prefix, n_groups);

    let pkg = PeePackage {
        user_id,
        user_embedding: model.users.row(row).to_vec(),
        blocks: normalized_blocks(model, &selection),
        selection,
        alpha: model.alpha.clone(),
        n_blocks: layout.n_blocks,
        block_dim: layout.block_dim,
        group_sizes: model.grid.group_sizes.clone(),
        membership: model.grid.membership.clone(),
        bytes_per_parameter: bpp,
        budget_bytes,
    };
    assert!(pkg.byte_size() <= budget_bytes);
    Ok(pkg)
}

/// Inference-mode normalization of the selected blocks.
fn normalized_blocks(model: &GroupModel, selection: &[Vec<u8>]) -> Vec<((u16, u8), Matrix<f32>)> {
    let d = model.grid.block_dim;
    let mut out = Vec::new();
    for (g, sel) in selection.iter().enumerate() {
        for &n in sel {
            let raw = model.grid.block(g, n as usize);
            let mut norm = Matrix::zeros(raw.rows(), d);
            for r in 0..raw.rows() {
                for k in 0..d {
                    let c = n as usize * d + k;
                    let xhat = (raw.get(r, k) - model.norm.mean[c])
                        / (model.norm.var[c] + model.norm.eps).sqrt();
                    norm.set(r, k, xhat.tanh());
                }
            }
            out.push(((g as u16, n), norm));
        }
    }
    out
}

/// Drop the lowest-weight non-protected blocks until the package fits the
/// smaller budget. Pure selection arithmetic: no training, no rebuild.
pub fn shrink_package(pkg: &mut PeePackage, new_budget_bytes: u64) -> Result<()> {
    if new_budget_bytes > pkg.budget_bytes {
        return Err(Error::Config(format!(
            "budget can only shrink: {} -> {} bytes",
            pkg.budget_bytes, new_budget_bytes
        )));
    }
    let n_groups = pkg.num_item_groups();
    let (protected, rest) = selection_order(&pkg.alpha, pkg.n_blocks, n_groups);
    let bpp = pkg.bytes_per_parameter;
    let block_bytes = |g: usize| pkg.group_sizes[g] as u64 * pkg.block_dim as u64 * bpp;
    let user_bytes = pkg.user_embedding.len() as u64 * bpp;
    let floor_bytes: u64 = protected.iter().map(|&(g, _)| block_bytes(g)).sum();
    if new_budget_bytes < user_bytes + floor_bytes {
        return Err(Error::BudgetInfeasible {
            min_bytes: user_bytes + floor_bytes,
            got_bytes: new_budget_bytes,
        });
    }

    // Walk the priority order backwards, dropping present blocks while over
    // budget.
    let mut size = pkg.byte_size();
    for &(g, n) in rest.iter().rev() {
        if size <= new_budget_bytes {
            break;
        }
        if let Ok(pos) = pkg.selection[g].binary_search(&n) {
            pkg.selection[g].remove(pos);
            if let Ok(bpos) = pkg.blocks.binary_search_by_key(&(g as u16, n), |&(k, _)| k) {
                pkg.blocks.remove(bpos);
            }
            size -= block_bytes(g);
        }
    }
    debug_assert!(pkg.byte_size() <= new_budget_bytes);
    pkg.budget_bytes = new_budget_bytes;
    Ok(())
}

const PACKAGE_MAGIC: &[u8; 4] = b"PEE1";
const PACKAGE_VERSION: u16 = 1;

/// Serialize: magic, version, N, d, group count, item count, user id; then a
/// u16 selection bitmask per group (group ascending); then the selected block
/// matrices in (group asc, block asc) order, row-major little-endian floats;
/// then the user embedding; then the importance weights.
pub fn write_package(pkg: &PeePackage, path: &Path) -> Result<()> {
    if pkg.n_blocks > 16 {
        return Err(Error::Config(format!(
            "package format stores selections as 16-bit masks; n_blocks = {} unsupported",
            pkg.n_blocks
        )));
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(PACKAGE_MAGIC)?;
    write_u16(&mut w, PACKAGE_VERSION)?;
    write_u32(&mut w, pkg.n_blocks as u32)?;
    write_u32(&mut w, pkg.block_dim as u32)?;
    write_u32(&mut w, pkg.num_item_groups() as u32)?;
    write_u32(&mut w, pkg.membership.len() as u32)?;
    write_u32(&mut w, pkg.user_id)?;
    for sel in &pkg.selection {
        let mut mask = 0u16;
        for &n in sel {
            mask |= 1 << n;
        }
        write_u16(&mut w, mask)?;
    }
    for (_, block) in &pkg.blocks {
        write_f32_slice(&mut w, block.data())?;
    }
    write_f32_slice(&mut w, &pkg.user_embedding)?;
    write_f32_slice(&mut w, &pkg.alpha)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct PackageHeader {
    pub n_blocks: usize,
    pub block_dim: usize,
    pub n_groups: usize,
    pub num_items: usize,
    pub user_id: u32,
}

/// Read only the fixed-size header.
pub fn read_package_header(path: &Path) -> Result<PackageHeader> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, PACKAGE_MAGIC, &pstr)?;
    let version = read_u16(&mut r)?;
    if version != PACKAGE_VERSION {
        return Err(Error::Corrupt {
            path: pstr,
            msg: format!("unsupported package version {version}"),
        });
    }
    Ok(PackageHeader {
        n_blocks: read_u32(&mut r)? as usize,
        block_dim: read_u32(&mut r)? as usize,
        n_groups: read_u32(&mut r)? as usize,
        num_items: read_u32(&mut r)? as usize,
        user_id: read_u32(&mut r)?,
    })
}

/// Deserialize a package. The item-to-(group, row) map is not part of the
/// wire format; it comes from the pipeline's grouping plan.
pub fn read_package(path: &Path, plan: &GroupingPlan) -> Result<PeePackage> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, PACKAGE_MAGIC, &pstr)?;
    let version = read_u16(&mut r)?;
    if version != PACKAGE_VERSION {
        return Err(Error::Corrupt {
            path: pstr,
            msg: format!("unsupported package version {version}"),
        });
    }
    let n_blocks = read_u32(&mut r)? as usize;
    let block_dim = read_u32(&mut r)? as usize;
    let n_groups = read_u32(&mut r)? as usize;
    let num_items = read_u32(&mut r)? as usize;
    let user_id = read_u32(&mut r)?;

    let group_sizes: Vec<usize> = plan.item_groups.iter().map(|g| g.len()).collect();
    if group_sizes.len() != n_groups || group_sizes.iter().sum::<usize>() != num_items {
        return Err(Error::SchemaMismatch(format!(
            "grouping plan has {} groups / {} items, package has {} / {}",
            group_sizes.len(),
            group_sizes.iter().sum::<usize>(),
            n_groups,
            num_items
        )));
    }

    let mut selection = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let mask = read_u16(&mut r)?;
        let mut sel = Vec::new();
        for n in 0..n_blocks.min(16) {
            if mask & (1 << n) != 0 {
                sel.push(n as u8);
            }
        }
        if sel.is_empty() {
            return Err(Error::Corrupt {
                path: pstr,
                msg: "a group has no selected blocks".into(),
            });
        }
        selection.push(sel);
    }
    let mut blocks = Vec::new();
    for (g, sel) in selection.iter().enumerate() {
        for &n in sel {
            let rows = group_sizes[g];
            let data = read_f32_vec(&mut r, rows * block_dim)?;
            blocks.push(((g as u16, n), Matrix::from_vec(rows, block_dim, data)));
        }
    }
    let dim = n_blocks * block_dim;
    let user_embedding = read_f32_vec(&mut r, dim)?;
    let alpha = read_f32_vec(&mut r, n_blocks * n_groups)?;
    let mut tail = Vec::new();
    r.read_to_end(&mut tail)?;
    if !tail.is_empty() {
        return Err(Error::Corrupt {
            path: pstr,
            msg: format!("{} trailing bytes", tail.len()),
        });
    }

    let membership = plan.item_slots();
    let mut pkg = PeePackage {
        user_id,
        user_embedding,
        selection,
        blocks,
        alpha,
        n_blocks,
        block_dim,
        group_sizes,
        membership,
        bytes_per_parameter: 4,
        budget_bytes: 0,
    };
    pkg.budget_bytes = pkg.byte_size();
    Ok(pkg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::NormStats;
    use crate::rng;
    use crate::types::BlockGrid;
    use rand::Rng;

    fn model_with_alpha(
        items: usize,
        n_groups: usize,
        n_blocks: usize,
        d: usize,
        alpha: Vec<f32>,
        seed: u64,
    ) -> GroupModel {
        assert_eq!(items % n_groups, 0);
        let per = items / n_groups;
        let plan = GroupingPlan {
            item_groups: (0..n_groups)
                .map(|g| ((g * per) as u32..((g + 1) * per) as u32).collect())
                .collect(),
            popularity: vec![0; items],
            user_groups: Vec::new(),
        };
        let mut grid = BlockGrid::zeros(&plan, n_blocks, d);
        let mut r = rng::chacha(seed);
        for b in &mut grid.blocks {
            for v in b.data_mut() {
                *v = r.gen_range(-1.0..1.0);
            }
        }
        let dim = n_blocks * d;
        let mut users = Matrix::zeros(2, dim);
        for v in users.data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
        GroupModel {
            group_index: 0,
            user_ids: vec![4, 9],
            grid,
            users,
            norm: NormStats::new(dim, 1e-5, 0.9),
            popularity: vec![1.0 / n_groups as f32; n_groups],
            alpha,
            scorer: None,
            controller: None,
        }
    }

    fn random_alpha(n: usize, r: &mut impl Rng) -> Vec<f32> {
        let raw: Vec<f32> = (0..n).map(|_| r.gen_range(0.01..1.0f32)).collect();
        let sum: f32 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    #[test]
    fn worked_budget_arithmetic_gives_62() {
        // 10 MB budget, 50,000 items in 20 groups, block length 16, 4-byte
        // parameters, negligible user embedding: per block 0.16 MB, so 62.
        let group_sizes = vec![2500usize; 20];
        let c = max_blocks_for_budget(mb_to_bytes(10.0), &group_sizes, 16, 4, 0).unwrap();
        assert_eq!(c, 62);
    }

    #[test]
    fn boundary_budget_gives_exactly_the_floor() {
        let group_sizes = vec![10usize; 4];
        let per_block = 10 * 8 * 4u64;
        let user_bytes = 32 * 4u64;
        let c = max_blocks_for_budget(user_bytes + 4 * per_block, &group_sizes, 8, 4, user_bytes)
            .unwrap();
        assert_eq!(c, 4);
        let err = max_blocks_for_budget(
            user_bytes + 4 * per_block - 1,
            &group_sizes,
            8,
            4,
            user_bytes,
        )
        .unwrap_err();
        assert!(matches!(err, Error::BudgetInfeasible { .. }));
    }

    #[test]
    fn selection_keeps_argmax_then_fills_by_weight() {
        // N=2, G=2, C=3; weights block-major: block0=(0.4, 0.3), block1=(0.1, 0.2).
        let alpha = vec![0.4, 0.3, 0.1, 0.2];
        let sel = select_blocks(&alpha, 3, 2, 2).unwrap();
        // Each group keeps block 0; the extra slot goes to the highest
        // remaining weight, block 1 of group 1.
        assert_eq!(sel, vec![vec![0], vec![0, 1]]);
    }

    #[test]
    fn c_equal_groups_is_argmax_only() {
        let alpha = vec![0.1, 0.5, 0.3, 0.1];
        let sel = select_blocks(&alpha, 2, 2, 2).unwrap();
        assert_eq!(sel, vec![vec![1], vec![0]]);
        assert!(select_blocks(&alpha, 1, 2, 2).is_err());
    }

    #[test]
    fn c_saturated_selects_everything() {
        let alpha = vec![0.1, 0.5, 0.3, 0.1];
        let sel = select_blocks(&alpha, 4, 2, 2).unwrap();
        assert_eq!(sel, vec![vec![0, 1], vec![0, 1]]);
        // C beyond the total is capped.
        let sel = select_blocks(&alpha, 99, 2, 2).unwrap();
        assert_eq!(sel, vec![vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn argmax_ties_break_to_lowest_block() {
        let alpha = vec![0.25; 4];
        let sel = select_blocks(&alpha, 2, 2, 2).unwrap();
        assert_eq!(sel, vec![vec![0], vec![0]]);
    }

    /// Exhaustive check: over random weights, the greedy selection maximizes
    /// the selected weight sum among all selections with one block per group
    /// and at most C total.
    #[test]
    fn greedy_selection_is_optimal_under_floor() {
        let mut r = rng::chacha(77);
        for _ in 0..1000 {
            let n_blocks = r.gen_range(2..=4usize);
            let n_groups = r.gen_range(1..=4usize);
            if n_blocks * n_groups > 16 {
                continue;
            }
            let alpha = random_alpha(n_blocks * n_groups, &mut r);
            for c in n_groups as u64..=(n_blocks * n_groups) as u64 {
                let sel = select_blocks(&alpha, c, n_blocks, n_groups).unwrap();
                let mut got = 0.0f64;
                for (g, s) in sel.iter().enumerate() {
                    for &n in s {
                        got += alpha[n as usize * n_groups + g] as f64;
                    }
                }

                // Brute force over all subsets of the (group, block) pairs.
                let total = n_blocks * n_groups;
                let mut best = -1.0f64;
                for mask in 0u32..(1 << total) {
                    if mask.count_ones() as u64 > c {
                        continue;
                    }
                    let mut per_group = vec![0u32; n_groups];
                    let mut sum = 0.0f64;
                    for bit in 0..total {
                        if mask & (1 << bit) != 0 {
                            let g = bit % n_groups;
                            let n = bit / n_groups;
                            per_group[g] += 1;
                            sum += alpha[n * n_groups + g] as f64;
                        }
                    }
                    if per_group.iter().all(|&x| x >= 1) {
                        best = best.max(sum);
                    }
                }
                assert!(
                    got >= best - 1e-9,
                    "greedy {got} < brute force {best} (N={n_blocks}, G={n_groups}, C={c})"
                );
            }
        }
    }

    #[test]
    fn package_round_trips_bit_identically() {
        let mut r = rng::chacha(5);
        let alpha = random_alpha(8, &mut r);
        let model = model_with_alpha(12, 4, 2, 3, alpha, 6);
        let budget = model.grid.num_items() as u64 * 2 * 3 * 4 + 100;
        let pkg = build_package(&model, 9, budget).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("user.pee");
        write_package(&pkg, &path).unwrap();
        let bytes_a = std::fs::read(&path).unwrap();
        let plan = GroupingPlan {
            item_groups: (0..4u32).map(|g| (g * 3..(g + 1) * 3).collect()).collect(),
            popularity: vec![0; 12],
            user_groups: Vec::new(),
        };
        let back = read_package(&path, &plan).unwrap();
        assert_eq!(back.user_id, pkg.user_id);
        assert_eq!(back.selection, pkg.selection);
        assert_eq!(back.blocks, pkg.blocks);
        assert_eq!(back.user_embedding, pkg.user_embedding);
        assert_eq!(back.alpha, pkg.alpha);
        let path2 = dir.path().join("user2.pee");
        write_package(&back, &path2).unwrap();
        assert_eq!(bytes_a, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn reported_param_count_is_exact() {
        let mut r = rng::chacha(15);
        let alpha = random_alpha(8, &mut r);
        let model = model_with_alpha(8, 2, 4, 2, alpha, 3);
        // Budget for user embedding (8 dims) + 5 blocks of 4x2.
        let budget = (8 + 5 * 8) as u64 * 4;
        let pkg = build_package(&model, 4, budget).unwrap();
        let selected: usize = pkg.selection.iter().map(|s| s.len()).sum();
        assert_eq!(selected, 5);
        assert_eq!(pkg.param_count(), 8 + 5 * 8);
        assert!(pkg.byte_size() <= budget);
    }

    #[test]
    fn infeasible_budget_reports_minimum() {
        let mut r = rng::chacha(25);
        let alpha = random_alpha(8, &mut r);
        let model = model_with_alpha(8, 2, 4, 2, alpha, 3);
        let err = build_package(&model, 4, 10).unwrap_err();
        match err {
            Error::BudgetInfeasible { min_bytes, got_bytes } => {
                // User embedding (8 floats) + one 4x2 block per group.
                assert_eq!(min_bytes, (8 + 2 * 8) as u64 * 4);
                assert_eq!(got_bytes, 10);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn shrink_equals_fresh_build_at_smaller_budget() {
        let mut r = rng::chacha(42);
        for trial in 0..1000 {
            let n_groups = r.gen_range(2..=4usize);
            let n_blocks = r.gen_range(2..=4usize);
            let d = 2usize;
            let per = 3usize;
            let alpha = random_alpha(n_blocks * n_groups, &mut r);
            let model = model_with_alpha(per * n_groups, n_groups, n_blocks, d, alpha, trial);
            let bpp = 4u64;
            let user_bytes = (n_blocks * d) as u64 * bpp;
            let block_bytes = (per * d) as u64 * bpp;
            let min = user_bytes + n_groups as u64 * block_bytes;
            let max = user_bytes + (n_groups * n_blocks) as u64 * block_bytes;
            let m1 = r.gen_range(min..=max);
            let m2 = r.gen_range(min..=m1);

            let mut shrunk = build_package(&model, 4, m1).unwrap();
            shrink_package(&mut shrunk, m2).unwrap();
            let fresh = build_package(&model, 4, m2).unwrap();
            assert_eq!(shrunk.selection, fresh.selection, "trial {trial}");
            assert_eq!(shrunk.blocks, fresh.blocks, "trial {trial}");
            assert!(shrunk.byte_size() <= m2);
            assert!(shrunk.selection.iter().all(|s| !s.is_empty()));
        }
    }

    #[test]
    fn shrink_to_current_size_is_a_no_op() {
        let mut r = rng::chacha(8);
        let alpha = random_alpha(8, &mut r);
        let model = model_with_alpha(8, 2, 4, 2, alpha, 2);
        let budget = (8 + 6 * 8) as u64 * 4;
        let mut pkg = build_package(&model, 4, budget).unwrap();
        let before = pkg.clone();
        shrink_package(&mut pkg, budget).unwrap();
        assert_eq!(pkg.selection, before.selection);
        assert_eq!(pkg.blocks, before.blocks);
    }

    #[test]
    fn shrink_to_minimum_leaves_argmax_blocks() {
        let mut r = rng::chacha(9);
        let alpha = random_alpha(8, &mut r);
        let model = model_with_alpha(8, 2, 4, 2, alpha.clone(), 2);
        let max_budget = (8 + 8 * 8) as u64 * 4;
        let min_budget = (8 + 2 * 8) as u64 * 4;
        let mut pkg = build_package(&model, 4, max_budget).unwrap();
        shrink_package(&mut pkg, min_budget).unwrap();
        let expected = select_blocks(&alpha, 2, 4, 2).unwrap();
        assert_eq!(pkg.selection, expected);
        // Below the floor: error, package untouched.
        assert!(shrink_package(&mut pkg, min_budget - 1).is_err());
        assert_eq!(pkg.selection, expected);
    }

    #[test]
    fn oversized_masks_are_rejected_at_write() {
        let mut r = rng::chacha(10);
        let alpha = random_alpha(17, &mut r);
        let model = model_with_alpha(17, 1, 17, 1, alpha, 4);
        let pkg = build_package(&model, 4, u64::MAX / 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = write_package(&pkg, &dir.path().join("x.pee")).unwrap_err();
        assert!(err.to_string().contains("16-bit"));
    }
}
