//! On-device inference simulation: parameter-free ranking over a package,
//! top-K evaluation against held-out interactions, and live budget-shrink
//! timelines.

use crate::deploy::{shrink_package, PeePackage};
use crate::error::{Error, Result};
use crate::metrics;
use crate::telemetry;
use crate::types::{InteractionLog, Role};
use std::time::Instant;

/// Full item ranking for the package's user.
#[derive(Debug, Clone)]
pub struct RankingResult {
    /// Every item exactly once, score descending, ties by ascending id.
    pub ordered_items: Vec<u32>,
    /// Indexed by dense item id.
    pub scores: Vec<f32>,
    pub latency_micros: u64,
}

/// Score every item: `(max_sel / |S_j|) * sum_{n in S_j} u . repeat(e_n)`,
/// where `repeat` tiles the d-length block across the full dimension. The
/// tiled dot product collapses to `(sum of user blocks) . e_n`, so the sum
/// of the user's d-length chunks is precomputed once.
pub fn rank_items(pkg: &PeePackage) -> RankingResult {
    let start = Instant::now();
    let d = pkg.block_dim;
    let mut user_chunk_sum = vec![0.0f64; d];
    for chunk in pkg.user_embedding.chunks_exact(d) {
        for (s, &v) in user_chunk_sum.iter_mut().zip(chunk) {
            *s += v as f64;
        }
    }
    let max_sel = pkg.selection.iter().map(|s| s.len()).max().unwrap_or(0) as f64;

    let num_items = pkg.membership.len();
    let mut scores = vec![0.0f32; num_items];
    let mut scored: Vec<(f32, u32)> = Vec::with_capacity(num_items);
    for item in 0..num_items as u32 {
        let slot = pkg.membership[item as usize];
        let sel = &pkg.selection[slot.group as usize];
        let mut acc = 0.0f64;
        for &n in sel {
            let block = pkg
                .block(slot.group as usize, n)
                .expect("selected block present");
            let row = block.row(slot.row as usize);
            for k in 0..d {
                acc += user_chunk_sum[k] * row[k] as f64;
            }
        }
        let score = (max_sel / sel.len() as f64 * acc) as f32;
        scores[item as usize] = score;
        scored.push((score, item));
    }
    let ordered_items = metrics::rank_descending(&mut scored);
    RankingResult {
        ordered_items,
        scores,
        latency_micros: start.elapsed().as_micros() as u64,
    }
}

/// Recall@K and NDCG@K for the package's user against their test items.
/// Candidates are all items except the user's train and validation items.
/// Users without test items are skipped (`None`).
pub fn evaluate_package(
    pkg: &PeePackage,
    log: &InteractionLog,
    k: usize,
) -> Result<Option<(f64, f64)>> {
    let user = pkg.user_id as usize;
    if user >= log.num_users {
        return Err(Error::NotFound(format!("user {user}")));
    }
    let mut ground_truth = Vec::new();
    let mut excluded = Vec::new();
    for &(u, i, role) in &log.triples {
        if u as usize != user {
            continue;
        }
        match role {
            Role::Test => ground_truth.push(i),
            Role::Train | Role::Validation => excluded.push(i),
            Role::Unassigned => {}
        }
    }
    if ground_truth.is_empty() {
        return Ok(None);
    }
    ground_truth.sort_unstable();
    excluded.sort_unstable();

    let ranking = rank_items(pkg);
    let candidates: Vec<u32> = ranking
        .ordered_items
        .iter()
        .copied()
        .filter(|i| excluded.binary_search(i).is_err())
        .collect();
    Ok(Some((
        metrics::recall_at_k(&candidates, &ground_truth, k),
        metrics::ndcg_at_k(&candidates, &ground_truth, k),
    )))
}

/// One row per simulated budget.
#[derive(Debug, Clone)]
pub struct BudgetRow {
    pub budget_mb: f64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub shrink_micros: u64,
    pub rank_micros: u64,
    pub param_count: u64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<BudgetRow>,
}

/// Walk a strictly decreasing budget list: shrink in place, re-rank, and
/// evaluate at each step. The shrink path is pure selection arithmetic;
/// the optimizer-step counter is asserted unchanged to prove no training or
/// rebuild happened.
pub fn simulate_budget_timeline(
    pkg: &mut PeePackage,
    budgets_mb: &[f64],
    log: &InteractionLog,
    k: usize,
) -> Result<EvalReport> {
    if budgets_mb.is_empty() {
        return Err(Error::Config("budget timeline is empty".into()));
    }
    for w in budgets_mb.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::Config(format!(
                "budgets must be strictly decreasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    // A budget at or above the current package size needs no shrink; growth
    // is impossible because dropped blocks are gone. Validate feasibility of
    // the whole timeline before mutating anything.
    let user_bytes = pkg.user_embedding.len() as u64 * pkg.bytes_per_parameter;
    let (protected, _) =
        crate::deploy::selection_order(&pkg.alpha, pkg.n_blocks, pkg.num_item_groups());
    let floor_bytes: u64 = protected
        .iter()
        .map(|&(g, _)| pkg.group_sizes[g] as u64 * pkg.block_dim as u64 * pkg.bytes_per_parameter)
        .sum();
    for &mb in budgets_mb {
        let bytes = crate::deploy::mb_to_bytes(mb);
        if bytes < user_bytes + floor_bytes {
            return Err(Error::BudgetInfeasible {
                min_bytes: user_bytes + floor_bytes,
                got_bytes: bytes,
            });
        }
    }

    let steps_before = telemetry::optimizer_steps();
    let mut report = EvalReport::default();
    for &mb in budgets_mb {
        let bytes = crate::deploy::mb_to_bytes(mb);
        let shrink_micros = if bytes < pkg.byte_size() {
            let t = Instant::now();
            pkg.budget_bytes = pkg.budget_bytes.max(bytes);
            shrink_package(pkg, bytes)?;
            t.elapsed().as_micros() as u64
        } else {
            pkg.budget_bytes = bytes;
            0
        };
        let ranking = rank_items(pkg);
        let (recall, ndcg) = evaluate_package(pkg, log, k)?.unwrap_or((f64::NAN, f64::NAN));
        report.rows.push(BudgetRow {
            budget_mb: mb,
            recall_at_k: recall,
            ndcg_at_k: ndcg,
            shrink_micros,
            rank_micros: ranking.latency_micros,
            param_count: pkg.param_count(),
        });
    }
    assert_eq!(
        telemetry::optimizer_steps(),
        steps_before,
        "shrink path must not touch an optimizer"
    );
    Ok(report)
}
