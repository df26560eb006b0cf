//! Per-user-group refinement. A copy of the pretrained tables (blocks, user
//! rows, scorer) is trained on the group's interactions while a controller
//! network learns softmax importance weights over (block, item-group) pairs.
//! The two parameter sets are optimized alternately: controller parameters
//! descend the validation loss evaluated at one-step-lookahead model weights;
//! model weights descend the training loss with the controller's current
//! weights plugged in.

use crate::adam::Adam;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::sample_bpr_from;
use crate::io::{
    expect_magic, read_f32, read_f32_vec, read_u16, read_u32, write_f32, write_f32_slice,
    write_u16, write_u32,
};
use crate::matrix::Matrix;
use crate::nn::{sigmoid, softmax, softmax_backward, softplus, Mlp, MlpGrads, MlpTrace};
use crate::pretrain::PretrainOutput;
use crate::rng;
use crate::telemetry;
use crate::types::{BlockGrid, GroupingPlan, InteractionLog, ItemSlot, Role};
use num_traits::Float;
use rayon::prelude::*;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Block layout shared by every tensor in a group model.
#[derive(Debug, Clone, Copy)]
pub struct Layout<'a> {
    pub slots: &'a [ItemSlot],
    pub n_blocks: usize,
    pub block_dim: usize,
    pub n_item_groups: usize,
}

impl<'a> Layout<'a> {
    pub fn from_grid(grid: &'a BlockGrid) -> Layout<'a> {
        Layout {
            slots: &grid.membership,
            n_blocks: grid.n_blocks,
            block_dim: grid.block_dim,
            n_item_groups: grid.group_sizes.len(),
        }
    }

    pub fn full_dim(&self) -> usize {
        self.n_blocks * self.block_dim
    }

    pub fn alpha_len(&self) -> usize {
        self.n_blocks * self.n_item_groups
    }

    /// Importance weights are flattened block-major: entry for block `n` of
    /// item group `g` sits at `n * n_item_groups + g`.
    pub fn alpha_index(&self, block: usize, group: usize) -> usize {
        block * self.n_item_groups + group
    }
}

/// Everything the training loss differentiates: block matrices (indexed
/// `group * n_blocks + block`), this group's user rows, and the scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupWeights<F> {
    pub blocks: Vec<Matrix<F>>,
    pub users: Matrix<F>,
    pub scorer: Mlp<F>,
}

#[derive(Debug, Clone)]
pub struct GroupGrads<F> {
    pub blocks: Vec<Matrix<F>>,
    pub users: Matrix<F>,
    pub scorer: MlpGrads<F>,
}

impl<F: Float> GroupWeights<F> {
    pub fn zero_grads(&self) -> GroupGrads<F> {
        GroupGrads {
            blocks: self
                .blocks
                .iter()
                .map(|b| Matrix::zeros(b.rows(), b.cols()))
                .collect(),
            users: Matrix::zeros(self.users.rows(), self.users.cols()),
            scorer: self.scorer.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<&[F]> {
        let mut t: Vec<&[F]> = self.blocks.iter().map(|b| b.data()).collect();
        t.push(self.users.data());
        t.extend(self.scorer.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t: Vec<&mut [F]> = self.blocks.iter_mut().map(|b| b.data_mut()).collect();
        t.push(self.users.data_mut());
        t.extend(self.scorer.tensors_mut());
        t
    }

    /// `self + factor * grads`, leaving `self` untouched.
    pub fn offset(&self, grads: &GroupGrads<F>, factor: F) -> GroupWeights<F> {
        let mut out = self.clone();
        for (p, g) in out.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pv, &gv) in p.iter_mut().zip(g.iter()) {
                *pv = *pv + factor * gv;
            }
        }
        out
    }

    pub fn cast<G: Float>(&self) -> GroupWeights<G> {
        GroupWeights {
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            users: self.users.cast(),
            scorer: self.scorer.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl<F: Float> GroupGrads<F> {
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut t: Vec<&[F]> = self.blocks.iter().map(|b| b.data()).collect();
        t.push(self.users.data());
        t.extend(self.scorer.tensors());
        t
    }

    pub fn l2_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in self.tensors() {
            for v in t {
                let x = v.to_f64().unwrap();
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Per-column running normalization statistics (column = block * d + dim).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
    pub momentum: f32,
}

impl NormStats {
    pub fn new(dim: usize, eps: f32, momentum: f32) -> NormStats {
        NormStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            eps,
            momentum,
        }
    }

    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Mini-batch statistics (falls back to running stats for one row).
    Batch,
    /// Running statistics.
    Running,
}

/// Normalize a batch of block rows: `tanh((x - mean) / sqrt(var + eps))`.
/// Returns the normalized rows plus the batch statistics when they were used.
pub fn normalize_blocks<F: Float>(
    rows: &Matrix<F>,
    running_mean: &[F],
    running_var: &[F],
    eps: F,
    mode: NormMode,
) -> (Matrix<F>, Option<(Vec<F>, Vec<F>)>) {
    let m = rows.rows();
    let dim = rows.cols();
    let use_batch = mode == NormMode::Batch && m >= 2;
    let (mean, var) = if use_batch {
        let mf = F::from(m as f64).unwrap();
        let mut mean = vec![F::zero(); dim];
        for r in 0..m {
            for (s, &v) in mean.iter_mut().zip(rows.row(r)) {
                *s = *s + v;
            }
        }
        for s in &mut mean {
            *s = *s / mf;
        }
        let mut var = vec![F::zero(); dim];
        for r in 0..m {
            for (c, (s, &v)) in var.iter_mut().zip(rows.row(r)).enumerate() {
                let d = v - mean[c];
                *s = *s + d * d;
            }
        }
        for s in &mut var {
            *s = *s / mf;
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };
    let mut out = Matrix::zeros(m, dim);
    for r in 0..m {
        for c in 0..dim {
            let xhat = (rows.get(r, c) - mean[c]) / (var[c] + eps).sqrt();
            out.set(r, c, xhat.tanh());
        }
    }
    let stats = if use_batch { Some((mean, var)) } else { None };
    (out, stats)
}

/// One ranking sample with the user already resolved to its row in the group
/// model's user table.
#[derive(Debug, Clone, Copy)]
pub struct LocalTriple {
    pub user_row: u32,
    pub positive: u32,
    pub negative: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchRole {
    Train,
    Validation,
}

#[derive(Debug, Clone)]
pub struct LocalBatch {
    pub role: BatchRole,
    pub triples: Vec<LocalTriple>,
}

pub struct ScoreOutcome<F> {
    pub loss_sum: F,
    /// Ranking-loss mean per triple, without the regularizer; the
    /// controller's loss-value input feature.
    pub mean_bpr: F,
    pub w_grads: Option<GroupGrads<F>>,
    pub d_alpha: Option<Vec<F>>,
    pub batch_stats: Option<(Vec<F>, Vec<F>)>,
}

/// Forward (and optionally backward) pass over one batch: gather raw block
/// rows for each positive/negative instance, normalize, scale block `n` of an
/// item in group `g` by `alpha[n, g]`, concatenate with the user row, run the
/// scorer, and take the pairwise ranking loss minus the diversity term.
pub fn score_batch<F: Float>(
    w: &GroupWeights<F>,
    layout: &Layout,
    norm_mean: &[F],
    norm_var: &[F],
    eps: F,
    alpha: &[F],
    batch: &LocalBatch,
    mode: NormMode,
    lambda: F,
    want_w: bool,
    want_alpha: bool,
) -> ScoreOutcome<F> {
    let n_blocks = layout.n_blocks;
    let d = layout.block_dim;
    let dim = layout.full_dim();
    let triples = &batch.triples;
    let m = triples.len() * 2;

    // Gather instance rows: positive then negative per triple.
    let mut item_ids = Vec::with_capacity(m);
    let mut raw = Matrix::zeros(m, dim);
    for (t, triple) in triples.iter().enumerate() {
        for (side, item) in [(0, triple.positive), (1, triple.negative)] {
            let inst = 2 * t + side;
            item_ids.push(item);
            let slot = layout.slots[item as usize];
            for n in 0..n_blocks {
                let block = &w.blocks[slot.group as usize * n_blocks + n];
                raw.row_mut(inst)[n * d..(n + 1) * d]
                    .copy_from_slice(&block.row(slot.row as usize)[..]);
            }
        }
    }

    let (normalized, batch_stats) = normalize_blocks(&raw, norm_mean, norm_var, eps, mode);
    let use_batch_stats = batch_stats.is_some();
    let (mean, var) = match &batch_stats {
        Some((mean, var)) => (mean.clone(), var.clone()),
        None => (norm_mean.to_vec(), norm_var.to_vec()),
    };

    // Scaled item representations and scorer traces.
    let mut weighted = Matrix::zeros(m, dim);
    for inst in 0..m {
        let g = layout.slots[item_ids[inst] as usize].group as usize;
        let wrow = weighted.row_mut(inst);
        let nrow = normalized.row(inst);
        for n in 0..n_blocks {
            let a = alpha[layout.alpha_index(n, g)];
            for k in 0..d {
                wrow[n * d + k] = a * nrow[n * d + k];
            }
        }
    }
    let mut traces: Vec<MlpTrace<F>> = Vec::with_capacity(m);
    let mut preds: Vec<F> = Vec::with_capacity(m);
    let mut h0 = vec![F::zero(); 2 * dim];
    for (t, triple) in triples.iter().enumerate() {
        let urow = w.users.row(triple.user_row as usize);
        for side in 0..2 {
            let inst = 2 * t + side;
            h0[..dim].copy_from_slice(urow);
            h0[dim..].copy_from_slice(weighted.row(inst));
            let trace = w.scorer.forward(&h0);
            preds.push(sigmoid(trace.output[0]));
            traces.push(trace);
        }
    }

    let mut loss_bpr = F::zero();
    let mut d_pred = vec![F::zero(); m];
    for t in 0..triples.len() {
        let s = preds[2 * t] - preds[2 * t + 1];
        loss_bpr = loss_bpr + softplus(-s);
        let c = sigmoid(s) - F::one();
        d_pred[2 * t] = c;
        d_pred[2 * t + 1] = -c;
    }
    let diversity = grid_diversity(&w.blocks, layout);
    let loss_sum = loss_bpr - lambda * diversity;
    let mean_bpr = if triples.is_empty() {
        F::zero()
    } else {
        loss_bpr / F::from(triples.len() as f64).unwrap()
    };

    if !want_w && !want_alpha {
        return ScoreOutcome {
            loss_sum,
            mean_bpr,
            w_grads: None,
            d_alpha: None,
            batch_stats,
        };
    }

    // Backward.
    let mut grads = w.zero_grads();
    let mut d_alpha = vec![F::zero(); alpha.len()];
    let mut d_normalized = Matrix::zeros(m, dim);
    for (t, triple) in triples.iter().enumerate() {
        for side in 0..2 {
            let inst = 2 * t + side;
            let y = preds[inst];
            let dz = d_pred[inst] * y * (F::one() - y);
            let dh0 = w.scorer.backward(&traces[inst], &[dz], &mut grads.scorer);
            // User half.
            let gu = grads.users.row_mut(triple.user_row as usize);
            for k in 0..dim {
                gu[k] = gu[k] + dh0[k];
            }
            // Item half: through the alpha scaling.
            let g = layout.slots[item_ids[inst] as usize].group as usize;
            let nrow = normalized.row(inst);
            let drow = d_normalized.row_mut(inst);
            for n in 0..n_blocks {
                let ai = layout.alpha_index(n, g);
                let a = alpha[ai];
                let mut da = F::zero();
                for k in 0..d {
                    let dv = dh0[dim + n * d + k];
                    da = da + dv * nrow[n * d + k];
                    drow[n * d + k] = a * dv;
                }
                d_alpha[ai] = d_alpha[ai] + da;
            }
        }
    }

    // Through tanh and the normalization back to the raw rows.
    let mut d_raw = Matrix::zeros(m, dim);
    let mf = F::from(m as f64).unwrap();
    for c in 0..dim {
        let ivar = F::one() / (var[c] + eps).sqrt();
        if use_batch_stats {
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xmu = F::zero();
            for inst in 0..m {
                let a = normalized.get(inst, c);
                let dxhat = d_normalized.get(inst, c) * (F::one() - a * a);
                d_raw.set(inst, c, dxhat); // reuse as scratch for dxhat
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xmu = sum_dxhat_xmu + dxhat * (raw.get(inst, c) - mean[c]);
            }
            let half = F::from(0.5).unwrap();
            let two = F::from(2.0).unwrap();
            let dvar = -half * sum_dxhat_xmu * ivar * ivar * ivar;
            let mut sum_xmu = F::zero();
            for inst in 0..m {
                sum_xmu = sum_xmu + (raw.get(inst, c) - mean[c]);
            }
            let dmean = -sum_dxhat * ivar - dvar * two * sum_xmu / mf;
            for inst in 0..m {
                let dxhat = d_raw.get(inst, c);
                let dx = dxhat * ivar
                    + dvar * two * (raw.get(inst, c) - mean[c]) / mf
                    + dmean / mf;
                d_raw.set(inst, c, dx);
            }
        } else {
            for inst in 0..m {
                let a = normalized.get(inst, c);
                let dxhat = d_normalized.get(inst, c) * (F::one() - a * a);
                d_raw.set(inst, c, dxhat * ivar);
            }
        }
    }

    // Scatter into block gradients.
    for inst in 0..m {
        let slot = layout.slots[item_ids[inst] as usize];
        for n in 0..n_blocks {
            let gb = grads.blocks[slot.group as usize * n_blocks + n].row_mut(slot.row as usize);
            let src = &d_raw.row(inst)[n * d..(n + 1) * d];
            for k in 0..d {
                gb[k] = gb[k] + src[k];
            }
        }
    }

    // Diversity term gradient over the whole grid.
    grid_diversity_grad(&w.blocks, layout, -lambda, &mut grads.blocks);

    ScoreOutcome {
        loss_sum,
        mean_bpr,
        w_grads: want_w.then_some(grads),
        d_alpha: want_alpha.then_some(d_alpha),
        batch_stats,
    }
}

/// Diversity over the refined grid: stack all groups' n-th blocks and sum
/// pairwise squared Frobenius distances.
pub fn grid_diversity<F: Float>(blocks: &[Matrix<F>], layout: &Layout) -> F {
    let n_blocks = layout.n_blocks;
    let d = layout.block_dim;
    let nf = F::from(n_blocks as f64).unwrap();
    let mut total = F::zero();
    for g in 0..layout.n_item_groups {
        let rows = blocks[g * n_blocks].rows();
        for r in 0..rows {
            for k in 0..d {
                let mut sum = F::zero();
                let mut sum_sq = F::zero();
                for n in 0..n_blocks {
                    let x = blocks[g * n_blocks + n].get(r, k);
                    sum = sum + x;
                    sum_sq = sum_sq + x * x;
                }
                total = total + nf * sum_sq - sum * sum;
            }
        }
    }
    total
}

fn grid_diversity_grad<F: Float>(
    blocks: &[Matrix<F>],
    layout: &Layout,
    scale: F,
    grads: &mut [Matrix<F>],
) {
    let n_blocks = layout.n_blocks;
    let d = layout.block_dim;
    let nf = F::from(n_blocks as f64).unwrap();
    let two = F::from(2.0).unwrap();
    for g in 0..layout.n_item_groups {
        let rows = blocks[g * n_blocks].rows();
        for r in 0..rows {
            for k in 0..d {
                let mut sum = F::zero();
                for n in 0..n_blocks {
                    sum = sum + blocks[g * n_blocks + n].get(r, k);
                }
                for n in 0..n_blocks {
                    let x = blocks[g * n_blocks + n].get(r, k);
                    let idx = g * n_blocks + n;
                    let cur = grads[idx].get(r, k);
                    grads[idx].set(r, k, cur + scale * two * (nf * x - sum));
                }
            }
        }
    }
}

/// Controller forward: hidden tanh layers over `[popularity, loss_value]`,
/// then softmax over all (block, item-group) pairs.
pub fn controller_forward<F: Float>(
    net: &Mlp<F>,
    popularity: &[F],
    loss_value: F,
) -> (Vec<F>, MlpTrace<F>) {
    let mut input = popularity.to_vec();
    input.push(loss_value);
    let trace = net.forward(&input);
    (softmax(&trace.output), trace)
}

/// Backpropagate a gradient on alpha through the softmax into controller
/// parameter gradients.
pub fn controller_backward<F: Float>(
    net: &Mlp<F>,
    trace: &MlpTrace<F>,
    alpha: &[F],
    d_alpha: &[F],
    grads: &mut MlpGrads<F>,
) {
    let dz = softmax_backward(alpha, d_alpha);
    net.backward(trace, &dz, grads);
}

/// Fraction of the group's train interactions landing in each item group.
pub fn group_popularity_vector(
    log: &InteractionLog,
    plan: &GroupingPlan,
    user_ids: &[u32],
) -> Result<Vec<f32>> {
    let slots = plan.item_slots();
    let mut counts = vec![0u64; plan.num_item_groups()];
    let mut total = 0u64;
    for (u, i) in log.triples_with_role(Role::Train) {
        if user_ids.binary_search(&u).is_ok() {
            counts[slots[i as usize].group as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config(
            "user group has no train interactions".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f32 / total as f64 as f32).collect())
}

/// The model weights descend this: ranking loss on a train batch minus the
/// diversity term, at fixed alpha.
pub fn group_train_loss<F: Float>(
    w: &GroupWeights<F>,
    layout: &Layout,
    norm_mean: &[F],
    norm_var: &[F],
    eps: F,
    alpha: &[F],
    batch: &LocalBatch,
    lambda: F,
) -> F {
    score_batch(
        w, layout, norm_mean, norm_var, eps, alpha, batch, NormMode::Batch, lambda, false, false,
    )
    .loss_sum
}

/// Controller-parameter gradient for one optimization round: the validation
/// loss is evaluated at lookahead weights `W - xi * dW L_train`, and the
/// dependence of those lookahead weights on the controller is recovered with
/// a symmetric finite-difference product when `second_order` is set.
#[allow(clippy::too_many_arguments)]
pub fn hypergradient<F: Float>(
    w: &GroupWeights<F>,
    layout: &Layout,
    norm_mean: &[F],
    norm_var: &[F],
    eps: F,
    lambda: F,
    controller: &Mlp<F>,
    popularity: &[F],
    loss_feature: F,
    train_batch: &LocalBatch,
    val_batch: &LocalBatch,
    xi: F,
    second_order: bool,
) -> (MlpGrads<F>, Vec<F>) {
    assert_eq!(train_batch.role, BatchRole::Train, "lookahead needs a train batch");
    assert_eq!(val_batch.role, BatchRole::Validation, "controller update needs a validation batch");

    let (alpha, trace) = controller_forward(controller, popularity, loss_feature);

    let lookahead;
    let w_eff: &GroupWeights<F> = if second_order {
        let train_out = score_batch(
            w, layout, norm_mean, norm_var, eps, &alpha, train_batch, NormMode::Batch, lambda,
            true, false,
        );
        lookahead = w.offset(train_out.w_grads.as_ref().unwrap(), -xi);
        &lookahead
    } else {
        w
    };

    // Direct term: d L_val / d alpha at the (possibly lookahead) weights.
    let val_out = score_batch(
        w_eff, layout, norm_mean, norm_var, eps, &alpha, val_batch, NormMode::Batch, lambda,
        second_order, true,
    );
    let mut grads = controller.zeros_like();
    controller_backward(
        controller,
        &trace,
        &alpha,
        val_out.d_alpha.as_ref().unwrap(),
        &mut grads,
    );

    if second_order {
        // Correction: xi * d^2 L_train / (dV dW) . dW' L_val, via central
        // differences around W in the direction of the validation gradient.
        let val_w_grads = val_out.w_grads.as_ref().unwrap();
        let gnorm = val_w_grads.l2_norm();
        if gnorm > 1e-12 {
            let r = F::from(1e-2 / gnorm).unwrap();
            let side = |sign: F| -> MlpGrads<F> {
                let moved = w.offset(val_w_grads, sign * r);
                let out = score_batch(
                    &moved, layout, norm_mean, norm_var, eps, &alpha, train_batch,
                    NormMode::Batch, lambda, false, true,
                );
                let mut g = controller.zeros_like();
                controller_backward(
                    controller,
                    &trace,
                    &alpha,
                    out.d_alpha.as_ref().unwrap(),
                    &mut g,
                );
                g
            };
            let plus = side(F::one());
            let minus = side(-F::one());
            let scale = xi / (F::from(2.0).unwrap() * r);
            for ((g, p), m) in grads
                .tensors_mut_internal()
                .into_iter()
                .zip(plus.tensors())
                .zip(minus.tensors())
            {
                for k in 0..g.len() {
                    g[k] = g[k] - scale * (p[k] - m[k]);
                }
            }
        }
    }
    (grads, alpha)
}

impl<F: Float> MlpGrads<F> {
    fn tensors_mut_internal(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.push(l.w.data_mut());
            out.push(l.b.as_mut_slice());
        }
        out.push(self.out.w.data_mut());
        out.push(self.out.b.as_mut_slice());
        out
    }
}

/// A frozen, deployable group model.
#[derive(Debug, Clone)]
pub struct GroupModel {
    pub group_index: usize,
    /// Sorted dense user ids belonging to this group.
    pub user_ids: Vec<u32>,
    pub grid: BlockGrid,
    /// One row per entry of `user_ids`, same order.
    pub users: Matrix<f32>,
    pub norm: NormStats,
    pub popularity: Vec<f32>,
    /// Frozen importance weights, block-major.
    pub alpha: Vec<f32>,
    /// Present only on freshly trained models; not serialized.
    pub scorer: Option<Mlp<f32>>,
    pub controller: Option<Mlp<f32>>,
}

impl GroupModel {
    pub fn user_row(&self, user: u32) -> Result<usize> {
        self.user_ids
            .binary_search(&user)
            .map_err(|_| Error::NotFound(format!("user {user} not in group {}", self.group_index)))
    }
}

/// Score one (user, item) pair with inference-mode normalization. Available
/// on freshly trained models only.
pub fn score_interaction(model: &GroupModel, user: u32, item: u32, alpha: &[f32]) -> Result<f32> {
    let scorer = model
        .scorer
        .as_ref()
        .ok_or_else(|| Error::Config("model was loaded without scorer parameters".into()))?;
    if item as usize >= model.grid.membership.len() {
        return Err(Error::NotFound(format!("item {item}")));
    }
    let row = model.user_row(user)?;
    let layout = Layout::from_grid(&model.grid);
    let dim = layout.full_dim();
    let slot = model.grid.membership[item as usize];
    let mut raw = Matrix::zeros(1, dim);
    for n in 0..layout.n_blocks {
        raw.row_mut(0)[n * layout.block_dim..(n + 1) * layout.block_dim]
            .copy_from_slice(model.grid.block(slot.group as usize, n).row(slot.row as usize));
    }
    let (normalized, _) = normalize_blocks(
        &raw,
        &model.norm.mean,
        &model.norm.var,
        model.norm.eps,
        NormMode::Running,
    );
    let mut h0 = vec![0.0f32; 2 * dim];
    h0[..dim].copy_from_slice(model.users.row(row));
    for n in 0..layout.n_blocks {
        let a = alpha[layout.alpha_index(n, slot.group as usize)];
        for k in 0..layout.block_dim {
            h0[dim + n * layout.block_dim + k] = a * normalized.get(0, n * layout.block_dim + k);
        }
    }
    let trace = scorer.forward(&h0);
    Ok(sigmoid(trace.output[0]))
}

struct GroupData {
    train: Vec<(u32, u32)>,
    val: Vec<(u32, u32)>,
}

fn collect_group_data(log: &InteractionLog, user_ids: &[u32]) -> GroupData {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &(u, i, role) in &log.triples {
        if user_ids.binary_search(&u).is_err() {
            continue;
        }
        match role {
            Role::Train => train.push((u, i)),
            Role::Validation => val.push((u, i)),
            _ => {}
        }
    }
    GroupData { train, val }
}

fn to_local(batch: Vec<crate::ingest::BprTriple>, user_ids: &[u32], role: BatchRole) -> LocalBatch {
    LocalBatch {
        role,
        triples: batch
            .into_iter()
            .map(|t| LocalTriple {
                user_row: user_ids.binary_search(&t.user).expect("group member") as u32,
                positive: t.positive,
                negative: t.negative,
            })
            .collect(),
    }
}

/// Run the alternating optimization for one user group and freeze the result.
/// With `controller_enabled = false` the importance weights stay uniform and
/// only the model weights train (plain fine-tuning).
pub fn optimize_group(
    log: &InteractionLog,
    pretrained: &PretrainOutput,
    user_ids: Vec<u32>,
    group_index: usize,
    cfg: &PipelineConfig,
    controller_enabled: bool,
) -> Result<GroupModel> {
    let layout = Layout::from_grid(&pretrained.grid);
    let dim = layout.full_dim();
    let n_groups = layout.n_item_groups;
    let alpha_len = layout.alpha_len();
    let seed = rng::derive(cfg.seed, "finetune-group", group_index as u64);
    let lambda = cfg.effective_lambda();
    let eps = cfg.model.epsilon;

    let data = collect_group_data(log, &user_ids);
    if data.train.is_empty() {
        return Err(Error::Config(format!(
            "group {group_index} has no train interactions"
        )));
    }
    if data.val.is_empty() {
        return Err(Error::Config(format!(
            "group {group_index} has no validation interactions"
        )));
    }
    let popularity = group_popularity_vector(log, &pretrained.plan, &user_ids)?;

    // W: copies of the pretrained tables plus a fresh scorer.
    let mut users = Matrix::zeros(user_ids.len(), dim);
    for (row, &u) in user_ids.iter().enumerate() {
        users.row_mut(row).copy_from_slice(pretrained.users.row(u as usize));
    }
    let mut init_rng = rng::chacha(rng::derive(seed, "init", 0));
    let scorer = Mlp::new_random(
        2 * dim,
        &cfg.model.scorer_hidden,
        1,
        cfg.pretrain.init_std as f64,
        &mut init_rng,
    );
    let mut w = GroupWeights {
        blocks: pretrained.grid.blocks.clone(),
        users,
        scorer,
    };
    let mut controller = Mlp::new_random(
        n_groups + 1,
        &cfg.model.controller_hidden,
        alpha_len,
        cfg.pretrain.init_std as f64,
        &mut init_rng,
    );
    let mut norm = NormStats::new(dim, eps, cfg.model.bn_momentum);
    let uniform_alpha = vec![1.0f32 / alpha_len as f32; alpha_len];

    let w_len: usize = w.tensors().iter().map(|t| t.len()).sum();
    let mut adam_w = Adam::new(cfg.finetune.learning_rate_w, w_len);
    let v_len: usize = controller.tensors().iter().map(|t| t.len()).sum();
    let mut adam_v = Adam::new(cfg.finetune.learning_rate_v, v_len);
    let xi = cfg.xi();
    let batch_size = cfg.finetune.batch_size;
    let steps_per_epoch = data.train.len().div_ceil(batch_size).max(1);
    // Chance-level ranking loss as the initial loss feature.
    let mut loss_feature = std::f32::consts::LN_2;

    let sample = |pairs: &[(u32, u32)], tag: &str, index: u64, role: BatchRole| -> LocalBatch {
        let mut r = rng::chacha(rng::derive(seed, tag, index));
        let batch = sample_bpr_from(pairs, &log.user_adjacency, log.num_items, batch_size, &mut r);
        to_local(batch, &user_ids, role)
    };

    let mut best: Option<(f32, GroupWeights<f32>, Mlp<f32>, NormStats, f32)> = None;
    let mut stale = 0usize;
    'epochs: for epoch in 0..cfg.finetune.epochs {
        for step in 0..steps_per_epoch {
            let idx = (epoch * steps_per_epoch + step) as u64;
            if controller_enabled {
                let val_batch = sample(&data.val, "val-batch", idx, BatchRole::Validation);
                let lookahead_batch = sample(&data.train, "lookahead-batch", idx, BatchRole::Train);
                let (v_grads, _) = hypergradient(
                    &w,
                    &layout,
                    &norm.mean,
                    &norm.var,
                    eps,
                    lambda,
                    &controller,
                    &popularity,
                    loss_feature,
                    &lookahead_batch,
                    &val_batch,
                    xi,
                    cfg.finetune.second_order && xi != 0.0,
                );
                if !v_grads.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())) {
                    return Err(Error::Numerical(format!(
                        "non-finite controller gradient in group {group_index} epoch {epoch} step {step}"
                    )));
                }
                adam_v.step(controller.tensors_mut(), v_grads.tensors());
            }

            let train_batch = sample(&data.train, "train-batch", idx, BatchRole::Train);
            assert_eq!(train_batch.role, BatchRole::Train);
            let alpha = if controller_enabled {
                controller_forward(&controller, &popularity, loss_feature).0
            } else {
                uniform_alpha.clone()
            };
            let out = score_batch(
                &w, &layout, &norm.mean, &norm.var, eps, &alpha, &train_batch, NormMode::Batch,
                lambda, true, false,
            );
            let grads = out.w_grads.unwrap();
            if !out.loss_sum.is_finite() || !grads.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient in group {group_index} epoch {epoch} step {step}"
                )));
            }
            if let Some((bm, bv)) = &out.batch_stats {
                norm.update(bm, bv);
            }
            telemetry::record_training_batch();
            adam_w.step(w.tensors_mut(), grads.tensors());
            loss_feature = out.mean_bpr;
        }

        // Epoch-end validation loss with running statistics.
        let alpha = if controller_enabled {
            controller_forward(&controller, &popularity, loss_feature).0
        } else {
            uniform_alpha.clone()
        };
        let val_loss = full_pass_loss(
            &w, &layout, &norm, &alpha, &data.val, &user_ids, log, batch_size, lambda, seed, epoch,
        );
        let improved = best.as_ref().map_or(true, |(b, ..)| val_loss < *b);
        if improved {
            best = Some((val_loss, w.clone(), controller.clone(), norm.clone(), loss_feature));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.finetune.patience {
                break 'epochs;
            }
        }
    }
    if let Some((_, bw, bc, bn, bl)) = best {
        w = bw;
        controller = bc;
        norm = bn;
        loss_feature = bl;
    }

    // Freeze alpha: mean controller output over one last validation pass,
    // feeding each batch's ranking loss forward as the next loss feature.
    let alpha = if controller_enabled {
        let val_batches = data.val.len().div_ceil(batch_size).max(1);
        let mut acc = vec![0.0f64; alpha_len];
        let mut lf = loss_feature;
        for b in 0..val_batches {
            let batch = sample(&data.val, "freeze-batch", b as u64, BatchRole::Validation);
            let (a, _) = controller_forward(&controller, &popularity, lf);
            let out = score_batch(
                &w, &layout, &norm.mean, &norm.var, eps, &a, &batch, NormMode::Running, lambda,
                false, false,
            );
            lf = out.mean_bpr;
            for (s, &v) in acc.iter_mut().zip(&a) {
                *s += v as f64;
            }
        }
        acc.iter().map(|&s| (s / val_batches as f64) as f32).collect()
    } else {
        uniform_alpha
    };

    let mut grid = pretrained.grid.clone();
    grid.blocks = w.blocks.clone();
    Ok(GroupModel {
        group_index,
        user_ids,
        grid,
        users: w.users.clone(),
        norm,
        popularity,
        alpha,
        scorer: Some(w.scorer),
        controller: Some(controller),
    })
}

#[allow(clippy::too_many_arguments)]
fn full_pass_loss(
    w: &GroupWeights<f32>,
    layout: &Layout,
    norm: &NormStats,
    alpha: &[f32],
    pairs: &[(u32, u32)],
    user_ids: &[u32],
    log: &InteractionLog,
    batch_size: usize,
    lambda: f32,
    seed: u64,
    epoch: usize,
) -> f32 {
    let batches = pairs.len().div_ceil(batch_size).max(1);
    let mut total = 0.0f32;
    let mut count = 0usize;
    for b in 0..batches {
        let mut r = rng::chacha(rng::derive(seed, "epoch-val", (epoch * batches + b) as u64));
        let batch = sample_bpr_from(pairs, &log.user_adjacency, log.num_items, batch_size, &mut r);
        let local = to_local(batch, user_ids, BatchRole::Validation);
        let out = score_batch(
            w, layout, &norm.mean, &norm.var, norm.eps, alpha, &local,
            NormMode::Running, lambda, false, false,
        );
        total += out.loss_sum;
        count += local.triples.len();
    }
    if count == 0 {
        f32::INFINITY
    } else {
        total / count as f32
    }
}

/// Fine-tune every group, in parallel, and return models ordered by group.
pub fn finetune_all_groups(
    log: &InteractionLog,
    pretrained: &PretrainOutput,
    user_groups: &[Vec<u32>],
    cfg: &PipelineConfig,
) -> Result<Vec<GroupModel>> {
    let controller_enabled = cfg.ablation.importance_weights;
    let mut results: Vec<(usize, Result<GroupModel>)> = user_groups
        .par_iter()
        .enumerate()
        .map(|(g, ids)| {
            let mut ids = ids.clone();
            ids.sort_unstable();
            (
                g,
                optimize_group(log, pretrained, ids, g, cfg, controller_enabled),
            )
        })
        .collect();
    results.sort_by_key(|(g, _)| *g);
    results.into_iter().map(|(_, r)| r).collect()
}

const GROUP_MAGIC: &[u8; 4] = b"PEFT";
const GROUP_VERSION: u16 = 1;

/// Persist the deployable parts of a group model: frozen alpha, running
/// normalization statistics, the refined grid, and the group's user rows.
pub fn write_group_model(model: &GroupModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(GROUP_MAGIC)?;
    write_u16(&mut w, GROUP_VERSION)?;
    write_u32(&mut w, model.group_index as u32)?;
    write_u32(&mut w, model.user_ids.len() as u32)?;
    write_u32(&mut w, model.grid.num_items() as u32)?;
    write_u32(&mut w, model.grid.n_blocks as u32)?;
    write_u32(&mut w, model.grid.block_dim as u32)?;
    write_u32(&mut w, model.grid.num_item_groups() as u32)?;
    write_f32(&mut w, model.norm.eps)?;
    write_f32(&mut w, model.norm.momentum)?;
    for &u in &model.user_ids {
        write_u32(&mut w, u)?;
    }
    write_f32_slice(&mut w, model.users.data())?;
    write_f32_slice(&mut w, &model.alpha)?;
    write_f32_slice(&mut w, &model.norm.mean)?;
    write_f32_slice(&mut w, &model.norm.var)?;
    write_f32_slice(&mut w, &model.popularity)?;
    for g in 0..model.grid.num_item_groups() {
        let items: Vec<u32> = model
            .grid
            .membership
            .iter()
            .enumerate()
            .filter(|(_, s)| s.group as usize == g)
            .map(|(i, _)| i as u32)
            .collect();
        // Rows must be written in row order, not item order.
        let mut by_row: Vec<(u32, u32)> = items
            .iter()
            .map(|&i| (model.grid.membership[i as usize].row, i))
            .collect();
        by_row.sort_unstable();
        write_u32(&mut w, by_row.len() as u32)?;
        for &(_, item) in &by_row {
            write_u32(&mut w, item)?;
        }
    }
    for block in &model.grid.blocks {
        write_f32_slice(&mut w, block.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_group_model(path: &Path) -> Result<GroupModel> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, GROUP_MAGIC, &pstr)?;
    let version = read_u16(&mut r)?;
    if version != GROUP_VERSION {
        return Err(Error::Corrupt {
            path: pstr,
            msg: format!("unsupported group model version {version}"),
        });
    }
    let group_index = read_u32(&mut r)? as usize;
    let user_count = read_u32(&mut r)? as usize;
    let num_items = read_u32(&mut r)? as usize;
    let n_blocks = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let n_groups = read_u32(&mut r)? as usize;
    let eps = read_f32(&mut r)?;
    let momentum = read_f32(&mut r)?;
    let dim = n_blocks * d;
    let mut user_ids = Vec::with_capacity(user_count);
    for _ in 0..user_count {
        user_ids.push(read_u32(&mut r)?);
    }
    let users = Matrix::from_vec(user_count, dim, read_f32_vec(&mut r, user_count * dim)?);
    let alpha = read_f32_vec(&mut r, n_blocks * n_groups)?;
    let mean = read_f32_vec(&mut r, dim)?;
    let var = read_f32_vec(&mut r, dim)?;
    let popularity = read_f32_vec(&mut r, n_groups)?;
    let mut item_groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let len = read_u32(&mut r)? as usize;
        let mut g = Vec::with_capacity(len);
        for _ in 0..len {
            g.push(read_u32(&mut r)?);
        }
        item_groups.push(g);
    }
    let plan = GroupingPlan {
        item_groups,
        popularity: vec![0; num_items],
        user_groups: Vec::new(),
    };
    let mut grid = BlockGrid::zeros(&plan, n_blocks, d);
    for g in 0..n_groups {
        for n in 0..n_blocks {
            let rows = grid.group_sizes[g];
            let data = read_f32_vec(&mut r, rows * d)?;
            *grid.block_mut(g, n) = Matrix::from_vec(rows, d, data);
        }
    }
    let mut tail = Vec::new();
    r.read_to_end(&mut tail)?;
    if !tail.is_empty() {
        return Err(Error::Corrupt {
            path: pstr,
            msg: format!("{} trailing bytes", tail.len()),
        });
    }
    Ok(GroupModel {
        group_index,
        user_ids,
        grid,
        users,
        norm: NormStats {
            mean,
            var,
            eps,
            momentum,
        },
        popularity,
        alpha,
        scorer: None,
        controller: None,
    })
}
