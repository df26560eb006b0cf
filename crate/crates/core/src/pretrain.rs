//! Full-table embedding pretraining: neighborhood propagation over the train
//! bipartite graph, pairwise ranking loss, and a block-diversity regularizer,
//! trained by Adam with early stopping on validation recall.

use crate::adam::Adam;
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::ingest::{sample_bpr_from, BprTriple};
use crate::io::{
    expect_magic, read_f32_vec, read_u16, read_u32, write_f32_slice, write_u16, write_u32,
};
use crate::matrix::Matrix;
use crate::metrics;
use crate::rng;
use crate::telemetry;
use crate::types::{BlockGrid, GroupingPlan, InteractionLog, Role, UserEmbeddingTable};
use num_traits::Float;
use rand_distr::{Distribution, Normal};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// How propagated layers are reduced to the output embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    /// Use layer L only.
    FinalLayer,
    /// Average layers 0..=L.
    MeanAllLayers,
}

/// Train-graph adjacency with cached degrees. Edge normalization is
/// `1/sqrt(deg(u) * deg(v))`, identical from either endpoint; isolated nodes
/// pass their embedding through unchanged at every layer.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub user_adj: Vec<Vec<u32>>,
    pub item_adj: Vec<Vec<u32>>,
    pub layers: usize,
}

impl Propagation {
    pub fn new(log: &InteractionLog, layers: usize) -> Propagation {
        Propagation {
            user_adj: log.user_adjacency.clone(),
            item_adj: log.item_adjacency.clone(),
            layers,
        }
    }

    pub fn eta<F: Float>(&self, user: u32, item: u32) -> F {
        let du = self.user_adj[user as usize].len() as f64;
        let dv = self.item_adj[item as usize].len() as f64;
        F::from(1.0 / (du * dv).sqrt()).unwrap()
    }

    /// Run all layers; index 0 of each returned list holds the inputs.
    pub fn propagate<F: Float>(
        &self,
        user0: &Matrix<F>,
        item0: &Matrix<F>,
    ) -> (Vec<Matrix<F>>, Vec<Matrix<F>>) {
        let dim = user0.cols();
        let mut users = vec![user0.clone()];
        let mut items = vec![item0.clone()];
        for _ in 0..self.layers {
            let prev_u = users.last().unwrap();
            let prev_v = items.last().unwrap();
            let mut next_u = Matrix::zeros(user0.rows(), dim);
            let mut next_v = Matrix::zeros(item0.rows(), dim);
            for i in 0..self.user_adj.len() {
                let adj = &self.user_adj[i];
                let out = next_u.row_mut(i);
                if adj.is_empty() {
                    out.copy_from_slice(prev_u.row(i));
                    continue;
                }
                for &j in adj {
                    let eta: F = self.eta(i as u32, j);
                    for (o, &v) in out.iter_mut().zip(prev_v.row(j as usize)) {
                        *o = *o + eta * v;
                    }
                }
            }
            for j in 0..self.item_adj.len() {
                let adj = &self.item_adj[j];
                let out = next_v.row_mut(j);
                if adj.is_empty() {
                    out.copy_from_slice(prev_v.row(j));
                    continue;
                }
                for &i in adj {
                    let eta: F = self.eta(i, j as u32);
                    for (o, &v) in out.iter_mut().zip(prev_u.row(i as usize)) {
                        *o = *o + eta * v;
                    }
                }
            }
            users.push(next_u);
            items.push(next_v);
        }
        (users, items)
    }

    /// Reduce propagated layers to the output tables.
    pub fn readout<F: Float>(
        &self,
        users: &[Matrix<F>],
        items: &[Matrix<F>],
        mode: Readout,
    ) -> (Matrix<F>, Matrix<F>) {
        match mode {
            Readout::FinalLayer => {
                (users.last().unwrap().clone(), items.last().unwrap().clone())
            }
            Readout::MeanAllLayers => (mean_layers(users), mean_layers(items)),
        }
    }

    /// Push output-table gradients back through the propagation to layer 0.
    pub fn backward<F: Float>(
        &self,
        d_user_out: Matrix<F>,
        d_item_out: Matrix<F>,
        mode: Readout,
    ) -> (Matrix<F>, Matrix<F>) {
        let layers = self.layers;
        let mut d_users: Vec<Matrix<F>> = (0..=layers)
            .map(|_| Matrix::zeros(d_user_out.rows(), d_user_out.cols()))
            .collect();
        let mut d_items: Vec<Matrix<F>> = (0..=layers)
            .map(|_| Matrix::zeros(d_item_out.rows(), d_item_out.cols()))
            .collect();
        match mode {
            Readout::FinalLayer => {
                d_users[layers] = d_user_out;
                d_items[layers] = d_item_out;
            }
            Readout::MeanAllLayers => {
                let scale = F::from(1.0 / (layers + 1) as f64).unwrap();
                for l in 0..=layers {
                    for (o, &v) in d_users[l].data_mut().iter_mut().zip(d_user_out.data()) {
                        *o = *o + v * scale;
                    }
                    for (o, &v) in d_items[l].data_mut().iter_mut().zip(d_item_out.data()) {
                        *o = *o + v * scale;
                    }
                }
            }
        }
        for l in (1..=layers).rev() {
            for i in 0..self.user_adj.len() {
                let adj = &self.user_adj[i];
                if adj.is_empty() {
                    let (lower, upper) = d_users.split_at_mut(l);
                    for (o, &v) in lower[l - 1].row_mut(i).iter_mut().zip(upper[0].row(i)) {
                        *o = *o + v;
                    }
                    continue;
                }
                let du = d_users[l].row(i).to_vec();
                for &j in adj {
                    let eta: F = self.eta(i as u32, j);
                    for (o, &v) in d_items[l - 1].row_mut(j as usize).iter_mut().zip(du.iter()) {
                        *o = *o + eta * v;
                    }
                }
            }
            for j in 0..self.item_adj.len() {
                let adj = &self.item_adj[j];
                if adj.is_empty() {
                    let (lower, upper) = d_items.split_at_mut(l);
                    for (o, &v) in lower[l - 1].row_mut(j).iter_mut().zip(upper[0].row(j)) {
                        *o = *o + v;
                    }
                    continue;
                }
                let dv = d_items[l].row(j).to_vec();
                for &i in adj {
                    let eta: F = self.eta(i, j as u32);
                    for (o, &v) in d_users[l - 1].row_mut(i as usize).iter_mut().zip(dv.iter()) {
                        *o = *o + eta * v;
                    }
                }
            }
        }
        (d_users.swap_remove(0), d_items.swap_remove(0))
    }
}

fn mean_layers<F: Float>(layers: &[Matrix<F>]) -> Matrix<F> {
    let scale = F::from(1.0 / layers.len() as f64).unwrap();
    let mut out = Matrix::zeros(layers[0].rows(), layers[0].cols());
    for layer in layers {
        for (o, &v) in out.data_mut().iter_mut().zip(layer.data()) {
            *o = *o + v;
        }
    }
    for o in out.data_mut() {
        *o = *o * scale;
    }
    out
}

/// Pairwise ranking loss over readout tables minus the diversity term:
/// `sum softplus(-(y_pos - y_neg)) - lambda * sum_{n1<n2} ||E_n1 - E_n2||_F^2`
/// where `E_n` stacks every item's n-th block.
pub fn loss_given_readout<F: Float>(
    triples: &[BprTriple],
    user_out: &Matrix<F>,
    item_out: &Matrix<F>,
    lambda: F,
    n_blocks: usize,
) -> F {
    let mut loss = F::zero();
    for t in triples {
        let u = user_out.row(t.user as usize);
        let p = item_out.row(t.positive as usize);
        let n = item_out.row(t.negative as usize);
        let mut s = F::zero();
        for k in 0..u.len() {
            s = s + u[k] * (p[k] - n[k]);
        }
        loss = loss + crate::nn::softplus(-s);
    }
    loss - lambda * block_diversity(item_out, n_blocks)
}

/// `sum_{n1<n2} ||E_n1 - E_n2||_F^2`, computed per (row, in-block column) via
/// the identity `N * sum_n x_n^2 - (sum_n x_n)^2`.
pub fn block_diversity<F: Float>(item_out: &Matrix<F>, n_blocks: usize) -> F {
    let dim = item_out.cols();
    assert_eq!(dim % n_blocks, 0);
    let d = dim / n_blocks;
    let nf = F::from(n_blocks as f64).unwrap();
    let mut total = F::zero();
    for r in 0..item_out.rows() {
        let row = item_out.row(r);
        for k in 0..d {
            let mut sum = F::zero();
            let mut sum_sq = F::zero();
            for n in 0..n_blocks {
                let x = row[n * d + k];
                sum = sum + x;
                sum_sq = sum_sq + x * x;
            }
            total = total + nf * sum_sq - sum * sum;
        }
    }
    total
}

fn block_diversity_grad<F: Float>(
    item_out: &Matrix<F>,
    n_blocks: usize,
    scale: F,
    grad: &mut Matrix<F>,
) {
    let dim = item_out.cols();
    let d = dim / n_blocks;
    let nf = F::from(n_blocks as f64).unwrap();
    let two = F::from(2.0).unwrap();
    for r in 0..item_out.rows() {
        let row = item_out.row(r);
        let grow = grad.row_mut(r);
        for k in 0..d {
            let mut sum = F::zero();
            for n in 0..n_blocks {
                sum = sum + row[n * d + k];
            }
            for n in 0..n_blocks {
                let x = row[n * d + k];
                grow[n * d + k] = grow[n * d + k] + scale * two * (nf * x - sum);
            }
        }
    }
}

/// Full loss through propagation; this is the value the gradient oracle
/// differentiates numerically.
pub fn pretrain_loss<F: Float>(
    prop: &Propagation,
    triples: &[BprTriple],
    user0: &Matrix<F>,
    item0: &Matrix<F>,
    lambda: F,
    n_blocks: usize,
    mode: Readout,
) -> F {
    let (users, items) = prop.propagate(user0, item0);
    let (u_out, v_out) = prop.readout(&users, &items, mode);
    loss_given_readout(triples, &u_out, &v_out, lambda, n_blocks)
}

/// Loss plus analytic gradients with respect to the layer-0 tables.
pub fn pretrain_loss_grad<F: Float>(
    prop: &Propagation,
    triples: &[BprTriple],
    user0: &Matrix<F>,
    item0: &Matrix<F>,
    lambda: F,
    n_blocks: usize,
    mode: Readout,
) -> (F, Matrix<F>, Matrix<F>) {
    let (users, items) = prop.propagate(user0, item0);
    let (u_out, v_out) = prop.readout(&users, &items, mode);

    let mut loss = F::zero();
    let mut d_u_out = Matrix::zeros(u_out.rows(), u_out.cols());
    let mut d_v_out = Matrix::zeros(v_out.rows(), v_out.cols());
    for t in triples {
        let u = u_out.row(t.user as usize);
        let p = v_out.row(t.positive as usize);
        let n = v_out.row(t.negative as usize);
        let mut s = F::zero();
        for k in 0..u.len() {
            s = s + u[k] * (p[k] - n[k]);
        }
        loss = loss + crate::nn::softplus(-s);
        // d loss / d s = sigmoid(s) - 1.
        let c = crate::nn::sigmoid(s) - F::one();
        let urow = t.user as usize;
        let prow = t.positive as usize;
        let nrow = t.negative as usize;
        for k in 0..u.len() {
            d_u_out.row_mut(urow)[k] = d_u_out.row(urow)[k] + c * (p[k] - n[k]);
        }
        let u_copy: Vec<F> = u.to_vec();
        for k in 0..u_copy.len() {
            d_v_out.row_mut(prow)[k] = d_v_out.row(prow)[k] + c * u_copy[k];
            d_v_out.row_mut(nrow)[k] = d_v_out.row(nrow)[k] - c * u_copy[k];
        }
    }
    loss = loss - lambda * block_diversity(&v_out, n_blocks);
    block_diversity_grad(&v_out, n_blocks, -lambda, &mut d_v_out);

    let (d_user0, d_item0) = prop.backward(d_u_out, d_v_out, mode);
    (loss, d_user0, d_item0)
}

/// Seeded zero-mean Gaussian layer-0 tables.
pub fn init_tables(
    num_users: usize,
    num_items: usize,
    dim: usize,
    std: f32,
    seed: u64,
) -> (Matrix<f32>, Matrix<f32>) {
    let mut r = rng::chacha(rng::derive(seed, "pretrain-init", 0));
    let normal = Normal::new(0.0f64, std as f64).unwrap();
    let mut u = Matrix::zeros(num_users, dim);
    for v in u.data_mut() {
        *v = normal.sample(&mut r) as f32;
    }
    let mut it = Matrix::zeros(num_items, dim);
    for v in it.data_mut() {
        *v = normal.sample(&mut r) as f32;
    }
    (u, it)
}

/// Mean validation recall using dot-product scores over the readout tables;
/// candidates exclude each user's train items.
pub fn validation_recall(
    user_out: &Matrix<f32>,
    item_out: &Matrix<f32>,
    log: &InteractionLog,
    k: usize,
) -> f64 {
    let val_items = log.items_by_user(Role::Validation);
    let mut total = 0.0;
    let mut counted = 0usize;
    for u in 0..log.num_users {
        if val_items[u].is_empty() {
            continue;
        }
        let urow = user_out.row(u);
        let train = &log.user_adjacency[u];
        let mut scored: Vec<(f32, u32)> = Vec::with_capacity(log.num_items);
        for i in 0..log.num_items as u32 {
            if train.binary_search(&i).is_ok() {
                continue;
            }
            let irow = item_out.row(i as usize);
            let mut s = 0.0f32;
            for (a, b) in urow.iter().zip(irow) {
                s += a * b;
            }
            scored.push((s, i));
        }
        let ranked = metrics::rank_descending(&mut scored);
        total += metrics::recall_at_k(&ranked, &val_items[u], k);
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

pub struct PretrainOutput {
    pub grid: BlockGrid,
    pub users: UserEmbeddingTable,
    pub plan: GroupingPlan,
}

fn reshape_to_grid(
    item_out: &Matrix<f32>,
    plan: &GroupingPlan,
    n_blocks: usize,
    d: usize,
) -> BlockGrid {
    let mut grid = BlockGrid::zeros(plan, n_blocks, d);
    for item in 0..item_out.rows() {
        grid.set_full_embedding(item as u32, item_out.row(item));
    }
    grid
}

/// Train the global tables and reshape the item table into the block grid.
/// With zero epochs the seeded initialization is returned untouched.
pub fn run_pretrain(
    log: &InteractionLog,
    plan: &GroupingPlan,
    cfg: &PipelineConfig,
    readout: Readout,
) -> Result<PretrainOutput> {
    let d = cfg.model.block_dim;
    let n_blocks = cfg.model.n_blocks;
    let dim = d * n_blocks;
    let lambda = cfg.effective_lambda();
    let seed = cfg.seed;

    let (mut user0, mut item0) = init_tables(
        log.num_users,
        log.num_items,
        dim,
        cfg.pretrain.init_std,
        seed,
    );
    if cfg.pretrain.epochs == 0 {
        return Ok(PretrainOutput {
            grid: reshape_to_grid(&item0, plan, n_blocks, d),
            users: user0,
            plan: plan.clone(),
        });
    }

    let prop = Propagation::new(log, cfg.model.l1_layers);
    let train: Vec<(u32, u32)> = log.triples_with_role(Role::Train).collect();
    if train.is_empty() {
        return Err(Error::Config("no train interactions".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.pretrain.batch_size).max(1);
    let mut adam = Adam::new(
        cfg.pretrain.learning_rate,
        user0.data().len() + item0.data().len(),
    );
    let wd = cfg.pretrain.weight_decay;

    let mut best: Option<(f64, Matrix<f32>, Matrix<f32>)> = None;
    let mut stale = 0usize;
    'outer: for epoch in 0..cfg.pretrain.epochs {
        for step in 0..steps_per_epoch {
            let mut r = rng::chacha(rng::derive(
                seed,
                "pretrain-batch",
                (epoch * steps_per_epoch + step) as u64,
            ));
            let batch = sample_bpr_from(
                &train,
                &log.user_adjacency,
                log.num_items,
                cfg.pretrain.batch_size,
                &mut r,
            );
            let (loss, mut gu, mut gv) =
                pretrain_loss_grad(&prop, &batch, &user0, &item0, lambda, n_blocks, readout);
            if !loss.is_finite() || !gu.all_finite() || !gv.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss or gradient at epoch {epoch} step {step}"
                )));
            }
            for (g, &p) in gu.data_mut().iter_mut().zip(user0.data()) {
                *g += wd * p;
            }
            for (g, &p) in gv.data_mut().iter_mut().zip(item0.data()) {
                *g += wd * p;
            }
            telemetry::record_training_batch();
            adam.step(
                vec![user0.data_mut(), item0.data_mut()],
                vec![gu.data(), gv.data()],
            );
        }
        let evaluate =
            (epoch + 1) % cfg.pretrain.eval_every.max(1) == 0 || epoch + 1 == cfg.pretrain.epochs;
        if evaluate {
            let (users, items) = prop.propagate(&user0, &item0);
            let (u_out, v_out) = prop.readout(&users, &items, readout);
            let recall = validation_recall(&u_out, &v_out, log, cfg.pretrain.eval_k);
            let improved = best.as_ref().map_or(true, |(b, _, _)| recall > *b);
            if improved {
                best = Some((recall, user0.clone(), item0.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.pretrain.patience {
                    break 'outer;
                }
            }
        }
    }
    if let Some((_, bu, bi)) = best {
        user0 = bu;
        item0 = bi;
    }

    let (users, items) = prop.propagate(&user0, &item0);
    let (u_out, v_out) = prop.readout(&users, &items, readout);
    Ok(PretrainOutput {
        grid: reshape_to_grid(&v_out, plan, n_blocks, d),
        users: u_out,
        plan: plan.clone(),
    })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PEEL";
const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(out: &PretrainOutput, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u16(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, out.users.rows() as u32)?;
    write_u32(&mut w, out.grid.num_items() as u32)?;
    write_u32(&mut w, out.grid.n_blocks as u32)?;
    write_u32(&mut w, out.grid.block_dim as u32)?;
    write_u32(&mut w, out.grid.num_item_groups() as u32)?;
    for group in &out.plan.item_groups {
        write_u32(&mut w, group.len() as u32)?;
        for &item in group {
            write_u32(&mut w, item)?;
        }
    }
    for &p in &out.plan.popularity {
        write_u32(&mut w, p)?;
    }
    write_f32_slice(&mut w, out.users.data())?;
    for block in &out.grid.blocks {
        write_f32_slice(&mut w, block.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<PretrainOutput> {
    let pstr = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    expect_magic(&mut r, CHECKPOINT_MAGIC, &pstr)?;
    let version = read_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt {
            path: pstr,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let num_users = read_u32(&mut r)? as usize;
    let num_items = read_u32(&mut r)? as usize;
    let n_blocks = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let num_groups = read_u32(&mut r)? as usize;
    let mut item_groups = Vec::with_capacity(num_groups);
    for _ in 0..num_groups {
        let len = read_u32(&mut r)? as usize;
        let mut g = Vec::with_capacity(len);
        for _ in 0..len {
            g.push(read_u32(&mut r)?);
        }
        item_groups.push(g);
    }
    let mut popularity = Vec::with_capacity(num_items);
    for _ in 0..num_items {
        popularity.push(read_u32(&mut r)?);
    }
    let plan = GroupingPlan {
        item_groups,
        popularity,
        user_groups: Vec::new(),
    };
    let dim = n_blocks * d;
    let users = Matrix::from_vec(num_users, dim, read_f32_vec(&mut r, num_users * dim)?);
    let mut grid = BlockGrid::zeros(&plan, n_blocks, d);
    for g in 0..num_groups {
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
    Ok(PretrainOutput { grid, users, plan })
}
