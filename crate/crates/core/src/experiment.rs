//! Experiment runner: executes the pipeline stages with content-addressed
//! caching, emits per-budget and per-sweep CSV reports plus a run manifest,
//! and applies the ablation switches.

use crate::clustering;
use crate::config::PipelineConfig;
use crate::deploy::{build_package, mb_to_bytes};
use crate::device::simulate_budget_timeline;
use crate::error::{Error, Result};
use crate::finetune::{self, GroupModel};
use crate::ingest;
use crate::pretrain::{self, Readout};
use crate::rng;
use crate::synthetic;
use crate::types::{InteractionLog, Role};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_string(&h.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    files: BTreeMap<String, String>,
}

/// A content-addressed stage slot under `<out>/cache`.
struct StageSlot {
    dir: PathBuf,
}

impl StageSlot {
    fn new(cache_root: &Path, stage: &str, key_material: &str) -> Result<StageSlot> {
        let key = sha256_hex(key_material.as_bytes());
        let dir = cache_root.join(format!("{stage}-{}", &key[..16]));
        std::fs::create_dir_all(&dir)?;
        Ok(StageSlot { dir })
    }

    fn key(&self) -> String {
        self.dir.file_name().unwrap().to_string_lossy().to_string()
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// True when the stage record exists and every recorded file still
    /// hashes to its recorded value; anything else forces a recompute.
    fn is_valid(&self) -> bool {
        let record_path = self.path("stage.json");
        let Ok(text) = std::fs::read_to_string(&record_path) else {
            return false;
        };
        let Ok(record) = serde_json::from_str::<StageRecord>(&text) else {
            return false;
        };
        record.files.iter().all(|(name, hash)| {
            file_sha256(&self.path(name)).map(|h| &h == hash).unwrap_or(false)
        })
    }

    fn seal(&self, files: &[&str]) -> Result<BTreeMap<String, String>> {
        let mut map = BTreeMap::new();
        for name in files {
            map.insert(name.to_string(), file_sha256(&self.path(name))?);
        }
        let record = StageRecord {
            key: self.key(),
            files: map.clone(),
        };
        std::fs::write(self.path("stage.json"), serde_json::to_string_pretty(&record)?)?;
        Ok(map)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Error {
        Error::Config(format!("json: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub budget_mb: f64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub param_count_mean: f64,
    pub users_evaluated: usize,
}

#[derive(Debug, Clone)]
pub struct TimingRow {
    pub budget_mb: f64,
    pub shrink_micros_mean: f64,
    pub rank_micros_mean: f64,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub parameter: String,
    pub value: usize,
    pub budget_mb: f64,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: String,
    /// Input file -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Artifact path relative to the out dir -> content hash.
    pub artifacts: BTreeMap<String, String>,
    /// Stage name -> cache slot.
    pub stages: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub metrics: Vec<MetricsRow>,
    pub metrics_csv: PathBuf,
    pub timing_csv: PathBuf,
    pub manifest_path: PathBuf,
    pub sweep_rows: Vec<SweepRow>,
}

fn stage_enabled(cfg: &PipelineConfig, stage: &str) -> bool {
    cfg.stages.iter().any(|s| s == stage)
}

fn require_valid(slot: &StageSlot, stage: &'static str, enabled: bool) -> Result<()> {
    if !enabled && !slot.is_valid() {
        return Err(Error::Config(format!(
            "stage `{stage}` is not listed and has no cached output"
        ))
        .in_stage(stage));
    }
    Ok(())
}

/// Execute the pipeline described by `cfg`, reusing cached stages keyed by
/// config and input hashes. Returns the base run's metric rows plus the
/// sweep rows when sweep grids are configured.
pub fn run_experiment(cfg: &PipelineConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out_root = PathBuf::from(&cfg.out);
    let outcome = run_single(cfg, &out_root.join("run"))?;

    // One-at-a-time sweeps over the configured grids.
    let mut sweep_rows = Vec::new();
    let sweeps: [(&str, &[usize]); 3] = [
        ("user_groups", &cfg.sweep.user_groups),
        ("item_groups", &cfg.sweep.item_groups),
        ("n_blocks", &cfg.sweep.n_blocks),
    ];
    for (param, values) in sweeps {
        for &value in values {
            let mut point = cfg.clone();
            point.sweep = Default::default();
            match param {
                "user_groups" => point.model.user_groups = value,
                "item_groups" => point.model.item_groups = value,
                "n_blocks" => point.model.n_blocks = value,
                _ => unreachable!(),
            }
            let dir = out_root.join(format!("sweep-{param}-{value}"));
            let sub = run_single(&point, &dir)
                .map_err(|e| e.in_stage("evaluate"))?;
            for row in &sub.metrics {
                sweep_rows.push(SweepRow {
                    parameter: param.to_string(),
                    value,
                    budget_mb: row.budget_mb,
                    recall_at_k: row.recall_at_k,
                    ndcg_at_k: row.ndcg_at_k,
                });
            }
        }
    }
    if !sweep_rows.is_empty() {
        let path = out_root.join("run").join("sweep.csv");
        let mut csv = String::from("parameter,value,budgetMB,recallAtK,ndcgAtK\n");
        for r in &sweep_rows {
            let _ = writeln!(
                csv,
                "{},{},{},{:.6},{:.6}",
                r.parameter, r.value, r.budget_mb, r.recall_at_k, r.ndcg_at_k
            );
        }
        std::fs::write(&path, csv)?;
    }

    Ok(ExperimentOutcome {
        sweep_rows,
        ..outcome
    })
}

fn run_single(cfg: &PipelineConfig, run_dir: &Path) -> Result<ExperimentOutcome> {
    let cache_root = PathBuf::from(&cfg.out).join("cache");
    std::fs::create_dir_all(&cache_root)?;
    std::fs::create_dir_all(run_dir)?;
    let mut stages = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    let mut artifacts = BTreeMap::new();

    // -- data ---------------------------------------------------------
    let data_path: PathBuf;
    if cfg.data.synthetic {
        let key = format!(
            "data|synthetic|{}|{}|{}|{}|{}|{}",
            cfg.data.synthetic_users,
            cfg.data.synthetic_items,
            cfg.data.synthetic_clusters,
            cfg.data.synthetic_p_in,
            cfg.data.synthetic_p_out,
            cfg.seed
        );
        let slot = StageSlot::new(&cache_root, "data", &key)?;
        require_valid(&slot, "data", stage_enabled(cfg, "data"))?;
        if !slot.is_valid() {
            let text = synthetic::planted_clusters(
                cfg.data.synthetic_users,
                cfg.data.synthetic_items,
                cfg.data.synthetic_clusters,
                cfg.data.synthetic_p_in,
                cfg.data.synthetic_p_out,
                cfg.seed,
            );
            std::fs::write(slot.path("input.tsv"), text).map_err(|e| Error::from(e).in_stage("data"))?;
            slot.seal(&["input.tsv"])?;
        }
        data_path = slot.path("input.tsv");
        stages.insert("data".to_string(), slot.key());
    } else {
        if cfg.data.input.is_empty() {
            return Err(Error::Config("no input file configured".into()).in_stage("data"));
        }
        data_path = PathBuf::from(&cfg.data.input);
    }
    let data_hash = file_sha256(&data_path).map_err(|e| e.in_stage("data"))?;
    inputs.insert(data_path.display().to_string(), data_hash.clone());

    // -- ingest -------------------------------------------------------
    let ingest_key = format!(
        "ingest|{}|{}|{:?}|{:?}|{}",
        data_hash, cfg.data.min_interactions, cfg.data.ratios, cfg.data.split, cfg.seed
    );
    let ingest_slot = StageSlot::new(&cache_root, "ingest", &ingest_key)?;
    require_valid(&ingest_slot, "ingest", stage_enabled(cfg, "ingest"))?;
    if !ingest_slot.is_valid() {
        let log = ingest::load_and_filter(&data_path, cfg.data.min_interactions)
            .and_then(|log| ingest::split_roles(log, cfg.data.ratios, cfg.data.split, cfg.seed))
            .map_err(|e| e.in_stage("ingest"))?;
        ingest::write_snapshot(&log, &ingest_slot.path("snapshot.bin"))
            .map_err(|e| e.in_stage("ingest"))?;
        std::fs::write(ingest_slot.path("stats.txt"), ingest::stats_summary(&log))?;
        ingest_slot.seal(&["snapshot.bin", "stats.txt"])?;
    }
    let snapshot_path = ingest_slot.path("snapshot.bin");
    let snapshot_hash = file_sha256(&snapshot_path)?;
    artifacts.insert("snapshot.bin".to_string(), snapshot_hash.clone());
    stages.insert("ingest".to_string(), ingest_slot.key());

    // -- pretrain -----------------------------------------------------
    let readout = if cfg.ablation.final_layer_only {
        Readout::FinalLayer
    } else {
        Readout::MeanAllLayers
    };
    let pretrain_key = format!(
        "pretrain|{}|d{}|n{}|g{}|l{}|lam{}|wd{}|lr{}|std{}|e{}|b{}|ev{}|p{}|k{}|ro{:?}|seg{}|{}",
        snapshot_hash,
        cfg.model.block_dim,
        cfg.model.n_blocks,
        cfg.model.item_groups,
        cfg.model.l1_layers,
        cfg.effective_lambda(),
        cfg.pretrain.weight_decay,
        cfg.pretrain.learning_rate,
        cfg.pretrain.init_std,
        cfg.pretrain.epochs,
        cfg.pretrain.batch_size,
        cfg.pretrain.eval_every,
        cfg.pretrain.patience,
        cfg.pretrain.eval_k,
        readout,
        cfg.ablation.popularity_segmentation,
        cfg.seed
    );
    let pretrain_slot = StageSlot::new(&cache_root, "pretrain", &pretrain_key)?;
    require_valid(&pretrain_slot, "pretrain", stage_enabled(cfg, "pretrain"))?;
    if !pretrain_slot.is_valid() {
        let log = ingest::read_snapshot(&snapshot_path)?;
        let plan = if cfg.ablation.popularity_segmentation {
            ingest::segment_items_by_popularity(&log, cfg.model.item_groups)
        } else {
            ingest::segment_items_randomly(&log, cfg.model.item_groups, cfg.seed)
        }
        .map_err(|e| e.in_stage("pretrain"))?;
        let out = pretrain::run_pretrain(&log, &plan, cfg, readout)
            .map_err(|e| e.in_stage("pretrain"))?;
        pretrain::write_checkpoint(&out, &pretrain_slot.path("checkpoint.bin"))
            .map_err(|e| e.in_stage("pretrain"))?;
        pretrain_slot.seal(&["checkpoint.bin"])?;
    }
    let checkpoint_path = pretrain_slot.path("checkpoint.bin");
    let checkpoint_hash = file_sha256(&checkpoint_path)?;
    artifacts.insert("checkpoint.bin".to_string(), checkpoint_hash.clone());
    stages.insert("pretrain".to_string(), pretrain_slot.key());

    // -- cluster ------------------------------------------------------
    let k = cfg.effective_user_groups();
    let cluster_key = format!(
        "cluster|{}|k{}|r{}|i{}|t{}|{}",
        checkpoint_hash, k, cfg.cluster.restarts, cfg.cluster.max_iters, cfg.cluster.tol, cfg.seed
    );
    let cluster_slot = StageSlot::new(&cache_root, "cluster", &cluster_key)?;
    require_valid(&cluster_slot, "cluster", stage_enabled(cfg, "cluster"))?;
    if !cluster_slot.is_valid() {
        let pre = pretrain::read_checkpoint(&checkpoint_path)?;
        let state = clustering::kmeans_users(
            &pre.users,
            k,
            cfg.seed,
            cfg.cluster.max_iters,
            cfg.cluster.tol,
            cfg.cluster.restarts,
        )
        .map_err(|e| e.in_stage("cluster"))?;
        clustering::write_assignments(&state, &cluster_slot.path("assignments.tsv"))?;
        clustering::write_centroids(&state, &cluster_slot.path("centroids.bin"))?;
        cluster_slot.seal(&["assignments.tsv", "centroids.bin"])?;
    }
    let assignments_path = cluster_slot.path("assignments.tsv");
    let assignments_hash = file_sha256(&assignments_path)?;
    artifacts.insert("assignments.tsv".to_string(), assignments_hash.clone());
    stages.insert("cluster".to_string(), cluster_slot.key());

    // -- finetune -----------------------------------------------------
    let finetune_key = format!(
        "finetune|{}|{}|lw{}|lv{}|xi{}|so{}|e{}|b{}|p{}|iw{}|lam{}|sh{:?}|ch{:?}|{}",
        checkpoint_hash,
        assignments_hash,
        cfg.finetune.learning_rate_w,
        cfg.finetune.learning_rate_v,
        cfg.xi(),
        cfg.finetune.second_order,
        cfg.finetune.epochs,
        cfg.finetune.batch_size,
        cfg.finetune.patience,
        cfg.ablation.importance_weights,
        cfg.effective_lambda(),
        cfg.model.scorer_hidden,
        cfg.model.controller_hidden,
        cfg.seed
    );
    let finetune_slot = StageSlot::new(&cache_root, "finetune", &finetune_key)?;
    require_valid(&finetune_slot, "finetune", stage_enabled(cfg, "finetune"))?;
    let group_files: Vec<String> = (0..k).map(|g| format!("group-{g}.bin")).collect();
    if !finetune_slot.is_valid() {
        let log = ingest::read_snapshot(&snapshot_path)?;
        let pre = pretrain::read_checkpoint(&checkpoint_path)?;
        let assignment = clustering::read_assignments(&assignments_path)?;
        let mut groups = vec![Vec::new(); k];
        for (u, &g) in assignment.iter().enumerate() {
            groups[g as usize].push(u as u32);
        }
        let models = finetune::finetune_all_groups(&log, &pre, &groups, cfg)
            .map_err(|e| e.in_stage("finetune"))?;
        for model in &models {
            finetune::write_group_model(
                model,
                &finetune_slot.path(&format!("group-{}.bin", model.group_index)),
            )
            .map_err(|e| e.in_stage("finetune"))?;
        }
        let names: Vec<&str> = group_files.iter().map(|s| s.as_str()).collect();
        finetune_slot.seal(&names)?;
    }
    for name in &group_files {
        artifacts.insert(name.clone(), file_sha256(&finetune_slot.path(name))?);
    }
    stages.insert("finetune".to_string(), finetune_slot.key());

    // -- evaluate -----------------------------------------------------
    let budgets = &cfg.deploy.budgets_mb;
    let eval_key = format!(
        "evaluate|{}|{:?}|k{}|iw{}|{}",
        stages["finetune"], budgets, cfg.deploy.eval_k, cfg.ablation.importance_weights, cfg.seed
    );
    let eval_slot = StageSlot::new(&cache_root, "evaluate", &eval_key)?;
    require_valid(&eval_slot, "evaluate", stage_enabled(cfg, "evaluate"))?;
    if !eval_slot.is_valid() {
        let log = ingest::read_snapshot(&snapshot_path)?;
        let mut models = Vec::with_capacity(k);
        for name in &group_files {
            models.push(finetune::read_group_model(&finetune_slot.path(name))?);
        }
        // Random-selection ablation: replace the learned weights with a
        // seeded random draw per group; floor and budget logic stay intact.
        if !cfg.ablation.importance_weights {
            for model in &mut models {
                let mut r =
                    rng::chacha(rng::derive(cfg.seed, "random-alpha", model.group_index as u64));
                let raw: Vec<f32> = (0..model.alpha.len())
                    .map(|_| rand::Rng::gen_range(&mut r, 0.01..1.0f32))
                    .collect();
                let sum: f32 = raw.iter().sum();
                model.alpha = raw.into_iter().map(|v| v / sum).collect();
            }
        }
        let (metrics, timing) = evaluate_models(&log, &models, budgets, cfg.deploy.eval_k)
            .map_err(|e| e.in_stage("evaluate"))?;
        std::fs::write(eval_slot.path("metrics.csv"), metrics_csv(&metrics))?;
        std::fs::write(eval_slot.path("timing.csv"), timing_csv(&timing))?;
        eval_slot.seal(&["metrics.csv", "timing.csv"])?;
    }
    stages.insert("evaluate".to_string(), eval_slot.key());

    // Copy the reports into the run dir and assemble the manifest.
    let metrics_csv_path = run_dir.join("metrics.csv");
    let timing_csv_path = run_dir.join("timing.csv");
    std::fs::copy(eval_slot.path("metrics.csv"), &metrics_csv_path)?;
    std::fs::copy(eval_slot.path("timing.csv"), &timing_csv_path)?;
    artifacts.insert("metrics.csv".to_string(), file_sha256(&metrics_csv_path)?);
    artifacts.insert("timing.csv".to_string(), file_sha256(&timing_csv_path)?);

    let manifest = Manifest {
        seed: cfg.seed,
        config: cfg.to_canonical_string(),
        inputs,
        artifacts,
        stages: stages.clone(),
    };
    let manifest_path = run_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let metrics = parse_metrics_csv(&std::fs::read_to_string(&metrics_csv_path)?)?;
    Ok(ExperimentOutcome {
        run_dir: run_dir.to_path_buf(),
        metrics,
        metrics_csv: metrics_csv_path,
        timing_csv: timing_csv_path,
        manifest_path,
        sweep_rows: Vec::new(),
    })
}

/// Resolve each artifact in a run dir against the cache using the manifest's
/// stage map. Artifacts live in their stage slots; reports live in the run
/// dir itself.
pub fn manifest_artifact_path(out_root: &Path, manifest: &Manifest, name: &str) -> PathBuf {
    let run_local = out_root.join("run").join(name);
    if run_local.exists() {
        return run_local;
    }
    let stage = match name {
        "snapshot.bin" | "stats.txt" => "ingest",
        "checkpoint.bin" => "pretrain",
        "assignments.tsv" | "centroids.bin" => "cluster",
        n if n.starts_with("group-") => "finetune",
        _ => "evaluate",
    };
    out_root
        .join("cache")
        .join(&manifest.stages[stage])
        .join(name)
}

/// Build one package per test-capable user at the largest budget, walk the
/// shrink timeline, and average the metrics per budget.
pub fn evaluate_models(
    log: &InteractionLog,
    models: &[GroupModel],
    budgets_mb: &[f64],
    k: usize,
) -> Result<(Vec<MetricsRow>, Vec<TimingRow>)> {
    let mut has_test = vec![false; log.num_users];
    for &(u, _, role) in &log.triples {
        if role == Role::Test {
            has_test[u as usize] = true;
        }
    }
    let mut metric_acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); budgets_mb.len()];
    let mut timing_acc = vec![(0.0f64, 0.0f64); budgets_mb.len()];
    let max_budget = mb_to_bytes(budgets_mb[0]);
    for model in models {
        for &user in &model.user_ids {
            if !has_test[user as usize] {
                continue;
            }
            let mut pkg = build_package(model, user, max_budget)?;
            let report = simulate_budget_timeline(&mut pkg, budgets_mb, log, k)?;
            for (i, row) in report.rows.iter().enumerate() {
                if row.recall_at_k.is_nan() {
                    continue;
                }
                metric_acc[i].0 += row.recall_at_k;
                metric_acc[i].1 += row.ndcg_at_k;
                metric_acc[i].2 += row.param_count as f64;
                metric_acc[i].3 += 1;
                timing_acc[i].0 += row.shrink_micros as f64;
                timing_acc[i].1 += row.rank_micros as f64;
            }
        }
    }
    let mut metrics = Vec::new();
    let mut timing = Vec::new();
    for (i, &mb) in budgets_mb.iter().enumerate() {
        let (recall, ndcg, params, n) = metric_acc[i];
        let denom = metric_acc[i].3.max(1) as f64;
        metrics.push(MetricsRow {
            budget_mb: mb,
            recall_at_k: recall / denom,
            ndcg_at_k: ndcg / denom,
            param_count_mean: params / denom,
            users_evaluated: n,
        });
        timing.push(TimingRow {
            budget_mb: mb,
            shrink_micros_mean: timing_acc[i].0 / denom,
            rank_micros_mean: timing_acc[i].1 / denom,
        });
    }
    Ok((metrics, timing))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("budgetMB,recallAtK,ndcgAtK,paramCount,usersEvaluated\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.2},{}",
            r.budget_mb, r.recall_at_k, r.ndcg_at_k, r.param_count_mean, r.users_evaluated
        );
    }
    s
}

fn timing_csv(rows: &[TimingRow]) -> String {
    let mut s = String::from("budgetMB,shrinkMicros,rankMicros\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.2},{:.2}",
            r.budget_mb, r.shrink_micros_mean, r.rank_micros_mean
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::SchemaMismatch(format!(
                "metrics row has {} fields",
                parts.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::SchemaMismatch(format!("bad number `{s}`: {e}")))
        };
        rows.push(MetricsRow {
            budget_mb: parse_f(parts[0])?,
            recall_at_k: parse_f(parts[1])?,
            ndcg_at_k: parse_f(parts[2])?,
            param_count_mean: parse_f(parts[3])?,
            users_evaluated: parts[4]
                .parse()
                .map_err(|e| Error::SchemaMismatch(format!("bad count: {e}")))?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct DeltaRow {
    pub key: String,
    pub column: String,
    pub a: f64,
    pub b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareSummary {
    pub deltas: Vec<DeltaRow>,
    pub improved: usize,
    pub regressed: usize,
    pub tied: usize,
}

impl CompareSummary {
    pub fn render(&self) -> String {
        let mut s = String::from("key,column,a,b,delta,sign\n");
        for d in &self.deltas {
            let sign = if d.delta > 0.0 {
                "improved"
            } else if d.delta < 0.0 {
                "regressed"
            } else {
                "tied"
            };
            let _ = writeln!(s, "{},{},{},{},{},{}", d.key, d.column, d.a, d.b, d.delta, sign);
        }
        let _ = writeln!(
            s,
            "summary,,,,{}", 
            format!("improved={} regressed={} tied={}", self.improved, self.regressed, self.tied)
        );
        s
    }
}

/// Column-wise deltas between two CSV reports sharing an identical schema
/// and row keys (first column).
pub fn compare_runs(a_csv: &str, b_csv: &str) -> Result<CompareSummary> {
    let mut a_lines = a_csv.lines();
    let mut b_lines = b_csv.lines();
    let header_a = a_lines.next().unwrap_or_default();
    let header_b = b_lines.next().unwrap_or_default();
    if header_a != header_b {
        return Err(Error::SchemaMismatch(format!(
            "headers differ: `{header_a}` vs `{header_b}`"
        )));
    }
    let columns: Vec<&str> = header_a.split(',').collect();
    if columns.len() < 2 {
        return Err(Error::SchemaMismatch("report needs a key and a metric".into()));
    }
    let parse_rows = |lines: std::str::Lines| -> Result<Vec<Vec<String>>> {
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
            if parts.len() != columns.len() {
                return Err(Error::SchemaMismatch(format!(
                    "row `{line}` has {} fields, expected {}",
                    parts.len(),
                    columns.len()
                )));
            }
            rows.push(parts);
        }
        Ok(rows)
    };
    let rows_a = parse_rows(a_lines)?;
    let rows_b = parse_rows(b_lines)?;
    if rows_a.len() != rows_b.len() {
        return Err(Error::SchemaMismatch(format!(
            "row counts differ: {} vs {}",
            rows_a.len(),
            rows_b.len()
        )));
    }
    let mut summary = CompareSummary::default();
    for (ra, rb) in rows_a.iter().zip(rows_b.iter()) {
        if ra[0] != rb[0] {
            return Err(Error::SchemaMismatch(format!(
                "row keys differ: `{}` vs `{}`",
                ra[0], rb[0]
            )));
        }
        for (c, col) in columns.iter().enumerate().skip(1) {
            let (Ok(a), Ok(b)) = (ra[c].parse::<f64>(), rb[c].parse::<f64>()) else {
                continue;
            };
            let delta = b - a;
            if delta > 0.0 {
                summary.improved += 1;
            } else if delta < 0.0 {
                summary.regressed += 1;
            } else {
                summary.tied += 1;
            }
            summary.deltas.push(DeltaRow {
                key: ra[0].clone(),
                column: col.to_string(),
                a,
                b,
                delta,
            });
        }
    }
    Ok(summary)
}

/// Reload a manifest and confirm every artifact still exists with its
/// recorded content hash.
pub fn verify_manifest(out_root: &Path) -> Result<()> {
    let manifest_path = out_root.join("run").join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    for (name, hash) in &manifest.artifacts {
        let path = manifest_artifact_path(out_root, &manifest, name);
        let got = file_sha256(&path).map_err(|_| Error::Corrupt {
            path: path.display().to_string(),
            msg: "artifact missing".into(),
        })?;
        if &got != hash {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                msg: "artifact hash mismatch".into(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry;

    fn tiny_cfg(out: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 7;
        cfg.out = out.display().to_string();
        cfg.data.synthetic = true;
        cfg.data.synthetic_users = 60;
        cfg.data.synthetic_items = 60;
        cfg.data.synthetic_clusters = 3;
        cfg.data.min_interactions = 3;
        cfg.model.block_dim = 2;
        cfg.model.n_blocks = 4;
        cfg.model.item_groups = 3;
        cfg.model.user_groups = 2;
        cfg.model.scorer_hidden = vec![8];
        cfg.model.controller_hidden = vec![4];
        cfg.pretrain.epochs = 2;
        cfg.pretrain.eval_every = 2;
        cfg.pretrain.learning_rate = 0.05;
        cfg.cluster.restarts = 3;
        cfg.finetune.epochs = 1;
        cfg.finetune.batch_size = 64;
        cfg.deploy.eval_k = 10;
        // Full table: 60 items x 8 dims x 4 bytes = 1920 B + user 32 B.
        cfg.deploy.budgets_mb = vec![0.002, 0.0012, 0.0008];
        cfg
    }

    #[test]
    fn rerun_hits_cache_with_zero_training() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let first = run_experiment(&cfg).unwrap();
        assert_eq!(first.metrics.len(), 3);
        let batches = telemetry::training_batches();
        let steps = telemetry::optimizer_steps();
        let second = run_experiment(&cfg).unwrap();
        assert_eq!(telemetry::training_batches(), batches, "cache miss retrained");
        assert_eq!(telemetry::optimizer_steps(), steps);
        assert_eq!(first.metrics, second.metrics);
    }

    #[test]
    fn manifest_is_complete_and_verifiable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        run_experiment(&cfg).unwrap();
        verify_manifest(dir.path()).unwrap();
        // Corrupt one artifact: verification must fail.
        let manifest: Manifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("run").join("manifest.json")).unwrap(),
        )
        .unwrap();
        let target = manifest_artifact_path(dir.path(), &manifest, "checkpoint.bin");
        let mut bytes = std::fs::read(&target).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&target, bytes).unwrap();
        assert!(verify_manifest(dir.path()).is_err());
    }

    #[test]
    fn budget_sweep_emits_one_row_per_point() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.sweep.n_blocks = vec![2, 4];
        let outcome = run_experiment(&cfg).unwrap();
        // 2 sweep points x 3 budgets.
        assert_eq!(outcome.sweep_rows.len(), 6);
        assert!(dir.path().join("run").join("sweep.csv").exists());
    }

    #[test]
    fn ablation_changes_only_selection_dependent_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        let base = run_experiment(&cfg).unwrap();
        cfg.ablation.importance_weights = false;
        cfg.out = dir.path().join("ablated").display().to_string();
        let ablated = run_experiment(&cfg).unwrap();
        assert_eq!(base.metrics.len(), ablated.metrics.len());
        for (a, b) in base.metrics.iter().zip(ablated.metrics.iter()) {
            assert_eq!(a.budget_mb, b.budget_mb);
            assert_eq!(a.users_evaluated, b.users_evaluated);
        }
    }

    #[test]
    fn unlisted_stage_without_cache_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.stages = vec!["evaluate".to_string()];
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.to_string().contains("no cached output"), "{err}");
    }

    #[test]
    fn compare_identical_reports_is_all_ties() {
        let csv = "budgetMB,recallAtK\n10,0.5\n5,0.4\n";
        let summary = compare_runs(csv, csv).unwrap();
        assert_eq!(summary.improved, 0);
        assert_eq!(summary.regressed, 0);
        assert_eq!(summary.tied, 2);
        assert!(summary.deltas.iter().all(|d| d.delta == 0.0));
    }

    #[test]
    fn compare_detects_improvement() {
        let a = "budgetMB,recallAtK\n10,0.50\n";
        let b = "budgetMB,recallAtK\n10,0.51\n";
        let summary = compare_runs(a, b).unwrap();
        assert_eq!(summary.improved, 1);
        assert!((summary.deltas[0].delta - 0.01).abs() < 1e-12);
        assert!(summary.render().contains("improved"));
    }

    #[test]
    fn compare_rejects_schema_mismatch() {
        let a = "budgetMB,recallAtK,ndcgAtK\n10,0.5,0.3\n";
        let b = "budgetMB,recallAtK\n10,0.5\n";
        assert!(matches!(
            compare_runs(a, b).unwrap_err(),
            Error::SchemaMismatch(_)
        ));
    }

    #[test]
    fn metrics_csv_round_trips() {
        let rows = vec![MetricsRow {
            budget_mb: 0.5,
            recall_at_k: 0.25,
            ndcg_at_k: 0.125,
            param_count_mean: 96.0,
            users_evaluated: 17,
        }];
        let parsed = parse_metrics_csv(&metrics_csv(&rows)).unwrap();
        assert_eq!(parsed[0].users_evaluated, 17);
        assert!((parsed[0].recall_at_k - 0.25).abs() < 1e-9);
    }
}
