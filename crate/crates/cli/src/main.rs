//! `peel`: pipeline driver for elastic embedding packages.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use peel_core::clustering;
use peel_core::config::PipelineConfig;
use peel_core::deploy::{self, mb_to_bytes};
use peel_core::device;
use peel_core::experiment;
use peel_core::finetune;
use peel_core::ingest;
use peel_core::pretrain::{self, Readout};
use peel_core::types::GroupingPlan;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "peel", version, about = "Elastic embedding packages for on-device ranking")]
struct Cli {
    /// Run seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 = fully sequential); overrides the config file.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pipeline config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter, and split an interaction log into a binary snapshot.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        min_interactions: u32,
        #[arg(long, default_value = "0.7,0.1,0.2")]
        ratios: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the global embedding tables.
    Pretrain {
        /// Directory holding snapshot.bin.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster users over their pretrained embeddings.
    Cluster {
        /// Directory holding checkpoint.bin and snapshot.bin.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune per-group models with learned importance weights.
    Finetune {
        /// Directory holding checkpoint.bin and snapshot.bin.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding assignments.tsv.
        #[arg(long)]
        clusters: PathBuf,
        /// `all` or a comma-separated list of group indices.
        #[arg(long, default_value = "all")]
        groups: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a package for one user under a byte budget.
    Deploy {
        /// Directory produced by `finetune`.
        #[arg(long)]
        group_model: PathBuf,
        /// Original user id as it appeared in the input log.
        #[arg(long)]
        user: String,
        #[arg(long)]
        budget_mb: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shrink a package file in place to a smaller budget.
    Shrink {
        #[arg(long)]
        package: PathBuf,
        #[arg(long)]
        budget_mb: f64,
    },
    /// Rank all items for a package's user.
    Rank {
        #[arg(long)]
        package: PathBuf,
        /// Directory holding snapshot.bin and checkpoint.bin.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
    },
    /// Walk a decreasing budget timeline, evaluating after each shrink.
    Simulate {
        #[arg(long)]
        package: PathBuf,
        /// Directory holding snapshot.bin and checkpoint.bin.
        #[arg(long)]
        data: PathBuf,
        /// Strictly decreasing budgets in MB, comma separated.
        #[arg(long)]
        budgets: String,
        #[arg(long, default_value_t = 50)]
        k: usize,
        /// Output CSV path.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the full cached pipeline described by the config file.
    Experiment {
        /// Output directory; overrides the config file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Column-wise deltas between two CSV reports.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn main() {
    env_logger::init();
    if let Err(e) = run() {
        eprintln!("{{\"error\":\"{}\"}}", json_escape(&format!("{e:#}")));
        std::process::exit(1);
    }
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn copy_into(src_dir: &Path, out_dir: &Path, name: &str) -> Result<()> {
    let src = src_dir.join(name);
    let dst = out_dir.join(name);
    std::fs::copy(&src, &dst)
        .with_context(|| format!("copying {} to {}", src.display(), dst.display()))?;
    Ok(())
}

/// Equal-segmentation group sizes, used to parse a package without its
/// grouping plan (shrink does not need real item ids).
fn structural_plan(num_items: usize, n_groups: usize) -> GroupingPlan {
    let base = num_items / n_groups;
    let extra = num_items % n_groups;
    let mut item_groups = Vec::with_capacity(n_groups);
    let mut next = 0u32;
    for g in 0..n_groups {
        let size = base + usize::from(g < extra);
        item_groups.push((next..next + size as u32).collect());
        next += size as u32;
    }
    GroupingPlan {
        item_groups,
        popularity: vec![0; num_items],
        user_groups: Vec::new(),
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    peel_core::init_thread_pool(cfg.threads);

    match &cli.command {
        Command::Ingest { input, min_interactions, ratios, out } => {
            let parts: Vec<f64> = ratios
                .split(',')
                .map(|p| p.trim().parse().context("parsing --ratios"))
                .collect::<Result<_>>()?;
            if parts.len() != 3 {
                bail!("--ratios needs three comma-separated values");
            }
            let log = ingest::load_and_filter(input, *min_interactions)?;
            let log = ingest::split_roles(log, [parts[0], parts[1], parts[2]], cfg.data.split, cfg.seed)?;
            std::fs::create_dir_all(out)?;
            ingest::write_snapshot(&log, &out.join("snapshot.bin"))?;
            let stats = ingest::stats_summary(&log);
            std::fs::write(out.join("stats.txt"), &stats)?;
            print!("{stats}");
        }
        Command::Pretrain { data, out } => {
            let log = ingest::read_snapshot(&data.join("snapshot.bin"))?;
            let plan = if cfg.ablation.popularity_segmentation {
                ingest::segment_items_by_popularity(&log, cfg.model.item_groups)?
            } else {
                ingest::segment_items_randomly(&log, cfg.model.item_groups, cfg.seed)?
            };
            let readout = if cfg.ablation.final_layer_only {
                Readout::FinalLayer
            } else {
                Readout::MeanAllLayers
            };
            let result = pretrain::run_pretrain(&log, &plan, &cfg, readout)?;
            std::fs::create_dir_all(out)?;
            pretrain::write_checkpoint(&result, &out.join("checkpoint.bin"))?;
            copy_into(data, out, "snapshot.bin")?;
            println!(
                "pretrained {} users x {} items, D = {}",
                log.num_users,
                log.num_items,
                cfg.full_dim()
            );
        }
        Command::Cluster { checkpoint, groups, out } => {
            let pre = pretrain::read_checkpoint(&checkpoint.join("checkpoint.bin"))?;
            let k = groups.unwrap_or_else(|| cfg.effective_user_groups());
            let state = clustering::kmeans_users(
                &pre.users,
                k,
                cfg.seed,
                cfg.cluster.max_iters,
                cfg.cluster.tol,
                cfg.cluster.restarts,
            )?;
            std::fs::create_dir_all(out)?;
            clustering::write_assignments(&state, &out.join("assignments.tsv"))?;
            clustering::write_centroids(&state, &out.join("centroids.bin"))?;
            copy_into(checkpoint, out, "checkpoint.bin")?;
            copy_into(checkpoint, out, "snapshot.bin")?;
            println!(
                "clustered into {k} groups, within-cluster variance {:.4}",
                state.within_variance
            );
        }
        Command::Finetune { checkpoint, clusters, groups, out } => {
            let log = ingest::read_snapshot(&checkpoint.join("snapshot.bin"))?;
            let pre = pretrain::read_checkpoint(&checkpoint.join("checkpoint.bin"))?;
            let assignment = clustering::read_assignments(&clusters.join("assignments.tsv"))?;
            let k = assignment.iter().copied().max().map_or(1, |m| m as usize + 1);
            let mut user_groups = vec![Vec::new(); k];
            for (u, &g) in assignment.iter().enumerate() {
                user_groups[g as usize].push(u as u32);
            }
            let wanted: Vec<usize> = if groups == "all" {
                (0..k).collect()
            } else {
                groups
                    .split(',')
                    .map(|p| p.trim().parse().context("parsing --groups"))
                    .collect::<Result<_>>()?
            };
            std::fs::create_dir_all(out)?;
            let controller_enabled = cfg.ablation.importance_weights;
            for g in wanted {
                if g >= k {
                    bail!("group {g} out of range (have {k})");
                }
                let mut ids = user_groups[g].clone();
                ids.sort_unstable();
                let model = finetune::optimize_group(&log, &pre, ids, g, &cfg, controller_enabled)?;
                finetune::write_group_model(&model, &out.join(format!("group-{g}.bin")))?;
                println!("group {g}: {} users, alpha frozen", model.user_ids.len());
            }
            copy_into(checkpoint, out, "checkpoint.bin")?;
            copy_into(checkpoint, out, "snapshot.bin")?;
            copy_into(clusters, out, "assignments.tsv")?;
        }
        Command::Deploy { group_model, user, budget_mb, out } => {
            let log = ingest::read_snapshot(&group_model.join("snapshot.bin"))?;
            let dense = log
                .user_orig
                .iter()
                .position(|u| u == user)
                .ok_or_else(|| anyhow!("user `{user}` not found in the snapshot"))?
                as u32;
            let assignment = clustering::read_assignments(&group_model.join("assignments.tsv"))?;
            let g = assignment[dense as usize] as usize;
            let model = finetune::read_group_model(&group_model.join(format!("group-{g}.bin")))?;
            let pkg = deploy::build_package(&model, dense, mb_to_bytes(*budget_mb))?;
            deploy::write_package(&pkg, out)?;
            println!(
                "user {user} (group {g}): {} parameters, {} bytes",
                pkg.param_count(),
                pkg.byte_size()
            );
        }
        Command::Shrink { package, budget_mb } => {
            // Group sizes follow from the header; real item ids are not
            // needed to drop blocks.
            let header = deploy::read_package_header(package)?;
            let plan = structural_plan(header.num_items, header.n_groups);
            let mut pkg = deploy::read_package(package, &plan)?;
            deploy::shrink_package(&mut pkg, mb_to_bytes(*budget_mb))?;
            deploy::write_package(&pkg, package)?;
            println!(
                "shrunk to {} parameters, {} bytes",
                pkg.param_count(),
                pkg.byte_size()
            );
        }
        Command::Rank { package, data, k } => {
            let log = ingest::read_snapshot(&data.join("snapshot.bin"))?;
            let pre = pretrain::read_checkpoint(&data.join("checkpoint.bin"))?;
            let pkg = deploy::read_package(package, &pre.plan)?;
            let ranking = device::rank_items(&pkg);
            println!("rank,item,score");
            for (pos, &item) in ranking.ordered_items.iter().take(*k).enumerate() {
                println!(
                    "{},{},{:.6}",
                    pos + 1,
                    log.item_orig[item as usize],
                    ranking.scores[item as usize]
                );
            }
            eprintln!("ranked {} items in {} us", log.num_items, ranking.latency_micros);
        }
        Command::Simulate { package, data, budgets, k, report } => {
            let log = ingest::read_snapshot(&data.join("snapshot.bin"))?;
            let pre = pretrain::read_checkpoint(&data.join("checkpoint.bin"))?;
            let mut pkg = deploy::read_package(package, &pre.plan)?;
            let budget_list: Vec<f64> = budgets
                .split(',')
                .map(|p| p.trim().parse().context("parsing --budgets"))
                .collect::<Result<_>>()?;
            let result = device::simulate_budget_timeline(&mut pkg, &budget_list, &log, *k)?;
            let mut csv =
                String::from("budgetMB,recallAtK,ndcgAtK,shrinkMicros,rankMicros,paramCount\n");
            for row in &result.rows {
                csv.push_str(&format!(
                    "{},{:.6},{:.6},{},{},{}\n",
                    row.budget_mb,
                    row.recall_at_k,
                    row.ndcg_at_k,
                    row.shrink_micros,
                    row.rank_micros,
                    row.param_count
                ));
            }
            std::fs::write(report, &csv)?;
            print!("{csv}");
        }
        Command::Experiment { out } => {
            let mut cfg = cfg.clone();
            if let Some(out) = out {
                cfg.out = out.display().to_string();
            }
            let outcome = experiment::run_experiment(&cfg)?;
            println!("run dir: {}", outcome.run_dir.display());
            print!("{}", experiment::metrics_csv(&outcome.metrics));
        }
        Command::Compare { a, b } => {
            let a_text = std::fs::read_to_string(a)?;
            let b_text = std::fs::read_to_string(b)?;
            let summary = experiment::compare_runs(&a_text, &b_text)?;
            print!("{}", summary.render());
        }
    }
    Ok(())
}
