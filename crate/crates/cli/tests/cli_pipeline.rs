//! End-to-end drive of every subcommand against a small planted dataset.

use std::path::Path;
use std::process::Command;

fn peel(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_peel"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &std::process::Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(path: &Path) {
    std::fs::write(
        path,
        "[pipeline]\n\
         seed = 11\n\
         [model]\n\
         d = 2\n\
         n_blocks = 4\n\
         item_groups = 3\n\
         user_groups = 2\n\
         scorer_hidden = 8\n\
         controller_hidden = 4\n\
         [pretrain]\n\
         epochs = 2\n\
         eval_every = 2\n\
         learning_rate = 0.05\n\
         [cluster]\n\
         restarts = 2\n\
         [finetune]\n\
         epochs = 1\n\
         batch_size = 64\n\
         [deploy]\n\
         budgets_mb = 0.002,0.0012,0.0008\n\
         eval_k = 10\n",
    )
    .unwrap();
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Input: planted two-cluster interactions.
    let mut lines = String::new();
    for u in 0..40u32 {
        for i in 0..40u32 {
            // Deterministic quasi-random pattern with cluster structure.
            let same = u % 2 == i % 2;
            let hash = (u.wrapping_mul(2654435761) ^ i.wrapping_mul(40503)) % 100;
            if (same && hash < 55) || (!same && hash < 6) {
                lines.push_str(&format!("{u}\t{i}\n"));
            }
        }
    }
    std::fs::write(root.join("input.tsv"), lines).unwrap();
    write_config(&root.join("peel.conf"));

    let cfg = ["--config", "peel.conf"];
    let out = peel(
        &[&cfg[..], &["ingest", "--input", "input.tsv", "--min-interactions", "4", "--out", "data"]].concat(),
        root,
    );
    assert_ok(&out, "ingest");
    assert!(root.join("data/snapshot.bin").exists());
    assert!(root.join("data/stats.txt").exists());

    let out = peel(&[&cfg[..], &["pretrain", "--data", "data", "--out", "pre"]].concat(), root);
    assert_ok(&out, "pretrain");
    let out = peel(
        &[&cfg[..], &["cluster", "--checkpoint", "pre", "--groups", "2", "--out", "clusters"]].concat(),
        root,
    );
    assert_ok(&out, "cluster");
    let out = peel(
        &[&cfg[..], &[
            "finetune", "--checkpoint", "pre", "--clusters", "clusters", "--groups", "all",
            "--out", "groups",
        ]].concat(),
        root,
    );
    assert_ok(&out, "finetune");
    assert!(root.join("groups/group-0.bin").exists());
    assert!(root.join("groups/group-1.bin").exists());

    let out = peel(
        &[&cfg[..], &[
            "deploy", "--group-model", "groups", "--user", "3", "--budget-mb", "0.002",
            "--out", "user3.pee",
        ]].concat(),
        root,
    );
    assert_ok(&out, "deploy");

    let out = peel(
        &[&cfg[..], &["rank", "--package", "user3.pee", "--data", "groups", "--k", "5"]].concat(),
        root,
    );
    assert_ok(&out, "rank");
    let ranked = String::from_utf8_lossy(&out.stdout);
    assert!(ranked.lines().count() >= 6, "expected header + 5 rows: {ranked}");

    let out = peel(
        &[&cfg[..], &[
            "simulate", "--package", "user3.pee", "--data", "groups",
            "--budgets", "0.002,0.0012,0.0008", "--k", "10", "--report", "report.csv",
        ]].concat(),
        root,
    );
    assert_ok(&out, "simulate");
    let report = std::fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(report.starts_with("budgetMB,recallAtK,ndcgAtK,shrinkMicros,rankMicros,paramCount"));
    assert_eq!(report.lines().count(), 4);

    let before = std::fs::metadata(root.join("user3.pee")).unwrap().len();
    let out = peel(
        &[&cfg[..], &["shrink", "--package", "user3.pee", "--budget-mb", "0.0008"]].concat(),
        root,
    );
    assert_ok(&out, "shrink");
    let after = std::fs::metadata(root.join("user3.pee")).unwrap().len();
    assert!(after < before, "shrink should drop block data ({before} -> {after})");

    // Shrunk package still ranks.
    let out = peel(
        &[&cfg[..], &["rank", "--package", "user3.pee", "--data", "groups", "--k", "5"]].concat(),
        root,
    );
    assert_ok(&out, "rank after shrink");

    let out = peel(
        &[&cfg[..], &["compare", "--a", "report.csv", "--b", "report.csv"]].concat(),
        root,
    );
    assert_ok(&out, "compare");
    assert!(String::from_utf8_lossy(&out.stdout).contains("tied"));
}

#[test]
fn experiment_verb_runs_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("exp.conf"),
        "[pipeline]\n\
         seed = 3\n\
         out = exp-out\n\
         [data]\n\
         synthetic = true\n\
         synthetic_users = 50\n\
         synthetic_items = 50\n\
         synthetic_clusters = 2\n\
         min_interactions = 3\n\
         [model]\n\
         d = 2\n\
         n_blocks = 4\n\
         item_groups = 2\n\
         user_groups = 2\n\
         scorer_hidden = 8\n\
         controller_hidden = 4\n\
         [pretrain]\n\
         epochs = 1\n\
         eval_every = 1\n\
         [cluster]\n\
         restarts = 2\n\
         [finetune]\n\
         epochs = 1\n\
         batch_size = 64\n\
         [deploy]\n\
         budgets_mb = 0.0017,0.0008\n\
         eval_k = 10\n",
    )
    .unwrap();
    let out = peel(&["--config", "exp.conf", "experiment"], root);
    assert_ok(&out, "experiment");
    assert!(root.join("exp-out/run/metrics.csv").exists());
    assert!(root.join("exp-out/run/manifest.json").exists());
    let metrics = std::fs::read_to_string(root.join("exp-out/run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
}

#[test]
fn errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let out = peel(&["rank", "--package", "missing.pee", "--data", "nowhere"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    assert!(line.starts_with("{\"error\":"), "stderr: {stderr}");
}
