// Probe: isolate why tight-budget rankings underperform random.
use peel_core::config::{PipelineConfig, SplitMode};
use peel_core::deploy;
use peel_core::device;
use peel_core::finetune;
use peel_core::ingest;
use peel_core::pretrain::{self, Readout};
use peel_core::synthetic;
use peel_core::types::Role;
use rand::Rng;
use std::io::Cursor;

fn base_cfg(seed: u64, n_blocks: usize, d: usize, epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.model.block_dim = d;
    cfg.model.n_blocks = n_blocks;
    cfg.model.item_groups = 8;
    cfg.model.user_groups = 4;
    cfg.model.scorer_hidden = vec![32];
    cfg.model.controller_hidden = vec![8];
    cfg.pretrain.epochs = epochs;
    cfg.pretrain.eval_every = 5;
    cfg.pretrain.learning_rate = 0.05;
    cfg.pretrain.batch_size = 512;
    cfg.finetune.epochs = 4;
    cfg.finetune.batch_size = 256;
    cfg.finetune.patience = 10;
    cfg
}

fn eval_models(
    models: &[finetune::GroupModel],
    log: &peel_core::types::InteractionLog,
    budget: u64,
    alpha_override: Option<&dyn Fn(usize, usize, u64) -> Vec<f32>>,
) -> f64 {
    let test_items = log.items_by_user(Role::Test);
    let mut total = 0.0;
    let mut n = 0usize;
    for model in models {
        let mut m = model.clone();
        if let Some(f) = alpha_override {
            m.alpha = f(m.alpha.len(), m.group_index, 0);
        }
        for &user in &m.user_ids {
            if test_items[user as usize].is_empty() {
                continue;
            }
            let pkg = deploy::build_package(&m, user, budget).unwrap();
            if let Some((recall, _)) = device::evaluate_package(&pkg, log, 10).unwrap() {
                total += recall;
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn probe_quarter_anomaly() {
    for (n_blocks, d, epochs) in [(8usize, 4usize, 15usize), (4, 8, 15), (4, 16, 25), (2, 16, 25)] {
        let seed = 1001;
        let cfg = base_cfg(seed, n_blocks, d, epochs);
        let text = synthetic::planted_clusters(400, 400, 4, 0.5, 0.02, seed);
        let log = ingest::load_and_filter_from(&mut Cursor::new(text.as_bytes()), 10).unwrap();
        let log = ingest::split_roles(log, [0.7, 0.1, 0.2], SplitMode::PerUser, seed).unwrap();
        let plan = ingest::segment_items_by_popularity(&log, 8).unwrap();
        let pre = pretrain::run_pretrain(&log, &plan, &cfg, Readout::FinalLayer).unwrap();
        let state = peel_core::clustering::kmeans_users(&pre.users, 4, seed, 100, 1e-4, 5).unwrap();
        let groups = state.groups(4);
        let models = finetune::finetune_all_groups(&log, &pre, &groups, &cfg).unwrap();

        let dim = n_blocks * d;
        let full_bytes = (400 * dim + dim) as u64 * 4;
        // Floor: one block per group plus the user embedding.
        let quarter_bytes = ((400 * d) + dim) as u64 * 4;
        let full = eval_models(&models, &log, full_bytes, None);
        let quarter = eval_models(&models, &log, quarter_bytes, None);
        let quarter_rand = eval_models(
            &models,
            &log,
            quarter_bytes,
            Some(&|len, g, _| {
                let mut r = peel_core::rng::chacha(g as u64 + 500);
                let raw: Vec<f32> = (0..len).map(|_| r.gen_range(0.01..1.0f32)).collect();
                let s: f32 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }),
        );
        println!(
            "N={n_blocks} d={d} epochs={epochs}: full {full:.4}, quarter(learned) {quarter:.4}, quarter(random-sel) {quarter_rand:.4}"
        );
    }
}
