// Probe: does longer bi-level training concentrate alpha and help the
// grouped model at tight budgets.
use peel_core::config::{PipelineConfig, SplitMode};
use peel_core::deploy;
use peel_core::device;
use peel_core::finetune;
use peel_core::ingest;
use peel_core::pretrain::{self, Readout};
use peel_core::synthetic;
use peel_core::types::Role;
use std::io::Cursor;

fn cfg(seed: u64, ft_epochs: usize, lr_v: f32) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.model.block_dim = 16;
    cfg.model.n_blocks = 4;
    cfg.model.item_groups = 8;
    cfg.model.user_groups = 4;
    cfg.model.scorer_hidden = vec![32];
    cfg.model.controller_hidden = vec![8];
    cfg.pretrain.epochs = 25;
    cfg.pretrain.eval_every = 5;
    cfg.pretrain.learning_rate = 0.05;
    cfg.pretrain.batch_size = 512;
    cfg.finetune.epochs = ft_epochs;
    cfg.finetune.batch_size = 256;
    cfg.finetune.patience = 100;
    cfg.finetune.learning_rate_v = lr_v;
    cfg
}

fn recall_at(models: &[finetune::GroupModel], log: &peel_core::types::InteractionLog, budget: u64) -> f64 {
    let test_items = log.items_by_user(Role::Test);
    let mut total = 0.0;
    let mut n = 0usize;
    for m in models {
        for &user in &m.user_ids {
            if test_items[user as usize].is_empty() { continue; }
            let pkg = deploy::build_package(m, user, budget).unwrap();
            if let Some((recall, _)) = device::evaluate_package(&pkg, log, 10).unwrap() {
                total += recall;
                n += 1;
            }
        }
    }
    total / n as f64
}

#[test]
fn probe_finetune_depth() {
    let seed = 1001;
    let text = synthetic::planted_clusters(400, 400, 4, 0.5, 0.02, seed);
    let log = ingest::load_and_filter_from(&mut Cursor::new(text.as_bytes()), 10).unwrap();
    let log = ingest::split_roles(log, [0.7, 0.1, 0.2], SplitMode::PerUser, seed).unwrap();

    for (ft_epochs, lr_v) in [(4usize, 1e-3f32), (12, 1e-3), (12, 5e-3), (20, 5e-3)] {
        let c = cfg(seed, ft_epochs, lr_v);
        let plan = ingest::segment_items_by_popularity(&log, 8).unwrap();
        let pre = pretrain::run_pretrain(&log, &plan, &c, Readout::FinalLayer).unwrap();
        let state = peel_core::clustering::kmeans_users(&pre.users, 4, seed, 100, 1e-4, 5).unwrap();
        let models = finetune::finetune_all_groups(&log, &pre, &state.groups(4), &c).unwrap();
        let global = finetune::finetune_all_groups(
            &log,
            &pre,
            &[(0..log.num_users as u32).collect::<Vec<u32>>()],
            &c,
        )
        .unwrap();

        let dim = 64;
        let full = (400 * dim + dim) as u64 * 4;
        let floor = (400 * 16 + dim) as u64 * 4;
        let a = &models[0].alpha;
        let amax = a.iter().cloned().fold(0.0f32, f32::max);
        let amin = a.iter().cloned().fold(1.0f32, f32::min);
        println!(
            "ft={ft_epochs} lrv={lr_v}: grouped full {:.4} floor {:.4} | global full {:.4} floor {:.4} | alpha [{:.4},{:.4}] uniform {:.4}",
            recall_at(&models, &log, full),
            recall_at(&models, &log, floor),
            recall_at(&global, &log, full),
            recall_at(&global, &log, floor),
            amin, amax, 1.0 / 32.0
        );
    }
}
