//! Pipeline configuration: typed knobs for every stage plus a strict
//! line-based `key = value` config file format with one section per stage.
//! Unknown keys are hard errors so programmatic sweeps cannot silently typo.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    PerUser,
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub input: String,
    pub synthetic: bool,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_clusters: usize,
    pub synthetic_p_in: f64,
    pub synthetic_p_out: f64,
    pub min_interactions: u32,
    pub ratios: [f64; 3],
    pub split: SplitMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Block length d; the full dimension is `n_blocks * block_dim`.
    pub block_dim: usize,
    /// Blocks per item N.
    pub n_blocks: usize,
    pub user_groups: usize,
    pub item_groups: usize,
    /// Propagation depth.
    pub l1_layers: usize,
    /// Scorer hidden widths.
    pub scorer_hidden: Vec<usize>,
    /// Controller hidden widths.
    pub controller_hidden: Vec<usize>,
    /// Normalization stability constant.
    pub epsilon: f32,
    pub bn_momentum: f32,
    pub bytes_per_parameter: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    /// Diversity regularizer coefficient.
    pub lambda: f32,
    /// L2 decay keeping the maximized regularizer bounded.
    pub weight_decay: f32,
    pub learning_rate: f32,
    pub init_std: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub eval_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub learning_rate_w: f32,
    pub learning_rate_v: f32,
    /// Lookahead step size; `None` follows `learning_rate_w`.
    pub xi: Option<f32>,
    pub second_order: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeployConfig {
    /// Descending budgets in decimal megabytes (1 MB = 1e6 bytes).
    pub budgets_mb: Vec<f64>,
    pub eval_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationFlags {
    pub diversity_regularizer: bool,
    pub user_clustering: bool,
    pub popularity_segmentation: bool,
    pub importance_weights: bool,
    pub final_layer_only: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepConfig {
    pub user_groups: Vec<usize>,
    pub item_groups: Vec<usize>,
    pub n_blocks: Vec<usize>,
}

/// Canonical stage order for the experiment runner.
pub const STAGE_ORDER: [&str; 6] = ["data", "ingest", "pretrain", "cluster", "finetune", "evaluate"];

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: String,
    /// Stages the experiment runner executes; unlisted dependencies must
    /// already be cached.
    pub stages: Vec<String>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub cluster: ClusterConfig,
    pub finetune: FinetuneConfig,
    pub deploy: DeployConfig,
    pub ablation: AblationFlags,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            threads: 0,
            out: "runs/default".to_string(),
            stages: STAGE_ORDER.iter().map(|s| s.to_string()).collect(),
            data: DataConfig {
                input: String::new(),
                synthetic: false,
                synthetic_users: 400,
                synthetic_items: 400,
                synthetic_clusters: 4,
                synthetic_p_in: 0.5,
                synthetic_p_out: 0.02,
                min_interactions: 10,
                ratios: [0.7, 0.1, 0.2],
                split: SplitMode::PerUser,
            },
            model: ModelConfig {
                block_dim: 8,
                n_blocks: 16,
                user_groups: 15,
                item_groups: 20,
                l1_layers: 2,
                scorer_hidden: vec![64],
                controller_hidden: vec![16],
                epsilon: 1e-5,
                bn_momentum: 0.9,
                bytes_per_parameter: 4,
            },
            pretrain: PretrainConfig {
                lambda: 1e-4,
                weight_decay: 1e-5,
                learning_rate: 1e-3,
                init_std: 0.1,
                epochs: 50,
                batch_size: 512,
                eval_every: 5,
                patience: 3,
                eval_k: 10,
            },
            cluster: ClusterConfig {
                restarts: 10,
                max_iters: 100,
                tol: 1e-4,
            },
            finetune: FinetuneConfig {
                learning_rate_w: 1e-3,
                learning_rate_v: 1e-3,
                xi: None,
                second_order: true,
                epochs: 10,
                batch_size: 256,
                patience: 3,
            },
            deploy: DeployConfig {
                budgets_mb: vec![25.0, 10.0, 5.0],
                eval_k: 50,
            },
            ablation: AblationFlags {
                diversity_regularizer: true,
                user_clustering: true,
                popularity_segmentation: true,
                importance_weights: true,
                final_layer_only: true,
            },
            sweep: SweepConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn full_dim(&self) -> usize {
        self.model.block_dim * self.model.n_blocks
    }

    /// Effective number of user groups after ablation normalization.
    pub fn effective_user_groups(&self) -> usize {
        if self.ablation.user_clustering {
            self.model.user_groups
        } else {
            1
        }
    }

    pub fn effective_lambda(&self) -> f32 {
        if self.ablation.diversity_regularizer {
            self.pretrain.lambda
        } else {
            0.0
        }
    }

    pub fn xi(&self) -> f32 {
        self.finetune.xi.unwrap_or(self.finetune.learning_rate_w)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d", self.model.block_dim),
            ("model.n_blocks", self.model.n_blocks),
            ("model.user_groups", self.model.user_groups),
            ("model.item_groups", self.model.item_groups),
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("finetune.batch_size", self.finetune.batch_size),
            ("cluster.restarts", self.cluster.restarts),
            ("cluster.max_iters", self.cluster.max_iters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.pretrain.lambda < 0.0 {
            return Err(Error::Config("pretrain.lambda must be >= 0".into()));
        }
        if self.model.epsilon <= 0.0 {
            return Err(Error::Config("model.epsilon must be > 0".into()));
        }
        let s: f64 = self.data.ratios.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("data.ratios must sum to 1, got {s}")));
        }
        if self.data.ratios[0] <= 0.0 {
            return Err(Error::Config("train ratio must be > 0".into()));
        }
        if self.deploy.budgets_mb.is_empty() {
            return Err(Error::Config("deploy.budgets_mb must be non-empty".into()));
        }
        for w in self.deploy.budgets_mb.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(
                    "deploy.budgets_mb must be strictly decreasing".into(),
                ));
            }
        }
        if self.data.min_interactions < 1 {
            return Err(Error::Config("data.min_interactions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = idx + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("unterminated section header `{line}`"),
                    });
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}` in section `[{section}]`"));
        match section {
            "pipeline" => match key {
                "seed" => self.seed = parse(value)?,
                "threads" => self.threads = parse(value)?,
                "out" => self.out = value.to_string(),
                "stages" => {
                    let stages: Vec<String> =
                        value.split(',').map(|s| s.trim().to_string()).collect();
                    for s in &stages {
                        if !STAGE_ORDER.contains(&s.as_str()) {
                            return Err(Error::Config(format!("unknown stage `{s}`")));
                        }
                    }
                    self.stages = stages;
                }
                _ => return Err(unknown()),
            },
            "data" => match key {
                "input" => self.data.input = value.to_string(),
                "synthetic" => self.data.synthetic = parse_bool(value)?,
                "synthetic_users" => self.data.synthetic_users = parse(value)?,
                "synthetic_items" => self.data.synthetic_items = parse(value)?,
                "synthetic_clusters" => self.data.synthetic_clusters = parse(value)?,
                "synthetic_p_in" => self.data.synthetic_p_in = parse(value)?,
                "synthetic_p_out" => self.data.synthetic_p_out = parse(value)?,
                "min_interactions" => self.data.min_interactions = parse(value)?,
                "ratios" => {
                    let v = parse_list::<f64>(value)?;
                    if v.len() != 3 {
                        return Err(Error::Config("ratios needs 3 values".into()));
                    }
                    self.data.ratios = [v[0], v[1], v[2]];
                }
                "split" => {
                    self.data.split = match value {
                        "per_user" => SplitMode::PerUser,
                        "global" => SplitMode::Global,
                        _ => {
                            return Err(Error::Config(format!(
                                "split must be per_user or global, got `{value}`"
                            )))
                        }
                    }
                }
                _ => return Err(unknown()),
            },
            "model" => match key {
                "d" | "block_dim" => self.model.block_dim = parse(value)?,
                "n_blocks" => self.model.n_blocks = parse(value)?,
                "user_groups" => self.model.user_groups = parse(value)?,
                "item_groups" => self.model.item_groups = parse(value)?,
                "l1_layers" => self.model.l1_layers = parse(value)?,
                "scorer_hidden" => self.model.scorer_hidden = parse_list(value)?,
                "controller_hidden" => self.model.controller_hidden = parse_list(value)?,
                "epsilon" => self.model.epsilon = parse(value)?,
                "bn_momentum" => self.model.bn_momentum = parse(value)?,
                "bytes_per_parameter" => self.model.bytes_per_parameter = parse(value)?,
                _ => return Err(unknown()),
            },
            "pretrain" => match key {
                "lambda" => self.pretrain.lambda = parse(value)?,
                "weight_decay" => self.pretrain.weight_decay = parse(value)?,
                "learning_rate" => self.pretrain.learning_rate = parse(value)?,
                "init_std" => self.pretrain.init_std = parse(value)?,
                "epochs" => self.pretrain.epochs = parse(value)?,
                "batch_size" => self.pretrain.batch_size = parse(value)?,
                "eval_every" => self.pretrain.eval_every = parse(value)?,
                "patience" => self.pretrain.patience = parse(value)?,
                "eval_k" => self.pretrain.eval_k = parse(value)?,
                _ => return Err(unknown()),
            },
            "cluster" => match key {
                "restarts" => self.cluster.restarts = parse(value)?,
                "max_iters" => self.cluster.max_iters = parse(value)?,
                "tol" => self.cluster.tol = parse(value)?,
                _ => return Err(unknown()),
            },
            "finetune" => match key {
                "learning_rate_w" => self.finetune.learning_rate_w = parse(value)?,
                "learning_rate_v" => self.finetune.learning_rate_v = parse(value)?,
                "xi" => self.finetune.xi = Some(parse(value)?),
                "second_order" => self.finetune.second_order = parse_bool(value)?,
                "epochs" => self.finetune.epochs = parse(value)?,
                "batch_size" => self.finetune.batch_size = parse(value)?,
                "patience" => self.finetune.patience = parse(value)?,
                _ => return Err(unknown()),
            },
            "deploy" => match key {
                "budgets_mb" => self.deploy.budgets_mb = parse_list(value)?,
                "eval_k" => self.deploy.eval_k = parse(value)?,
                _ => return Err(unknown()),
            },
            "ablation" => match key {
                "diversity_regularizer" => {
                    self.ablation.diversity_regularizer = parse_bool(value)?
                }
                "user_clustering" => self.ablation.user_clustering = parse_bool(value)?,
                "popularity_segmentation" => {
                    self.ablation.popularity_segmentation = parse_bool(value)?
                }
                "importance_weights" => self.ablation.importance_weights = parse_bool(value)?,
                "final_layer_only" => self.ablation.final_layer_only = parse_bool(value)?,
                _ => return Err(unknown()),
            },
            "sweep" => match key {
                "user_groups" => self.sweep.user_groups = parse_list(value)?,
                "item_groups" => self.sweep.item_groups = parse_list(value)?,
                "n_blocks" => self.sweep.n_blocks = parse_list(value)?,
                _ => return Err(unknown()),
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown section `[{section}]` (key `{key}`)"
                )))
            }
        }
        Ok(())
    }

    /// Canonical text form: every key in a fixed order. Used both to persist
    /// configs and as the input to stage cache hashes.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[pipeline]");
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "threads = {}", self.threads);
        let _ = writeln!(w, "out = {}", self.out);
        let _ = writeln!(w, "stages = {}", self.stages.join(","));
        let _ = writeln!(w, "[data]");
        let _ = writeln!(w, "input = {}", self.data.input);
        let _ = writeln!(w, "synthetic = {}", self.data.synthetic);
        let _ = writeln!(w, "synthetic_users = {}", self.data.synthetic_users);
        let _ = writeln!(w, "synthetic_items = {}", self.data.synthetic_items);
        let _ = writeln!(w, "synthetic_clusters = {}", self.data.synthetic_clusters);
        let _ = writeln!(w, "synthetic_p_in = {}", self.data.synthetic_p_in);
        let _ = writeln!(w, "synthetic_p_out = {}", self.data.synthetic_p_out);
        let _ = writeln!(w, "min_interactions = {}", self.data.min_interactions);
        let _ = writeln!(
            w,
            "ratios = {},{},{}",
            self.data.ratios[0], self.data.ratios[1], self.data.ratios[2]
        );
        let _ = writeln!(
            w,
            "split = {}",
            match self.data.split {
                SplitMode::PerUser => "per_user",
                SplitMode::Global => "global",
            }
        );
        let _ = writeln!(w, "[model]");
        let _ = writeln!(w, "d = {}", self.model.block_dim);
        let _ = writeln!(w, "n_blocks = {}", self.model.n_blocks);
        let _ = writeln!(w, "user_groups = {}", self.model.user_groups);
        let _ = writeln!(w, "item_groups = {}", self.model.item_groups);
        let _ = writeln!(w, "l1_layers = {}", self.model.l1_layers);
        let _ = writeln!(w, "scorer_hidden = {}", join(&self.model.scorer_hidden));
        let _ = writeln!(
            w,
            "controller_hidden = {}",
            join(&self.model.controller_hidden)
        );
        let _ = writeln!(w, "epsilon = {}", self.model.epsilon);
        let _ = writeln!(w, "bn_momentum = {}", self.model.bn_momentum);
        let _ = writeln!(w, "bytes_per_parameter = {}", self.model.bytes_per_parameter);
        let _ = writeln!(w, "[pretrain]");
        let _ = writeln!(w, "lambda = {}", self.pretrain.lambda);
        let _ = writeln!(w, "weight_decay = {}", self.pretrain.weight_decay);
        let _ = writeln!(w, "learning_rate = {}", self.pretrain.learning_rate);
        let _ = writeln!(w, "init_std = {}", self.pretrain.init_std);
        let _ = writeln!(w, "epochs = {}", self.pretrain.epochs);
        let _ = writeln!(w, "batch_size = {}", self.pretrain.batch_size);
        let _ = writeln!(w, "eval_every = {}", self.pretrain.eval_every);
        let _ = writeln!(w, "patience = {}", self.pretrain.patience);
        let _ = writeln!(w, "eval_k = {}", self.pretrain.eval_k);
        let _ = writeln!(w, "[cluster]");
        let _ = writeln!(w, "restarts = {}", self.cluster.restarts);
        let _ = writeln!(w, "max_iters = {}", self.cluster.max_iters);
        let _ = writeln!(w, "tol = {}", self.cluster.tol);
        let _ = writeln!(w, "[finetune]");
        let _ = writeln!(w, "learning_rate_w = {}", self.finetune.learning_rate_w);
        let _ = writeln!(w, "learning_rate_v = {}", self.finetune.learning_rate_v);
        if let Some(xi) = self.finetune.xi {
            let _ = writeln!(w, "xi = {xi}");
        }
        let _ = writeln!(w, "second_order = {}", self.finetune.second_order);
        let _ = writeln!(w, "epochs = {}", self.finetune.epochs);
        let _ = writeln!(w, "batch_size = {}", self.finetune.batch_size);
        let _ = writeln!(w, "patience = {}", self.finetune.patience);
        let _ = writeln!(w, "[deploy]");
        let budgets: Vec<String> = self.deploy.budgets_mb.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(w, "budgets_mb = {}", budgets.join(","));
        let _ = writeln!(w, "eval_k = {}", self.deploy.eval_k);
        let _ = writeln!(w, "[ablation]");
        let _ = writeln!(
            w,
            "diversity_regularizer = {}",
            self.ablation.diversity_regularizer
        );
        let _ = writeln!(w, "user_clustering = {}", self.ablation.user_clustering);
        let _ = writeln!(
            w,
            "popularity_segmentation = {}",
            self.ablation.popularity_segmentation
        );
        let _ = writeln!(w, "importance_weights = {}", self.ablation.importance_weights);
        let _ = writeln!(w, "final_layer_only = {}", self.ablation.final_layer_only);
        if !self.sweep.user_groups.is_empty()
            || !self.sweep.item_groups.is_empty()
            || !self.sweep.n_blocks.is_empty()
        {
            let _ = writeln!(w, "[sweep]");
            if !self.sweep.user_groups.is_empty() {
                let _ = writeln!(w, "user_groups = {}", join(&self.sweep.user_groups));
            }
            if !self.sweep.item_groups.is_empty() {
                let _ = writeln!(w, "item_groups = {}", join(&self.sweep.item_groups));
            }
            if !self.sweep.n_blocks.is_empty() {
                let _ = writeln!(w, "n_blocks = {}", join(&self.sweep.n_blocks));
            }
        }
        s
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse<T: std::str::FromStr>(value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("expected bool, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|p| parse(p.trim()))
        .collect::<Result<Vec<T>>>()
}
