//! Elastic block-structured embedding tables for on-device recommendation.
//!
//! The pipeline has three server-side stages and one device-side stage:
//!
//! 1. [`pretrain`] learns full user/item embedding tables on the interaction
//!    graph, with a regularizer that pushes the embedding blocks of each item
//!    apart so they carry distinct information.
//! 2. [`clustering`] groups users over their pretrained embeddings; [`finetune`]
//!    then refines a copy of the tables per user group while a small controller
//!    learns softmax importance weights for every (block, item-group) pair.
//! 3. [`deploy`] turns a fine-tuned group model plus a byte budget into a
//!    self-contained package: the highest-weight blocks, normalized, with the
//!    weights embedded so the package can shrink itself later without any
//!    server contact.
//! 4. [`device`] ranks items from a package with a parameter-free similarity
//!    and simulates shrinking budgets over time.
//!
//! [`experiment`] wires the stages into a cached, reproducible runner with
//! ablation switches and hyperparameter sweeps.

pub mod adam;

pub mod clustering;
pub mod config;


pub mod deploy;
pub mod device;
pub mod error;
pub mod experiment;
pub mod finetune;


pub mod ingest;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod synthetic;
pub mod telemetry;
pub mod types;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// Cap the worker pool; 0 keeps the default. One thread gives strictly
/// sequential execution for bit-reproducibility checks. Call before any
/// parallel stage; later calls are ignored.
pub fn init_thread_pool(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}
