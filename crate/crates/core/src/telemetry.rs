//! Process-wide instrumentation counters.
//!
//! The device-side shrink path must never touch an optimizer; tests read these
//! counters around shrink/simulate calls to prove it, and the experiment
//! runner uses them to verify cache hits re-run zero training.

use std::sync::atomic::{AtomicU64, Ordering};

static OPTIMIZER_STEPS: AtomicU64 = AtomicU64::new(0);
static TRAINING_BATCHES: AtomicU64 = AtomicU64::new(0);

pub fn record_optimizer_step() {
    OPTIMIZER_STEPS.fetch_add(1, Ordering::Relaxed);
}

pub fn record_training_batch() {
    TRAINING_BATCHES.fetch_add(1, Ordering::Relaxed);
}

pub fn optimizer_steps() -> u64 {
    OPTIMIZER_STEPS.load(Ordering::Relaxed)
}

pub fn training_batches() -> u64 {
    TRAINING_BATCHES.load(Ordering::Relaxed)
}
