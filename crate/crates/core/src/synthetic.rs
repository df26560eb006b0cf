//! Planted-cluster interaction generator for tests and demo runs.

use rand::Rng;

use crate::rng;

/// Users and items are assigned round-robin to `clusters` latent groups; a
/// user interacts with a same-cluster item with probability `p_in` and with
/// any other item with probability `p_out`. Returns tab-separated
/// `user<TAB>item` lines ready for ingestion.
pub fn planted_clusters(
    users: usize,
    items: usize,
    clusters: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> String {
    let mut r = rng::chacha(rng::derive(seed, "planted", 0));
    let mut out = String::new();
    for u in 0..users {
        let cu = u % clusters;
        for i in 0..items {
            let p = if i % clusters == cu { p_in } else { p_out };
            if r.gen_bool(p) {
                out.push_str(&format!("{u}\t{i}\n"));
            }
        }
    }
    out
}
