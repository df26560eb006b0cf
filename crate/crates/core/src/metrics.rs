//! Top-K ranking metrics.

/// Sort scored items by score descending, ties by ascending item id, and
/// return just the item ids. Scores must be finite.
pub fn rank_descending(scored: &mut [(f32, u32)]) -> Vec<u32> {
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores must be finite")
            .then(a.1.cmp(&b.1))
    });
    scored.iter().map(|&(_, i)| i).collect()
}

/// Fraction of ground-truth items present in the top K of `ranked`.
/// `ground_truth` must be sorted ascending.
pub fn recall_at_k(ranked: &[u32], ground_truth: &[u32], k: usize) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let top = &ranked[..k.min(ranked.len())];
    let hits = top
        .iter()
        .filter(|i| ground_truth.binary_search(i).is_ok())
        .count();
    hits as f64 / ground_truth.len() as f64
}

/// Binary-gain NDCG: a hit at 1-based rank r contributes 1/log2(r+1),
/// divided by the ideal DCG for `min(k, |ground truth|)` leading hits.
/// `ground_truth` must be sorted ascending.
pub fn ndcg_at_k(ranked: &[u32], ground_truth: &[u32], k: usize) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let top = &ranked[..k.min(ranked.len())];
    let mut dcg = 0.0;
    for (idx, item) in top.iter().enumerate() {
        if ground_truth.binary_search(item).is_ok() {
            dcg += 1.0 / ((idx + 2) as f64).log2();
        }
    }
    let ideal_hits = ground_truth.len().min(k);
    let idcg: f64 = (0..ideal_hits).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    dcg / idcg
}
