//! User clustering over pretrained embeddings: seeded k-means++ with Lloyd
//! iterations, multiple restarts, and empty-cluster repair.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use rand::Rng;
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ClusterState {
    /// `k x dim`.
    pub centroids: Matrix<f32>,
    /// User row -> group index; every user sits on its nearest centroid
    /// (ties to the lowest group index).
    pub assignment: Vec<u32>,
    /// Sum of squared distances to assigned centroids.
    pub within_variance: f64,
}

impl ClusterState {
    pub fn groups(&self, k: usize) -> Vec<Vec<u32>> {
        let mut groups = vec![Vec::new(); k];
        for (u, &g) in self.assignment.iter().enumerate() {
            groups[g as usize].push(u as u32);
        }
        groups
    }
}

fn dist_sq(a: &[f32], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = *x as f64 - y;
        s += d * d;
    }
    s
}

fn nearest(centroids: &[Vec<f64>], point: &[f32]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = dist_sq(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn plus_plus_seeds<R: Rng>(points: &Matrix<f32>, k: usize, r: &mut R) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = r.gen_range(0..n);
    centroids.push(points.row(first).iter().map(|&v| v as f64).collect());
    let mut dists = vec![0.0f64; n];
    while centroids.len() < k {
        let mut total = 0.0;
        for p in 0..n {
            let (_, d) = nearest(&centroids, points.row(p));
            dists[p] = d;
            total += d;
        }
        let idx = if total <= 0.0 {
            // All remaining points coincide with a centroid.
            r.gen_range(0..n)
        } else {
            let target = r.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (p, &d) in dists.iter().enumerate() {
                acc += d;
                if target < acc {
                    chosen = p;
                    break;
                }
            }
            chosen
        };
        centroids.push(points.row(idx).iter().map(|&v| v as f64).collect());
    }
    centroids
}

fn lloyd(
    points: &Matrix<f32>,
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
    tol: f64,
) -> ClusterState {
    let n = points.rows();
    let dim = points.cols();
    let k = centroids.len();
    let mut assignment = vec![0u32; n];
    let mut prev_objective = f64::INFINITY;
    for _ in 0..max_iters {
        let mut objective = 0.0;
        for p in 0..n {
            let (c, d) = nearest(&centroids, points.row(p));
            assignment[p] = c as u32;
            objective += d;
        }

        // Repair empty clusters by stealing the point farthest from its
        // centroid (from clusters that can spare one).
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            sizes[a as usize] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut far_p = usize::MAX;
            let mut far_d = -1.0;
            for p in 0..n {
                let owner = assignment[p] as usize;
                if sizes[owner] <= 1 {
                    continue;
                }
                let d = dist_sq(points.row(p), &centroids[owner]);
                if d > far_d {
                    far_d = d;
                    far_p = p;
                }
            }
            if far_p != usize::MAX {
                sizes[assignment[far_p] as usize] -= 1;
                assignment[far_p] = c as u32;
                sizes[c] += 1;
            }
        }

        // Recompute centroids.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for p in 0..n {
            let c = assignment[p] as usize;
            counts[c] += 1;
            for (s, &v) in sums[c].iter_mut().zip(points.row(p)) {
                *s += v as f64;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for (j, s) in sums[c].iter().enumerate() {
                let newv = s / counts[c] as f64;
                let d = newv - centroids[c][j];
                shift += d * d;
                centroids[c][j] = newv;
            }
        }

        // Lloyd never increases the objective (tiny slack for rounding).
        assert!(
            objective <= prev_objective * (1.0 + 1e-9) + 1e-12,
            "objective went up: {objective} > {prev_objective}"
        );
        prev_objective = objective;
        if shift.sqrt() < tol {
            break;
        }
    }
    // Final assignment against the settled centroids.
    let mut objective = 0.0;
    for p in 0..n {
        let (c, d) = nearest(&centroids, points.row(p));
        assignment[p] = c as u32;
        objective += d;
    }
    let mut flat = Matrix::zeros(k, dim);
    for (c, centroid) in centroids.iter().enumerate() {
        for (j, &v) in centroid.iter().enumerate() {
            flat.set(c, j, v as f32);
        }
    }
    // Assignment-only repair for the settled state.
    let mut state = ClusterState {
        centroids: flat,
        assignment,
        within_variance: objective,
    };
    repair_empty(points, &mut state, k);
    state
}

fn repair_empty(points: &Matrix<f32>, state: &mut ClusterState, k: usize) {
    let mut sizes = vec![0usize; k];
    for &a in &state.assignment {
        sizes[a as usize] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut far_p = usize::MAX;
        let mut far_d = -1.0;
        for p in 0..points.rows() {
            let owner = state.assignment[p] as usize;
            if sizes[owner] <= 1 {
                continue;
            }
            let centroid: Vec<f64> = state
                .centroids
                .row(owner)
                .iter()
                .map(|&v| v as f64)
                .collect();
            let d = dist_sq(points.row(p), &centroid);
            if d > far_d {
                far_d = d;
                far_p = p;
            }
        }
        if far_p != usize::MAX {
            sizes[state.assignment[far_p] as usize] -= 1;
            state.assignment[far_p] = c as u32;
            sizes[c] += 1;
        }
    }
}

/// K-means over user embedding rows. Restarts run in parallel with derived
/// seeds; the best objective wins, ties to the lowest restart index.
pub fn kmeans_users(
    user_table: &Matrix<f32>,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    restarts: usize,
) -> Result<ClusterState> {
    if k == 0 || k > user_table.rows() {
        return Err(Error::Config(format!(
            "cluster count {k} must be in 1..={}",
            user_table.rows()
        )));
    }
    let results: Vec<(usize, ClusterState)> = (0..restarts.max(1))
        .into_par_iter()
        .map(|restart| {
            let mut r = rng::chacha(rng::derive(seed, "kmeans", restart as u64));
            let centroids = plus_plus_seeds(user_table, k, &mut r);
            (restart, lloyd(user_table, centroids, max_iters, tol))
        })
        .collect();
    let best = results
        .into_iter()
        .min_by(|(ia, a), (ib, b)| {
            a.within_variance
                .partial_cmp(&b.within_variance)
                .unwrap()
                .then(ia.cmp(ib))
        })
        .map(|(_, s)| s)
        .unwrap();
    Ok(best)
}

pub fn write_assignments(state: &ClusterState, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for (u, &g) in state.assignment.iter().enumerate() {
        writeln!(w, "{u}\t{g}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments(path: &Path) -> Result<Vec<u32>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out: Vec<(usize, u32)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (u, g) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: idx + 1,
            msg: format!("expected `user<TAB>group`, got `{line}`"),
        })?;
        let u: usize = u.trim().parse().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: format!("bad user id: {e}"),
        })?;
        let g: u32 = g.trim().parse().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: format!("bad group index: {e}"),
        })?;
        out.push((u, g));
    }
    out.sort_unstable();
    for (expect, &(u, _)) in out.iter().enumerate() {
        if u != expect {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                msg: format!("missing or duplicate user id {expect}"),
            });
        }
    }
    Ok(out.into_iter().map(|(_, g)| g).collect())
}

pub fn write_centroids(state: &ClusterState, path: &Path) -> Result<()> {
    use crate::io::{write_f32_slice, write_u16, write_u32};
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(b"PECT")?;
    write_u16(&mut w, 1)?;
    write_u32(&mut w, state.centroids.rows() as u32)?;
    write_u32(&mut w, state.centroids.cols() as u32)?;
    write_f32_slice(&mut w, state.centroids.data())?;
    w.flush()?;
    Ok(())
}
