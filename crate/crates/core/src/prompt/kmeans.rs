use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{argument_error, Result};

/// Centroids closer than this (squared) are merged after convergence.
const DEDUP_EPS2: f64 = 1e-18;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = dist2(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding over the rows of `points`
/// (`n x dim`, row-major).
///
/// `k` is reduced to the number of rows. Seeding stops early once every
/// point coincides with a chosen center, and coincident centroids are
/// merged, so fewer than `k` centroids may come back.
pub fn kmeans(points: &[f64], dim: usize, k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(argument_error!("k-means input is not a whole number of {}-rows", dim));
    }
    let n = points.len() / dim;
    if n == 0 {
        return Err(argument_error!("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(argument_error!("k-means needs k >= 1"));
    }
    let k = k.min(n);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = vec![row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            acc += d;
            if acc > target && d > 0.0 {
                pick = i;
                break;
            }
        }
        centers.push(row(pick).to_vec());
        let last = centers.last().unwrap();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist2(row(i), last));
        }
    }

    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for i in 0..n {
            let (c, _) = nearest(row(i), &centers);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(dist2(&updated, center).sqrt());
            *center = updated;
        }
        if shift < tol {
            break;
        }
    }

    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(centers.len());
    for c in centers {
        if kept.iter().all(|k| dist2(k, &c) > DEDUP_EPS2) {
            kept.push(c);
        }
    }
    Ok(kept)
}
