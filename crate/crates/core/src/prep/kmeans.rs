//! Operating-condition discovery via k-means over the setting channels.
//!
//! Seeding is k-means++ driven by a caller-supplied deterministic RNG;
//! Lloyd iterations run to an assignment fixpoint (or an iteration cap).
//! Clusters that empty out keep their previous centroid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Fitted cluster model over `dims`-dimensional rows.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub dims: usize,
    /// Row-major `[k, dims]` centroids.
    pub centroids: Vec<f64>,
}

impl KMeansModel {
    /// Index of the nearest centroid (squared Euclidean); ties go to the
    /// lowest index.
    pub fn assign(&self, row: &[f64]) -> usize {
        debug_assert_eq!(row.len(), self.dims);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k {
            let cen = &self.centroids[c * self.dims..(c + 1) * self.dims];
            let d: f64 = cen.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fit k-means over row-major `rows[n, dims]`. Requires at least `k`
/// distinct rows.
pub fn fit_kmeans(
    rows: &[f64],
    dims: usize,
    k: usize,
    max_iter: usize,
    rng: &mut ChaCha8Rng,
) -> Result<KMeansModel> {
    if dims == 0 || k == 0 {
        return Err(Error::Config(format!("k-means: dims={dims}, k={k} must be positive")));
    }
    if rows.len() % dims != 0 {
        return Err(Error::Structure(format!(
            "k-means: {} values not divisible by dims {dims}",
            rows.len()
        )));
    }
    let n = rows.len() / dims;
    let row = |i: usize| &rows[i * dims..(i + 1) * dims];

    let mut distinct: Vec<usize> = Vec::new();
    'outer: for i in 0..n {
        for &j in &distinct {
            if row(i) == row(j) {
                continue 'outer;
            }
        }
        distinct.push(i);
        if distinct.len() >= k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::Structure(format!(
            "k-means: only {} distinct rows, need at least k = {k}",
            distinct.len()
        )));
    }

    // k-means++ seeding: first centroid uniform, the rest by squared-distance
    // weighted draws.
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dims);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while centroids.len() / dims < k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in min_d.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            // All mass sits on already-chosen points (duplicates); fall back
            // to the first row not yet selected as a centroid.
            (0..n)
                .find(|&i| {
                    (0..centroids.len() / dims)
                        .all(|c| row(i) != &centroids[c * dims..(c + 1) * dims])
                })
                .expect("distinct count >= k guarantees an unused row")
        };
        centroids.extend_from_slice(row(pick));
        let c_last = centroids.len() / dims - 1;
        for i in 0..n {
            let d = sq_dist(row(i), &centroids[c_last * dims..(c_last + 1) * dims]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }

    let mut model = KMeansModel { k, dims, centroids };
    let mut assign: Vec<usize> = (0..n).map(|i| model.assign(row(i))).collect();
    for _ in 0..max_iter {
        // Means of current assignments; empty clusters keep their centroid.
        let mut sums = vec![0.0f64; k * dims];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            for d in 0..dims {
                sums[c * dims + d] += rows[i * dims + d];
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dims {
                model.centroids[c * dims + d] = sums[c * dims + d] / counts[c] as f64;
            }
        }
        let next: Vec<usize> = (0..n).map(|i| model.assign(row(i))).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(model)
}
