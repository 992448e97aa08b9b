//! Per-cluster z-score normalization of denoised feature channels.
//!
//! Each operating-condition cluster gets its own mean/std per channel,
//! fitted with the population (divide-by-N) variance. Channels whose std
//! collapses below a floor normalize to exactly zero instead of exploding.

use crate::error::{Error, Result};

/// Below this, a channel is considered constant within its cluster.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel statistics for one cluster.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Normalizers for every cluster (index = cluster id).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterNormalizer {
    pub dims: usize,
    pub clusters: Vec<ChannelStats>,
}

impl ClusterNormalizer {
    /// Fit from row-major `rows[n, dims]` with a cluster id per row.
    /// Clusters that received no rows get zero mean and floor std, which
    /// makes them normalize to zero if ever hit at inference time.
    pub fn fit(
        rows: &[f64],
        dims: usize,
        assignments: &[usize],
        k: usize,
    ) -> Result<ClusterNormalizer> {
        if dims == 0 {
            return Err(Error::Config("normalizer: dims must be positive".into()));
        }
        if rows.len() % dims != 0 || rows.len() / dims != assignments.len() {
            return Err(Error::Structure(format!(
                "normalizer: {} values / dims {dims} inconsistent with {} assignments",
                rows.len(),
                assignments.len()
            )));
        }
        let mut sums = vec![0.0f64; k * dims];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            if c >= k {
                return Err(Error::Structure(format!(
                    "normalizer: assignment {c} out of range for k = {k}"
                )));
            }
            counts[c] += 1;
            for d in 0..dims {
                sums[c * dims + d] += rows[i * dims + d];
            }
        }
        let mut clusters = Vec::with_capacity(k);
        for c in 0..k {
            let n = counts[c];
            let mean: Vec<f64> = if n == 0 {
                vec![0.0; dims]
            } else {
                (0..dims).map(|d| sums[c * dims + d] / n as f64).collect()
            };
            clusters.push(ChannelStats { mean, std: vec![STD_FLOOR; dims] });
        }
        let mut sq = vec![0.0f64; k * dims];
        for (i, &c) in assignments.iter().enumerate() {
            for d in 0..dims {
                let dv = rows[i * dims + d] - clusters[c].mean[d];
                sq[c * dims + d] += dv * dv;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for d in 0..dims {
                let var = sq[c * dims + d] / counts[c] as f64;
                clusters[c].std[d] = var.sqrt().max(STD_FLOOR);
            }
        }
        Ok(ClusterNormalizer { dims, clusters })
    }

    /// Normalize one row in place for its cluster. Floor-std channels map
    /// to zero.
    pub fn apply(&self, cluster: usize, row: &mut [f64]) -> Result<()> {
        if cluster >= self.clusters.len() {
            return Err(Error::Structure(format!(
                "normalizer: cluster {cluster} out of range ({} fitted)",
                self.clusters.len()
            )));
        }
        if row.len() != self.dims {
            return Err(Error::Structure(format!(
                "normalizer: row width {} != fitted dims {}",
                row.len(),
                self.dims
            )));
        }
        let stats = &self.clusters[cluster];
        for d in 0..self.dims {
            row[d] = if stats.std[d] <= STD_FLOOR {
                0.0
            } else {
                (row[d] - stats.mean[d]) / stats.std[d]
            };
        }
        Ok(())
    }
}
