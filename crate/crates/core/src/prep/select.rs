//! Degradation-relevant sensor selection.
//!
//! A sensor channel survives when, pooled over every training engine and
//! cycle, (a) its population standard deviation clears a variability floor
//! and (b) the absolute Pearson correlation between its readings and the
//! capped RUL labels clears a relevance floor.

use crate::cmapss::{EngineTrajectory, SENSORS};
use crate::error::{Error, Result};

/// Minimum absolute Pearson correlation with RUL (strictly greater).
pub const CORR_MIN: f64 = 0.1;
/// Minimum pooled population standard deviation (inclusive).
pub const STD_MIN: f64 = 0.01;

/// Indices (zero-based) of the retained sensor channels, ascending.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureSelection {
    pub selected: Vec<usize>,
}

impl FeatureSelection {
    /// Conventional one-based sensor names ("s2", "s3", ...).
    pub fn sensor_names(&self) -> Vec<String> {
        self.selected.iter().map(|i| format!("s{}", i + 1)).collect()
    }
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.is_empty() {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    cov / (vx.sqrt() * vy.sqrt())
}

fn population_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

/// Select channels over pooled training data. `labels[e]` must hold one
/// (typically capped) RUL value per cycle of `trajectories[e]`.
pub fn select_features(
    trajectories: &[EngineTrajectory],
    labels: &[Vec<f64>],
    corr_min: f64,
    std_min: f64,
) -> Result<FeatureSelection> {
    if trajectories.is_empty() {
        return Err(Error::Structure("feature selection: no trajectories".into()));
    }
    if trajectories.len() != labels.len() {
        return Err(Error::Structure(format!(
            "feature selection: {} trajectories but {} label series",
            trajectories.len(),
            labels.len()
        )));
    }
    let total: usize = trajectories.iter().map(|t| t.cycles).sum();
    let mut rul = Vec::with_capacity(total);
    for (t, l) in trajectories.iter().zip(labels) {
        if t.cycles != l.len() {
            return Err(Error::Structure(format!(
                "feature selection: unit {} has {} cycles but {} labels",
                t.unit,
                t.cycles,
                l.len()
            )));
        }
        rul.extend_from_slice(l);
    }

    let mut selected = Vec::new();
    for ch in 0..SENSORS {
        let mut values = Vec::with_capacity(total);
        for t in trajectories {
            values.extend(t.sensor_series(ch));
        }
        if population_std(&values) < std_min {
            continue;
        }
        if pearson(&values, &rul).abs() > corr_min {
            selected.push(ch);
        }
    }
    if selected.is_empty() {
        return Err(Error::Structure(
            "feature selection: no channel passed the variability and relevance gates".into(),
        ));
    }
    Ok(FeatureSelection { selected })
}
