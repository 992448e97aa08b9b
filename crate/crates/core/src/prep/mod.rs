//! Condition-aware preprocessing: sensor selection, wavelet denoising,
//! operating-condition clustering and per-cluster normalization.
//!
//! Everything fitted here is frozen into a [`PreprocessModel`] that
//! serializes to JSON, so training and later evaluation apply byte-identical
//! transforms.

pub mod kmeans;
pub mod normalize;
pub mod select;
pub mod wavelet;

use crate::cmapss::{train_rul_series, EngineTrajectory, SETTINGS};
use crate::error::{Error, Result};
use crate::rng;

pub use kmeans::KMeansModel;
pub use normalize::ClusterNormalizer;
pub use select::FeatureSelection;

/// Identifier written into serialized preprocess models.
pub const PREP_FORMAT: &str = "preprocess-v1";

/// Tunables for the preprocessing fit. Deserialization fills omitted
/// fields from the defaults, so partial config files work.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PrepConfig {
    /// Piecewise RUL cap used for the selection labels.
    pub rul_cap: f64,
    /// Correlation gate (strictly greater).
    pub corr_min: f64,
    /// Variability gate (inclusive).
    pub std_min: f64,
    /// Operating-condition cluster count.
    pub clusters: usize,
    /// Lloyd iteration cap.
    pub kmeans_max_iter: usize,
    /// Apply wavelet denoising to the selected channels.
    pub denoise: bool,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            rul_cap: crate::cmapss::RUL_CAP,
            corr_min: select::CORR_MIN,
            std_min: select::STD_MIN,
            clusters: 6,
            kmeans_max_iter: 300,
            denoise: true,
        }
    }
}

/// Frozen preprocessing state: which sensors survive, how settings map to
/// condition clusters, and per-cluster channel statistics.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreprocessModel {
    pub format: String,
    pub config: PrepConfig,
    pub selection: FeatureSelection,
    pub kmeans: KMeansModel,
    pub normalizer: ClusterNormalizer,
}

/// One engine after preprocessing: `[T, d]` normalized features plus the
/// per-cycle condition cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessedTrajectory {
    pub unit: u32,
    pub cycles: usize,
    pub feature_count: usize,
    /// Row-major `[T, d]` normalized, denoised, selected features.
    pub features: Vec<f64>,
    /// Raw settings rows `[T, 3]`, kept for the condition encoder.
    pub settings: Vec<f64>,
    pub clusters: Vec<usize>,
}

/// Extract the selected channels of one engine (optionally denoised),
/// row-major `[T, d]`.
fn selected_features(
    traj: &EngineTrajectory,
    selection: &FeatureSelection,
    denoise: bool,
) -> Vec<f64> {
    let d = selection.selected.len();
    let mut features = vec![0.0f64; traj.cycles * d];
    for (j, &ch) in selection.selected.iter().enumerate() {
        let series = traj.sensor_series(ch);
        let series = if denoise { wavelet::denoise(&series) } else { series };
        for (t, v) in series.into_iter().enumerate() {
            features[t * d + j] = v;
        }
    }
    features
}

impl PreprocessModel {
    /// Fit the full preprocessing chain on training engines.
    pub fn fit(train: &[EngineTrajectory], config: PrepConfig, seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Structure("preprocess fit: no training engines".into()));
        }
        let labels: Vec<Vec<f64>> =
            train.iter().map(|t| train_rul_series(t.cycles, config.rul_cap)).collect();
        let selection = select::select_features(train, &labels, config.corr_min, config.std_min)?;

        // Pool raw settings rows for condition clustering.
        let total: usize = train.iter().map(|t| t.cycles).sum();
        let mut settings = Vec::with_capacity(total * SETTINGS);
        for t in train {
            settings.extend_from_slice(&t.settings);
        }
        let mut km_rng = rng::stream(seed, "kmeans");
        let kmeans = kmeans::fit_kmeans(
            &settings,
            SETTINGS,
            config.clusters,
            config.kmeans_max_iter,
            &mut km_rng,
        )?;

        // Normalization statistics come from the (denoised) features, grouped
        // by each row's condition cluster.
        let d = selection.selected.len();
        let mut rows = Vec::with_capacity(total * d);
        let mut assignments = Vec::with_capacity(total);
        for t in train {
            let features = selected_features(t, &selection, config.denoise);
            rows.extend_from_slice(&features);
            for c in 0..t.cycles {
                assignments.push(kmeans.assign(t.settings_at(c)));
            }
        }
        let normalizer = ClusterNormalizer::fit(&rows, d, &assignments, config.clusters)?;

        Ok(PreprocessModel {
            format: PREP_FORMAT.to_string(),
            config,
            selection,
            kmeans,
            normalizer,
        })
    }

    /// Number of feature channels the model emits.
    pub fn feature_count(&self) -> usize {
        self.selection.selected.len()
    }

    /// Apply the frozen chain to one engine.
    pub fn apply(&self, traj: &EngineTrajectory) -> Result<PreprocessedTrajectory> {
        let d = self.feature_count();
        let mut features = selected_features(traj, &self.selection, self.config.denoise);
        let mut clusters = Vec::with_capacity(traj.cycles);
        for t in 0..traj.cycles {
            let cluster = self.kmeans.assign(traj.settings_at(t));
            self.normalizer.apply(cluster, &mut features[t * d..(t + 1) * d])?;
            clusters.push(cluster);
        }
        Ok(PreprocessedTrajectory {
            unit: traj.unit,
            cycles: traj.cycles,
            feature_count: d,
            features,
            settings: traj.settings.clone(),
            clusters,
        })
    }

    /// Serialize to JSON (stable field order, shortest round-trip floats, so
    /// equal models produce byte-identical text).
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("preprocess model serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: PreprocessModel = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("preprocess model parse: {e}")))?;
        if model.format != PREP_FORMAT {
            return Err(Error::Format(format!(
                "unsupported preprocess model format '{}' (expected '{PREP_FORMAT}')",
                model.format
            )));
        }
        Ok(model)
    }
}
