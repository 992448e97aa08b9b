//! Evaluation: point accuracy, zone-stratified error, interval coverage
//! and calibration, maintenance-decision confusion, error-direction
//! analysis, and the JSON report that ties them together.
//!
//! All metrics work on final per-engine predictions in cycle units. Ratios
//! with a zero denominator are reported as missing rather than NaN.

use std::path::Path;

use crate::cmapss::{test_rul_series, DatasetBundle};
use crate::dataset::make_windows;
use crate::error::{Error, Result};
use crate::model::{predict, GaussianPrediction, ModelConfig, ParamStore};
use crate::prep::PreprocessModel;

/// Report schema identifier.
pub const REPORT_FORMAT: &str = "report-v1";
/// MAPE denominator floor, in cycles.
pub const MAPE_EPSILON: f64 = 1.0;
/// Zone boundaries on true RUL: critical ≤ 30 < mid ≤ 80 < early.
pub const ZONE_BOUNDARIES: (f64, f64) = (30.0, 80.0);
/// Maintenance-decision threshold, cycles.
pub const DECISION_THRESHOLD: f64 = 30.0;
/// Thresholds for the decision sweep, cycles.
pub const SWEEP_THRESHOLDS: [f64; 4] = [20.0, 30.0, 40.0, 50.0];
/// Two-sided standard-normal quantiles for the coverage levels.
pub const COVERAGE_LEVELS: [(f64, f64); 3] =
    [(0.90, 1.6449), (0.95, 1.9600), (0.99, 2.5758)];
/// A prediction is flagged high-uncertainty when σ exceeds this fraction
/// of the predicted mean.
pub const HIGH_UNCERTAINTY_FRACTION: f64 = 0.15;

fn check_pair(a: &[f64], b: &[f64]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::Structure(format!(
            "metric inputs differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Structure("metric inputs are empty".into()));
    }
    Ok(a.len())
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Overall point-prediction accuracy.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PointMetrics {
    /// Root mean squared error, cycles.
    pub rmse: f64,
    /// Mean absolute error, cycles.
    pub mae: f64,
    /// Mean absolute percentage error, percent, denominator max(y, 1).
    pub mape: f64,
    /// Explained variance; missing when the targets have zero variance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2: Option<f64>,
}

/// RMSE, MAE, MAPE and R² over true/predicted RUL in cycles.
pub fn point_metrics(y: &[f64], yhat: &[f64]) -> Result<PointMetrics> {
    let n = check_pair(y, yhat)? as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut pct = 0.0;
    for (&t, &p) in y.iter().zip(yhat) {
        let e = p - t;
        sq += e * e;
        abs += e.abs();
        pct += e.abs() / t.max(MAPE_EPSILON);
    }
    let mean_y = y.iter().sum::<f64>() / n;
    let ss_tot: f64 = y.iter().map(|&t| (t - mean_y) * (t - mean_y)).sum();
    let r2 = if ss_tot == 0.0 { None } else { Some(1.0 - sq / ss_tot) };
    Ok(PointMetrics {
        rmse: (sq / n).sqrt(),
        mae: abs / n,
        mape: 100.0 * pct / n,
        r2,
    })
}

/// Error statistics for one RUL zone.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ZoneStats {
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
}

/// Errors stratified by true RUL: critical (y ≤ 30), mid (30 < y ≤ 80),
/// early (y > 80).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ZoneMetrics {
    pub critical: ZoneStats,
    pub mid: ZoneStats,
    pub early: ZoneStats,
}

/// Zone-stratified RMSE and MAE keyed by true RUL. Empty zones report a
/// zero count and missing metrics.
pub fn zone_metrics(y: &[f64], yhat: &[f64]) -> Result<ZoneMetrics> {
    check_pair(y, yhat)?;
    let (lo, hi) = ZONE_BOUNDARIES;
    let stats = |pred: &dyn Fn(f64) -> bool| -> ZoneStats {
        let mut count = 0usize;
        let mut sq = 0.0;
        let mut abs = 0.0;
        for (&t, &p) in y.iter().zip(yhat) {
            if pred(t) {
                count += 1;
                let e = p - t;
                sq += e * e;
                abs += e.abs();
            }
        }
        if count == 0 {
            ZoneStats { count, rmse: None, mae: None }
        } else {
            let n = count as f64;
            ZoneStats { count, rmse: Some((sq / n).sqrt()), mae: Some(abs / n) }
        }
    };
    Ok(ZoneMetrics {
        critical: stats(&|t| t <= lo),
        mid: stats(&|t| t > lo && t <= hi),
        early: stats(&|t| t > hi),
    })
}

/// Coverage at one confidence level.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoverageLevel {
    /// Nominal (expected) coverage.
    pub expected: f64,
    /// Two-sided standard-normal quantile used for the interval.
    pub z: f64,
    /// Fraction of targets inside μ ± z·σ.
    pub actual: f64,
}

/// Coverage at each confidence level plus the mean absolute gap.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationReport {
    pub levels: Vec<CoverageLevel>,
    pub calibration_error: f64,
}

/// Fraction of true values inside the symmetric Gaussian intervals
/// μ ± z·σ at 90/95/99%, and the mean |expected − actual| gap. Intervals
/// are untruncated by default; `truncate` clips the lower bound at zero.
/// Every prediction must carry a positive σ.
pub fn interval_coverage(
    predictions: &[GaussianPrediction],
    y: &[f64],
    truncate: bool,
) -> Result<CalibrationReport> {
    if predictions.len() != y.len() {
        return Err(Error::Structure(format!(
            "coverage: {} predictions vs {} targets",
            predictions.len(),
            y.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::Structure("coverage: no predictions".into()));
    }
    let mut sigmas = Vec::with_capacity(predictions.len());
    for (i, p) in predictions.iter().enumerate() {
        match p.sigma {
            Some(s) if s > 0.0 => sigmas.push(s),
            Some(s) => {
                return Err(Error::Numeric(format!(
                    "coverage: non-positive sigma {s} at index {i}"
                )))
            }
            None => {
                return Err(Error::Numeric(format!(
                    "coverage: prediction {i} has no sigma"
                )))
            }
        }
    }
    let n = y.len() as f64;
    let mut levels = Vec::with_capacity(COVERAGE_LEVELS.len());
    let mut gap = 0.0;
    for (expected, z) in COVERAGE_LEVELS {
        let mut inside = 0usize;
        for ((p, &s), &t) in predictions.iter().zip(&sigmas).zip(y) {
            let mut lo = p.mean - z * s;
            let hi = p.mean + z * s;
            if truncate {
                lo = lo.max(0.0);
            }
            if t >= lo && t <= hi {
                inside += 1;
            }
        }
        let actual = inside as f64 / n;
        gap += (expected - actual).abs();
        levels.push(CoverageLevel { expected, z, actual });
    }
    Ok(CalibrationReport {
        levels,
        calibration_error: gap / COVERAGE_LEVELS.len() as f64,
    })
}

/// Maintenance-decision confusion at one threshold. Positive class =
/// needs maintenance = RUL at or below the threshold. Ratios with a zero
/// denominator are missing.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DecisionReport {
    pub threshold: f64,
    #[serde(rename = "tp")]
    pub true_positive: usize,
    #[serde(rename = "tn")]
    pub true_negative: usize,
    #[serde(rename = "fp")]
    pub false_positive: usize,
    #[serde(rename = "fn")]
    pub false_negative: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fpr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specificity: Option<f64>,
}

/// Confusion counts and derived ratios for "needs maintenance" decisions
/// (value ≤ threshold).
pub fn decision_confusion(yhat: &[f64], y: &[f64], threshold: f64) -> Result<DecisionReport> {
    let n = check_pair(yhat, y)?;
    let (mut tp, mut tn, mut fp, mut fne) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in yhat.iter().zip(y) {
        match (p <= threshold, t <= threshold) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    Ok(DecisionReport {
        threshold,
        true_positive: tp,
        true_negative: tn,
        false_positive: fp,
        false_negative: fne,
        accuracy: ratio(tp + tn, n),
        precision,
        recall,
        f1,
        fpr: ratio(fp, fp + tn),
        fnr: ratio(fne, fne + tp),
        specificity: ratio(tn, tn + fp),
    })
}

/// One DecisionReport per threshold.
pub fn multi_threshold_sweep(
    yhat: &[f64],
    y: &[f64],
    thresholds: &[f64],
) -> Result<Vec<DecisionReport>> {
    thresholds
        .iter()
        .map(|&t| decision_confusion(yhat, y, t))
        .collect()
}

/// Direction of prediction errors: under-prediction (ŷ < y) is the
/// conservative failure mode, over-prediction the risky one.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ErrorDirectionReport {
    pub under_count: usize,
    pub over_count: usize,
    pub exact_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_under_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_over_error: Option<f64>,
    /// Largest over-prediction max(ŷ − y, 0) across samples, cycles.
    pub max_over_prediction: f64,
}

/// Counts and mean magnitudes of under- vs over-predictions.
pub fn error_direction(yhat: &[f64], y: &[f64]) -> Result<ErrorDirectionReport> {
    check_pair(yhat, y)?;
    let (mut under, mut over, mut exact) = (0usize, 0usize, 0usize);
    let (mut under_sum, mut over_sum, mut max_over) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &t) in yhat.iter().zip(y) {
        let e = p - t;
        if e < 0.0 {
            under += 1;
            under_sum += -e;
        } else if e > 0.0 {
            over += 1;
            over_sum += e;
            max_over = max_over.max(e);
        } else {
            exact += 1;
        }
    }
    Ok(ErrorDirectionReport {
        under_count: under,
        over_count: over,
        exact_count: exact,
        mean_under_error: if under > 0 { Some(under_sum / under as f64) } else { None },
        mean_over_error: if over > 0 { Some(over_sum / over as f64) } else { None },
        max_over_prediction: max_over,
    })
}

/// One test engine's final prediction next to its true RUL.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EngineRow {
    pub unit: u32,
    /// True RUL at the last recorded cycle, capped, cycles.
    pub rul_true: f64,
    /// Predicted mean RUL, cycles.
    pub mean: f64,
    /// Predictive standard deviation, cycles; absent when ablated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// Predict each test engine's RUL from the window ending at its last
/// available cycle (left-padded for engines shorter than the window).
pub fn final_predictions(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    preprocess: &PreprocessModel,
    bundle: &DatasetBundle,
    batch: usize,
) -> Result<Vec<EngineRow>> {
    if bundle.test.len() != bundle.test_rul.len() {
        return Err(Error::Structure(format!(
            "{} test engines but {} RUL entries",
            bundle.test.len(),
            bundle.test_rul.len()
        )));
    }
    let cap = preprocess.config.rul_cap;
    let per = cfg.window_len * cfg.feature_count;
    let mut windows = Vec::with_capacity(bundle.test.len() * per);
    let mut settings = Vec::with_capacity(bundle.test.len() * 3);
    let mut units = Vec::with_capacity(bundle.test.len());
    let mut truths = Vec::with_capacity(bundle.test.len());
    for (traj, &final_rul) in bundle.test.iter().zip(&bundle.test_rul) {
        let prepped = preprocess.apply(traj)?;
        let labels = test_rul_series(traj.cycles, final_rul, cap);
        let samples = make_windows(&prepped, &labels, cfg.window_len)?;
        let last = samples
            .last()
            .ok_or_else(|| Error::Structure(format!("engine {} has no windows", traj.unit)))?;
        windows.extend_from_slice(&last.window);
        settings.extend_from_slice(&last.settings);
        units.push(traj.unit);
        truths.push(last.label as f64);
    }
    let preds = predict(cfg, params, &windows, &settings, batch)?;
    Ok(units
        .into_iter()
        .zip(truths)
        .zip(preds)
        .map(|((unit, rul_true), p)| EngineRow { unit, rul_true, mean: p.mean, sigma: p.sigma })
        .collect())
}

/// The full evaluation document written by the CLI.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub dataset: String,
    pub checkpoint_digest: String,
    pub point: PointMetrics,
    pub zones: ZoneMetrics,
    /// Missing when the model carries no uncertainty head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CalibrationReport>,
    pub decision: DecisionReport,
    pub sweep: Vec<DecisionReport>,
    pub direction: ErrorDirectionReport,
    /// Engines whose σ exceeds 15% of the predicted mean.
    pub high_uncertainty_count: usize,
    pub engines: Vec<EngineRow>,
}

/// Assemble every metric over the per-engine rows. Coverage is computed
/// only when all rows carry a σ (a mix is an error).
pub fn build_report(
    dataset: &str,
    checkpoint_digest: &str,
    rows: &[EngineRow],
    threshold: f64,
) -> Result<EvalReport> {
    if rows.is_empty() {
        return Err(Error::Structure("report: no engine rows".into()));
    }
    let y: Vec<f64> = rows.iter().map(|r| r.rul_true).collect();
    let yhat: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let with_sigma = rows.iter().filter(|r| r.sigma.is_some()).count();
    let coverage = if with_sigma == rows.len() {
        let preds: Vec<GaussianPrediction> = rows
            .iter()
            .map(|r| GaussianPrediction { mean: r.mean, log_variance: None, sigma: r.sigma })
            .collect();
        Some(interval_coverage(&preds, &y, false)?)
    } else if with_sigma == 0 {
        None
    } else {
        return Err(Error::Structure(
            "report: some rows carry a sigma and some do not".into(),
        ));
    };
    let high_uncertainty_count = rows
        .iter()
        .filter(|r| r.sigma.is_some_and(|s| s > HIGH_UNCERTAINTY_FRACTION * r.mean))
        .count();
    Ok(EvalReport {
        format: REPORT_FORMAT.to_string(),
        dataset: dataset.to_string(),
        checkpoint_digest: checkpoint_digest.to_string(),
        point: point_metrics(&y, &yhat)?,
        zones: zone_metrics(&y, &yhat)?,
        coverage,
        decision: decision_confusion(&yhat, &y, threshold)?,
        sweep: multi_threshold_sweep(&yhat, &y, &SWEEP_THRESHOLDS)?,
        direction: error_direction(&yhat, &y)?,
        high_uncertainty_count,
        engines: rows.to_vec(),
    })
}

/// Serialize a report with full float precision.
pub fn report_to_json(report: &EvalReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))
}

/// Write the report JSON to a file.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let json = report_to_json(report)?;
    std::fs::write(path, json.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmapss::DatasetId;
    use crate::model::{init_params, ModelConfig};
    use crate::prep::PrepConfig;
    use crate::rng;
    use crate::simulate::{synthetic_bundle, SimSpec};
    use rand::Rng;

    #[test]
    fn perfect_predictions_zero_out_the_point_metrics() {
        let y = [10.0, 20.0, 30.0];
        let m = point_metrics(&y, &y).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.mape, 0.0);
        assert_eq!(m.r2, Some(1.0));
    }

    #[test]
    fn point_metrics_match_the_worked_example() {
        let m = point_metrics(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert!((m.rmse - 10.0f64.sqrt()).abs() < 1e-12);
        assert!((m.mae - 3.0).abs() < 1e-12);
        assert!((m.mape - 20.0).abs() < 1e-12);
        assert!((m.r2.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn constant_mean_prediction_has_zero_r2() {
        let y = [5.0, 10.0, 15.0];
        let m = point_metrics(&y, &[10.0, 10.0, 10.0]).unwrap();
        assert!(m.r2.unwrap().abs() < 1e-12);
    }

    #[test]
    fn r2_is_missing_for_constant_targets() {
        let m = point_metrics(&[7.0, 7.0], &[6.0, 8.0]).unwrap();
        assert_eq!(m.r2, None);
    }

    #[test]
    fn mape_denominator_is_floored_at_one_cycle() {
        let m = point_metrics(&[0.0], &[2.0]).unwrap();
        assert!((m.mape - 200.0).abs() < 1e-12);
        let untouched = point_metrics(&[4.0], &[5.0]).unwrap();
        assert!((untouched.mape - 25.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_dominates_mae_on_random_inputs() {
        let mut r = rng::stream(5, "eval-power-mean");
        for _ in 0..500 {
            let n = r.random_range(1..20);
            let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
            let yhat: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
            let m = point_metrics(&y, &yhat).unwrap();
            assert!(m.rmse >= m.mae - 1e-12);
            assert!(m.r2.is_none_or(|v| v <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn mismatched_or_empty_inputs_are_rejected() {
        assert!(point_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(point_metrics(&[], &[]).is_err());
        assert!(zone_metrics(&[1.0], &[]).is_err());
        assert!(decision_confusion(&[], &[], 30.0).is_err());
    }

    #[test]
    fn zone_metrics_match_the_single_element_example() {
        let z = zone_metrics(&[10.0, 50.0, 100.0], &[12.0, 55.0, 90.0]).unwrap();
        assert_eq!(z.critical.count, 1);
        assert!((z.critical.rmse.unwrap() - 2.0).abs() < 1e-12);
        assert!((z.mid.rmse.unwrap() - 5.0).abs() < 1e-12);
        assert!((z.early.rmse.unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(z.critical.count + z.mid.count + z.early.count, 3);
    }

    #[test]
    fn zone_boundaries_are_closed_on_the_left_zone() {
        let z = zone_metrics(&[30.0, 30.001, 80.0, 80.001], &[0.0; 4]).unwrap();
        assert_eq!(z.critical.count, 1, "y = 30 is critical");
        assert_eq!(z.mid.count, 2, "y = 80 is mid");
        assert_eq!(z.early.count, 1);
    }

    #[test]
    fn empty_zones_report_missing_metrics() {
        let z = zone_metrics(&[5.0, 10.0], &[6.0, 9.0]).unwrap();
        assert_eq!(z.mid, ZoneStats { count: 0, rmse: None, mae: None });
        assert_eq!(z.early.count, 0);
        assert!((z.critical.rmse.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zone_mses_recombine_to_the_overall_mse() {
        let mut r = rng::stream(17, "eval-zones");
        for _ in 0..200 {
            let n = r.random_range(3..40);
            let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
            let yhat: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
            let overall = point_metrics(&y, &yhat).unwrap();
            let zones = zone_metrics(&y, &yhat).unwrap();
            let mut sum = 0.0;
            for z in [&zones.critical, &zones.mid, &zones.early] {
                if let Some(rm) = z.rmse {
                    sum += z.count as f64 * rm * rm;
                }
            }
            assert!((sum - n as f64 * overall.rmse * overall.rmse).abs() < 1e-9);
        }
    }

    fn preds(mu: &[f64], sigma: f64) -> Vec<GaussianPrediction> {
        mu.iter()
            .map(|&m| GaussianPrediction { mean: m, log_variance: None, sigma: Some(sigma) })
            .collect()
    }

    #[test]
    fn centered_predictions_cover_at_every_level() {
        let y = [10.0, 50.0, 90.0];
        let report = interval_coverage(&preds(&y, 4.0), &y, false).unwrap();
        for l in &report.levels {
            assert_eq!(l.actual, 1.0);
        }
        let expected = (0.10 + 0.05 + 0.01) / 3.0;
        assert!((report.calibration_error - expected).abs() < 1e-12);
    }

    #[test]
    fn degenerate_sigmas_cover_nothing() {
        let y = [10.0, 50.0];
        let mu = [11.0, 49.0];
        let report = interval_coverage(&preds(&mu, 1e-12), &y, false).unwrap();
        for l in &report.levels {
            assert_eq!(l.actual, 0.0);
        }
        let expected = (0.90 + 0.95 + 0.99) / 3.0;
        assert!((report.calibration_error - expected).abs() < 1e-12);
    }

    #[test]
    fn coverage_is_monotone_in_the_level() {
        let mut r = rng::stream(23, "eval-coverage");
        for _ in 0..100 {
            let n = r.random_range(2..30);
            let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
            let p: Vec<GaussianPrediction> = (0..n)
                .map(|_| GaussianPrediction {
                    mean: r.random_range(0.0..125.0),
                    log_variance: None,
                    sigma: Some(r.random_range(0.5..30.0)),
                })
                .collect();
            let report = interval_coverage(&p, &y, false).unwrap();
            assert!(report.levels[0].actual <= report.levels[1].actual);
            assert!(report.levels[1].actual <= report.levels[2].actual);
        }
    }

    #[test]
    fn truncation_clips_the_lower_bound_at_zero() {
        // Interval around 0 reaches -16.4 at 90%; truncation excludes -5.
        let p = preds(&[0.0], 10.0);
        let untruncated = interval_coverage(&p, &[-5.0], false).unwrap();
        assert_eq!(untruncated.levels[0].actual, 1.0);
        let truncated = interval_coverage(&p, &[-5.0], true).unwrap();
        assert_eq!(truncated.levels[0].actual, 0.0);
    }

    #[test]
    fn bad_sigmas_are_rejected() {
        assert!(interval_coverage(&preds(&[1.0], 0.0), &[1.0], false).is_err());
        assert!(interval_coverage(&preds(&[1.0], -1.0), &[1.0], false).is_err());
        let no_sigma =
            vec![GaussianPrediction { mean: 1.0, log_variance: None, sigma: None }];
        assert!(interval_coverage(&no_sigma, &[1.0], false).is_err());
    }

    /// Build prediction/target vectors realizing the given confusion counts
    /// at threshold 30.
    fn confusion_vectors(tp: usize, tn: usize, fp: usize, fne: usize) -> (Vec<f64>, Vec<f64>) {
        let mut yhat = Vec::new();
        let mut y = Vec::new();
        for _ in 0..tp {
            yhat.push(10.0);
            y.push(20.0);
        }
        for _ in 0..tn {
            yhat.push(90.0);
            y.push(100.0);
        }
        for _ in 0..fp {
            yhat.push(25.0);
            y.push(60.0);
        }
        for _ in 0..fne {
            yhat.push(40.0);
            y.push(15.0);
        }
        (yhat, y)
    }

    #[test]
    fn confusion_ratios_match_the_reference_counts() {
        let (yhat, y) = confusion_vectors(24, 72, 3, 1);
        let d = decision_confusion(&yhat, &y, 30.0).unwrap();
        assert_eq!(
            (d.true_positive, d.true_negative, d.false_positive, d.false_negative),
            (24, 72, 3, 1)
        );
        let within = |v: Option<f64>, pct: f64| (v.unwrap() * 100.0 - pct).abs() < 0.05;
        assert!(within(d.accuracy, 96.0));
        assert!(within(d.precision, 88.9));
        assert!(within(d.recall, 96.0));
        assert!(within(d.f1, 92.3));
        assert!(within(d.fpr, 4.0));
        assert!(within(d.fnr, 4.0));
        assert!(within(d.specificity, 96.0));
    }

    #[test]
    fn perfect_decisions_have_unit_precision_and_recall() {
        let y = [10.0, 20.0, 50.0, 90.0];
        let d = decision_confusion(&y, &y, 30.0).unwrap();
        assert_eq!(d.false_positive, 0);
        assert_eq!(d.false_negative, 0);
        assert_eq!(d.precision, Some(1.0));
        assert_eq!(d.recall, Some(1.0));
    }

    #[test]
    fn degenerate_denominators_are_missing() {
        // Everything predicted healthy while some engines are critical.
        let d = decision_confusion(&[50.0, 60.0], &[10.0, 70.0], 30.0).unwrap();
        assert_eq!(d.precision, None, "tp + fp = 0");
        assert_eq!(d.recall, Some(0.0));
        assert_eq!(d.f1, None);
        // Boundary membership: exactly-threshold values are positives.
        let b = decision_confusion(&[30.0], &[30.0], 30.0).unwrap();
        assert_eq!(b.true_positive, 1);
    }

    #[test]
    fn decision_counts_partition_by_true_label() {
        let mut r = rng::stream(31, "eval-decision");
        for _ in 0..200 {
            let n = r.random_range(1..50);
            let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
            let yhat: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
            let d = decision_confusion(&yhat, &y, 30.0).unwrap();
            let positives = y.iter().filter(|&&t| t <= 30.0).count();
            assert_eq!(d.true_positive + d.false_negative, positives);
            assert_eq!(d.true_negative + d.false_positive, n - positives);
        }
    }

    #[test]
    fn sweep_carries_thresholds_and_grows_monotonically() {
        let mut r = rng::stream(37, "eval-sweep");
        let n = 60;
        let y: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
        let yhat: Vec<f64> = (0..n).map(|_| r.random_range(0.0..125.0)).collect();
        let sweep = multi_threshold_sweep(&yhat, &y, &SWEEP_THRESHOLDS).unwrap();
        assert_eq!(sweep.len(), 4);
        let mut prev = 0usize;
        for (report, thr) in sweep.iter().zip(SWEEP_THRESHOLDS) {
            assert_eq!(report.threshold, thr);
            let pos = report.true_positive + report.false_negative;
            assert!(pos >= prev, "positive count shrank at threshold {thr}");
            prev = pos;
        }
    }

    #[test]
    fn error_direction_matches_the_worked_examples() {
        let y = [50.0, 50.0];
        let d = error_direction(&[40.0, 70.0], &y).unwrap();
        assert_eq!((d.under_count, d.over_count, d.exact_count), (1, 1, 0));
        assert_eq!(d.mean_under_error, Some(10.0));
        assert_eq!(d.mean_over_error, Some(20.0));
        assert_eq!(d.max_over_prediction, 20.0);

        let all_under = error_direction(&[5.0, 15.0], &[10.0, 20.0]).unwrap();
        assert_eq!(all_under.under_count, 2);
        assert_eq!(all_under.mean_under_error, Some(5.0));
        assert_eq!(all_under.mean_over_error, None);
        assert_eq!(all_under.max_over_prediction, 0.0);

        let exact = error_direction(&y, &y).unwrap();
        assert_eq!(exact.exact_count, 2);
        assert_eq!(exact.under_count + exact.over_count, 0);
    }

    fn sample_rows(with_sigma: bool) -> Vec<EngineRow> {
        let mut r = rng::stream(41, "eval-rows");
        (1..=20)
            .map(|unit| {
                let rul_true: f64 = r.random_range(0.0..125.0);
                EngineRow {
                    unit,
                    rul_true,
                    mean: (rul_true + r.random_range(-15.0..15.0)).max(0.0),
                    sigma: with_sigma.then(|| r.random_range(1.0..25.0)),
                }
            })
            .collect()
    }

    #[test]
    fn report_round_trips_through_json() {
        let rows = sample_rows(true);
        let report = build_report("FD001", "abc123", &rows, DECISION_THRESHOLD).unwrap();
        assert_eq!(report.format, REPORT_FORMAT);
        assert_eq!(report.engines.len(), rows.len());
        assert!(report.coverage.is_some());
        let json = report_to_json(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn report_without_sigmas_omits_coverage() {
        let rows = sample_rows(false);
        let report = build_report("FD003", "d4", &rows, 40.0).unwrap();
        assert!(report.coverage.is_none());
        assert_eq!(report.high_uncertainty_count, 0);
        assert_eq!(report.decision.threshold, 40.0);
        let json = report_to_json(&report).unwrap();
        assert!(!json.contains("\"coverage\""));
    }

    #[test]
    fn high_uncertainty_rows_are_counted() {
        let mut rows = sample_rows(true);
        for r in rows.iter_mut() {
            r.mean = 100.0;
            r.sigma = Some(1.0);
        }
        rows[3].sigma = Some(16.0);
        rows[7].sigma = Some(15.0); // exactly 15%: not flagged
        let report = build_report("FD001", "e5", &rows, DECISION_THRESHOLD).unwrap();
        assert_eq!(report.high_uncertainty_count, 1);
    }

    #[test]
    fn mixed_sigma_rows_are_rejected() {
        let mut rows = sample_rows(true);
        rows[0].sigma = None;
        assert!(build_report("FD001", "f6", &rows, DECISION_THRESHOLD).is_err());
    }

    #[test]
    fn final_predictions_use_the_last_window_per_engine() {
        let spec = SimSpec { train_units: 6, test_units: 4, base_len: 60, conditions: 2 };
        let bundle = synthetic_bundle(DatasetId::FD002, &spec, 13);
        let prep_cfg = PrepConfig { clusters: 2, ..PrepConfig::default() };
        let preprocess =
            PreprocessModel::fit(&bundle.train, prep_cfg, 13).unwrap();
        let cfg = ModelConfig {
            window_len: 16,
            feature_count: preprocess.feature_count(),
            inception_kernels: vec![3],
            inception_filters: 3,
            lstm_units: 4,
            attn_heads: 1,
            attn_key_dim: Some(4),
            cond_units: (4, 3),
            dense_units: (6, 3),
            ..ModelConfig::default()
        };
        let params = init_params::<f32>(&cfg, 13).unwrap();
        let rows = final_predictions(&cfg, &params, &preprocess, &bundle, 8).unwrap();
        assert_eq!(rows.len(), bundle.test.len());

        // Row i must equal a direct prediction on engine i's last window.
        let cap = preprocess.config.rul_cap;
        for (row, (traj, &final_rul)) in
            rows.iter().zip(bundle.test.iter().zip(&bundle.test_rul))
        {
            assert_eq!(row.unit, traj.unit);
            assert!((row.rul_true - final_rul.min(cap)).abs() < 1e-9);
            let prepped = preprocess.apply(traj).unwrap();
            let labels = test_rul_series(traj.cycles, final_rul, cap);
            let samples = make_windows(&prepped, &labels, cfg.window_len).unwrap();
            let last = samples.last().unwrap();
            let direct =
                predict(&cfg, &params, &last.window, &last.settings, 1).unwrap();
            assert!((direct[0].mean - row.mean).abs() < 1e-9);
            assert_eq!(direct[0].sigma.is_some(), row.sigma.is_some());
        }
    }

    #[test]
    fn short_test_engines_are_padded_rather_than_dropped() {
        let spec = SimSpec { train_units: 6, test_units: 4, base_len: 60, conditions: 2 };
        let bundle = synthetic_bundle(DatasetId::FD001, &spec, 29);
        let prep_cfg = PrepConfig { clusters: 2, ..PrepConfig::default() };
        let preprocess = PreprocessModel::fit(&bundle.train, prep_cfg, 29).unwrap();
        // Window longer than every truncated test engine forces padding.
        let cfg = ModelConfig {
            window_len: 64,
            feature_count: preprocess.feature_count(),
            inception_kernels: vec![3],
            inception_filters: 2,
            lstm_units: 3,
            attn_heads: 1,
            attn_key_dim: Some(2),
            cond_units: (3, 2),
            dense_units: (4, 2),
            ..ModelConfig::default()
        };
        let params = init_params::<f32>(&cfg, 29).unwrap();
        let rows = final_predictions(&cfg, &params, &preprocess, &bundle, 4).unwrap();
        assert_eq!(rows.len(), bundle.test.len());
        for row in &rows {
            assert!(row.mean.is_finite());
        }
    }
}
