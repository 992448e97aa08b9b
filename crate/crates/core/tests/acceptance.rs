//! Acceptance gate. Each test covers one numbered criterion and prints a
//! single `criterion N: PASS/FAIL/SKIP` line (visible with `--nocapture`;
//! cargo replays the output of failing tests). Criteria 9–11 and 13 need
//! the real FD001 files under `$RUL_DATA_DIR` or `<repo>/data` and are
//! skipped loudly when the data is absent; criterion 13 is `#[ignore]`d on
//! top of that because it is a full multi-hour training run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use rul_core::autodiff::{Tape, Tensor, Var};
use rul_core::cmapss::{load_bundle, DatasetBundle, DatasetId};
use rul_core::eval::{
    build_report, decision_confusion, error_direction, final_predictions, interval_coverage,
    point_metrics, zone_metrics,
};
use rul_core::gradcheck::{full_model_report, primitive_reports, reduced_config};
use rul_core::model::{init_params, param_count, predict, GaussianPrediction, ModelConfig};
use rul_core::prep::wavelet::{db4, denoise, soft_threshold, wavedec, waverec};
use rul_core::prep::{PrepConfig, PreprocessModel};
use rul_core::rng;
use rul_core::train::{
    gaussian_nll, rul_sample_weight, train, LossConfig, TrainConfig, TrainResult,
};

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} ({name}): {tag} — {detail}");
    assert!(ok, "criterion {n} ({name}): {detail}");
}

fn skip(n: usize, name: &str) {
    println!(
        "criterion {n:>2} ({name}): SKIP — FD001 data not present \
         (looked under $RUL_DATA_DIR and <repo>/data)"
    );
}

/// Directory holding the real FD001 files, if any.
fn fd001_dir() -> Option<PathBuf> {
    let mut candidates: Vec<PathBuf> = Vec::new();
    if let Some(dir) = std::env::var_os("RUL_DATA_DIR") {
        candidates.push(PathBuf::from(dir));
    }
    candidates.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    candidates.into_iter().find(|d| d.join("train_FD001.txt").exists())
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let mut worst_prim = (0.0f64, String::new());
    for (label, report) in primitive_reports(42).unwrap() {
        if report.max_rel_err > worst_prim.0 {
            worst_prim = (report.max_rel_err, format!("{label} at {}", report.worst));
        }
    }
    let full = full_model_report(42).unwrap();
    let elapsed = started.elapsed();

    let ok = worst_prim.0 < 1e-6 && full.max_rel_err < 1e-4 && elapsed.as_secs() < 120;
    verdict(
        1,
        "gradient correctness",
        ok,
        &format!(
            "primitives worst {:.2e} ({}) < 1e-6, full model {:.2e} at {} < 1e-4, \
             {} coords, {:.1}s < 120s",
            worst_prim.0,
            worst_prim.1,
            full.max_rel_err,
            full.worst,
            full.coords_checked,
            elapsed.as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- 2

/// Deliberately plain loop-based re-derivations of every reported metric,
/// written without reference to the library implementations.
mod oracle {
    pub fn rmse(y: &[f64], yhat: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..y.len() {
            total += (yhat[k] - y[k]) * (yhat[k] - y[k]);
        }
        (total / y.len() as f64).sqrt()
    }

    pub fn mae(y: &[f64], yhat: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..y.len() {
            total += (yhat[k] - y[k]).abs();
        }
        total / y.len() as f64
    }

    pub fn mape(y: &[f64], yhat: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..y.len() {
            let denom = if y[k] < 1.0 { 1.0 } else { y[k] };
            total += (yhat[k] - y[k]).abs() / denom;
        }
        100.0 * total / y.len() as f64
    }

    pub fn r2(y: &[f64], yhat: &[f64]) -> Option<f64> {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for k in 0..y.len() {
            ss_res += (yhat[k] - y[k]) * (yhat[k] - y[k]);
            ss_tot += (y[k] - mean) * (y[k] - mean);
        }
        if ss_tot == 0.0 {
            None
        } else {
            Some(1.0 - ss_res / ss_tot)
        }
    }

    /// (count, rmse, mae) for the subset of samples selected by `keep`.
    pub fn zone(y: &[f64], yhat: &[f64], keep: impl Fn(f64) -> bool) -> ZoneOracle {
        let mut ys = Vec::new();
        let mut ps = Vec::new();
        for k in 0..y.len() {
            if keep(y[k]) {
                ys.push(y[k]);
                ps.push(yhat[k]);
            }
        }
        if ys.is_empty() {
            ZoneOracle { count: 0, rmse: None, mae: None }
        } else {
            ZoneOracle {
                count: ys.len(),
                rmse: Some(rmse(&ys, &ps)),
                mae: Some(mae(&ys, &ps)),
            }
        }
    }

    pub struct ZoneOracle {
        pub count: usize,
        pub rmse: Option<f64>,
        pub mae: Option<f64>,
    }

    /// Per-level actual coverage at 90/95/99% plus the mean absolute gap.
    pub fn coverage(
        means: &[f64],
        sigmas: &[f64],
        y: &[f64],
        truncate: bool,
    ) -> (Vec<f64>, f64) {
        let mut actuals = Vec::new();
        let mut gap = 0.0;
        for (nominal, z) in [(0.90, 1.6449), (0.95, 1.9600), (0.99, 2.5758)] {
            let mut inside = 0usize;
            for k in 0..y.len() {
                let mut low = means[k] - z * sigmas[k];
                if truncate && low < 0.0 {
                    low = 0.0;
                }
                let high = means[k] + z * sigmas[k];
                if y[k] >= low && y[k] <= high {
                    inside += 1;
                }
            }
            let actual = inside as f64 / y.len() as f64;
            gap += (nominal - actual).abs();
            actuals.push(actual);
        }
        (actuals, gap / 3.0)
    }

    pub struct ConfusionOracle {
        pub tp: usize,
        pub tn: usize,
        pub fp: usize,
        pub fnc: usize,
        pub accuracy: Option<f64>,
        pub precision: Option<f64>,
        pub recall: Option<f64>,
        pub f1: Option<f64>,
        pub fpr: Option<f64>,
        pub fnr: Option<f64>,
        pub specificity: Option<f64>,
    }

    pub fn confusion(yhat: &[f64], y: &[f64], threshold: f64) -> ConfusionOracle {
        let (mut tp, mut tn, mut fp, mut fnc) = (0usize, 0usize, 0usize, 0usize);
        for k in 0..y.len() {
            let predicted_due = yhat[k] <= threshold;
            let actually_due = y[k] <= threshold;
            if predicted_due && actually_due {
                tp += 1;
            } else if predicted_due {
                fp += 1;
            } else if actually_due {
                fnc += 1;
            } else {
                tn += 1;
            }
        }
        let frac = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
        let precision = frac(tp, tp + fp);
        let recall = frac(tp, tp + fnc);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        ConfusionOracle {
            tp,
            tn,
            fp,
            fnc,
            accuracy: frac(tp + tn, y.len()),
            precision,
            recall,
            f1,
            fpr: frac(fp, fp + tn),
            fnr: frac(fnc, fnc + tp),
            specificity: frac(tn, tn + fp),
        }
    }

    pub struct DirectionOracle {
        pub under: usize,
        pub over: usize,
        pub exact: usize,
        pub mean_under: Option<f64>,
        pub mean_over: Option<f64>,
        pub max_over: f64,
    }

    pub fn direction(yhat: &[f64], y: &[f64]) -> DirectionOracle {
        let (mut under, mut over, mut exact) = (0usize, 0usize, 0usize);
        let (mut under_total, mut over_total, mut max_over) = (0.0, 0.0, 0.0f64);
        for k in 0..y.len() {
            if yhat[k] < y[k] {
                under += 1;
                under_total += y[k] - yhat[k];
            } else if yhat[k] > y[k] {
                over += 1;
                over_total += yhat[k] - y[k];
                if yhat[k] - y[k] > max_over {
                    max_over = yhat[k] - y[k];
                }
            } else {
                exact += 1;
            }
        }
        DirectionOracle {
            under,
            over,
            exact,
            mean_under: if under > 0 { Some(under_total / under as f64) } else { None },
            mean_over: if over > 0 { Some(over_total / over as f64) } else { None },
            max_over,
        }
    }
}

fn opt_close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-10,
        _ => false,
    }
}

#[test]
fn criterion_02_metric_oracle_equivalence() {
    let mut r = rng::stream(777, "acceptance-oracle");
    let mut worst = 0.0f64;
    for instance in 0..1000usize {
        let n = r.random_range(1..=500usize);
        let mut y = Vec::with_capacity(n);
        let mut yhat = Vec::with_capacity(n);
        match instance % 8 {
            // Degenerate shapes that exercise every missing-ratio branch.
            0 => {
                let v = r.random_range(0.0..130.0);
                for _ in 0..n {
                    y.push(v);
                    yhat.push(v + r.random_range(-20.0..20.0));
                }
            }
            1 => {
                for _ in 0..n {
                    let t = r.random_range(0.0..30.0);
                    y.push(t);
                    yhat.push(t + r.random_range(-10.0..10.0));
                }
            }
            2 => {
                for _ in 0..n {
                    let t = r.random_range(81.0..130.0);
                    y.push(t);
                    yhat.push(t + r.random_range(-10.0..10.0));
                }
            }
            3 => {
                for _ in 0..n {
                    let t = r.random_range(0.0..130.0);
                    y.push(t);
                    yhat.push(t);
                }
            }
            _ => {
                for _ in 0..n {
                    let t: f64 = r.random_range(0.0..130.0);
                    y.push(t);
                    yhat.push((t + r.random_range(-40.0..40.0)).max(0.0));
                }
            }
        }

        let mut close = |a: f64, b: f64| {
            worst = worst.max((a - b).abs());
            (a - b).abs() <= 1e-10
        };

        let point = point_metrics(&y, &yhat).unwrap();
        assert!(close(point.rmse, oracle::rmse(&y, &yhat)), "rmse, instance {instance}");
        assert!(close(point.mae, oracle::mae(&y, &yhat)), "mae, instance {instance}");
        assert!(close(point.mape, oracle::mape(&y, &yhat)), "mape, instance {instance}");
        assert!(opt_close(point.r2, oracle::r2(&y, &yhat)), "r2, instance {instance}");

        let zones = zone_metrics(&y, &yhat).unwrap();
        for (got, want) in [
            (&zones.critical, oracle::zone(&y, &yhat, |t| t <= 30.0)),
            (&zones.mid, oracle::zone(&y, &yhat, |t| t > 30.0 && t <= 80.0)),
            (&zones.early, oracle::zone(&y, &yhat, |t| t > 80.0)),
        ] {
            assert_eq!(got.count, want.count, "zone count, instance {instance}");
            assert!(opt_close(got.rmse, want.rmse), "zone rmse, instance {instance}");
            assert!(opt_close(got.mae, want.mae), "zone mae, instance {instance}");
        }

        let sigmas: Vec<f64> = (0..n).map(|_| r.random_range(0.5..25.0)).collect();
        let means: Vec<f64> = yhat.clone();
        let preds: Vec<GaussianPrediction> = means
            .iter()
            .zip(&sigmas)
            .map(|(&m, &s)| GaussianPrediction {
                mean: m,
                log_variance: None,
                sigma: Some(s),
            })
            .collect();
        let truncate = instance % 2 == 0;
        let cal = interval_coverage(&preds, &y, truncate).unwrap();
        let (actuals, gap) = oracle::coverage(&means, &sigmas, &y, truncate);
        for (level, &want) in cal.levels.iter().zip(&actuals) {
            assert!(close(level.actual, want), "coverage, instance {instance}");
        }
        assert!(close(cal.calibration_error, gap), "calibration, instance {instance}");

        let threshold = [20.0, 30.0, 40.0, 50.0][instance % 4];
        let dec = decision_confusion(&yhat, &y, threshold).unwrap();
        let want = oracle::confusion(&yhat, &y, threshold);
        assert_eq!(
            (dec.true_positive, dec.true_negative, dec.false_positive, dec.false_negative),
            (want.tp, want.tn, want.fp, want.fnc),
            "confusion counts, instance {instance}"
        );
        for (got, want, what) in [
            (dec.accuracy, want.accuracy, "accuracy"),
            (dec.precision, want.precision, "precision"),
            (dec.recall, want.recall, "recall"),
            (dec.f1, want.f1, "f1"),
            (dec.fpr, want.fpr, "fpr"),
            (dec.fnr, want.fnr, "fnr"),
            (dec.specificity, want.specificity, "specificity"),
        ] {
            assert!(opt_close(got, want), "{what}, instance {instance}");
        }

        let dir = error_direction(&yhat, &y).unwrap();
        let want = oracle::direction(&yhat, &y);
        assert_eq!(
            (dir.under_count, dir.over_count, dir.exact_count),
            (want.under, want.over, want.exact),
            "direction counts, instance {instance}"
        );
        assert!(opt_close(dir.mean_under_error, want.mean_under), "instance {instance}");
        assert!(opt_close(dir.mean_over_error, want.mean_over), "instance {instance}");
        assert!(close(dir.max_over_prediction, want.max_over), "instance {instance}");
    }
    verdict(
        2,
        "metric oracle equivalence",
        true,
        &format!("1000 randomized instances, worst disagreement {worst:.2e} ≤ 1e-10"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_confusion_ratio_reproduction() {
    // 24 true positives, 72 true negatives, 3 false positives, 1 false
    // negative at a 30-cycle threshold.
    let mut yhat = Vec::new();
    let mut y = Vec::new();
    let mut push = |pred: f64, truth: f64, times: usize| {
        for _ in 0..times {
            yhat.push(pred);
            y.push(truth);
        }
    };
    push(10.0, 10.0, 24);
    push(50.0, 50.0, 72);
    push(10.0, 50.0, 3);
    push(50.0, 10.0, 1);

    let dec = decision_confusion(&yhat, &y, 30.0).unwrap();
    let counts_ok = (dec.true_positive, dec.true_negative, dec.false_positive, dec.false_negative)
        == (24, 72, 3, 1);

    let expected = [
        ("accuracy", dec.accuracy, 96.0),
        ("precision", dec.precision, 88.9),
        ("recall", dec.recall, 96.0),
        ("f1", dec.f1, 92.3),
        ("fpr", dec.fpr, 4.0),
        ("fnr", dec.fnr, 4.0),
        ("specificity", dec.specificity, 96.0),
    ];
    let mut worst = 0.0f64;
    let mut ok = counts_ok;
    for (what, got, want_pct) in expected {
        let got_pct = 100.0 * got.unwrap_or(f64::NAN);
        let gap = (got_pct - want_pct).abs();
        worst = worst.max(gap);
        ok &= gap <= 0.05;
        assert!(gap <= 0.05, "{what}: {got_pct:.4}% vs {want_pct}%");
    }
    verdict(
        3,
        "confusion ratios",
        ok,
        &format!("counts (24,72,3,1), worst ratio gap {worst:.4} pp ≤ 0.05 pp"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_calibration_sanity() {
    // Targets drawn from the predicted Gaussians themselves, so nominal
    // coverage is exact in expectation; the seed is frozen for CI.
    let mut r = rng::stream(4242, "acceptance-calibration");
    let m = 20000usize;
    let mut preds = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    for _ in 0..m {
        let mean = r.random_range(20.0..120.0);
        let sigma = r.random_range(1.0..15.0);
        let z: f64 = StandardNormal.sample(&mut r);
        preds.push(GaussianPrediction { mean, log_variance: None, sigma: Some(sigma) });
        y.push(mean + sigma * z);
    }
    let cal = interval_coverage(&preds, &y, false).unwrap();

    let mut ok = cal.calibration_error < 0.006;
    let mut detail = String::new();
    for (level, bound) in cal.levels.iter().zip([0.007, 0.005, 0.003]) {
        let gap = (level.actual - level.expected).abs();
        ok &= gap <= bound;
        detail.push_str(&format!(
            "{:.0}%: {:.2}% (gap {:.3} pp ≤ {:.1} pp), ",
            100.0 * level.expected,
            100.0 * level.actual,
            100.0 * gap,
            100.0 * bound
        ));
    }
    detail.push_str(&format!("calibration error {:.5} < 0.006", cal.calibration_error));
    verdict(4, "calibration sanity", ok, &detail);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_wavelet_suite() {
    let bank = db4();

    // Zero-threshold round trip on 100 random signals.
    let mut r = rng::stream(55, "acceptance-wavelet");
    let mut worst_rt = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(64..=512usize);
        let signal: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut decomp = wavedec(&signal, &bank);
        for level in &mut decomp.details {
            for c in level.iter_mut() {
                *c = soft_threshold(*c, 0.0);
            }
        }
        let back = waverec(&decomp, &bank);
        assert_eq!(back.len(), signal.len());
        for (a, b) in signal.iter().zip(&back) {
            worst_rt = worst_rt.max((a - b).abs());
        }
    }
    let round_trip_ok = worst_rt < 1e-6;

    // Constant signals pass through the full denoiser unchanged.
    let mut worst_const = 0.0f64;
    for (value, len) in [(-5.0, 8), (0.37, 64), (1000.0, 257)] {
        let signal = vec![value; len];
        let out = denoise(&signal);
        for (a, b) in signal.iter().zip(&out) {
            worst_const = worst_const.max((a - b).abs());
        }
    }
    let const_ok = worst_const < 1e-8;

    // Noisy sine: the universal threshold should claw back ≥ 5 dB.
    let n = 512;
    let clean: Vec<f64> =
        (0..n).map(|i| (2.0 * std::f64::consts::PI * 3.0 * i as f64 / n as f64).sin()).collect();
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut nr = rng::stream(56, "acceptance-wavelet-noise");
    let noisy: Vec<f64> = clean.iter().map(|&c| c + noise.sample(&mut nr)).collect();
    let denoised = denoise(&noisy);
    let snr = |x: &[f64]| {
        let signal_power: f64 = clean.iter().map(|c| c * c).sum();
        let err_power: f64 = x.iter().zip(&clean).map(|(v, c)| (v - c) * (v - c)).sum();
        10.0 * (signal_power / err_power).log10()
    };
    let gain = snr(&denoised) - snr(&noisy);
    let snr_ok = gain >= 5.0;

    verdict(
        5,
        "wavelet suite",
        round_trip_ok && const_ok && snr_ok,
        &format!(
            "round trip {worst_rt:.2e} < 1e-6, constants {worst_const:.2e} < 1e-8, \
             SNR gain {gain:.1} dB ≥ 5 dB"
        ),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_weight_tier_exactness() {
    let cases =
        [(0.0, 2.5), (29.999, 2.5), (30.0, 1.5), (79.999, 1.5), (80.0, 1.0), (125.0, 1.0)];
    let mut ok = true;
    for (y, want) in cases {
        let got = rul_sample_weight(y);
        ok &= got == want;
        assert_eq!(got, want, "weight at y = {y}");
    }
    verdict(6, "weight tiers", ok, "exact at y ∈ {0, 29.999, 30, 79.999, 80, 125}");
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_loss_arithmetic() {
    // Perfect point prediction with unit variance ratio: only the
    // 0.5·ln(2π) term survives.
    let mut nll_ok = true;
    for y in [0.0, 0.4, 1.0, 77.0] {
        nll_ok &= (gaussian_nll(y, y, 0.0, 1.0) - 0.918939).abs() < 1e-5;
    }

    // With log-variance ≡ 0 and kernels ≡ 0 the penalty terms contribute
    // exactly nothing: the loss equals the penalty-free loss bit for bit.
    let cfg = ModelConfig::default();
    let labels = [20.0, 60.0, 100.0];
    let eval_loss = |loss_cfg: &LossConfig| -> f64 {
        let tape: Tape<f64> = Tape::new();
        let mut store = rul_core::model::ParamStore::<f64>::default();
        store.insert("k", Tensor::zeros(&[3, 3]), true, true);
        let leaves: BTreeMap<String, Var> =
            [("k".to_string(), tape.leaf(Tensor::zeros(&[3, 3]), true))].into();
        let mean = tape.leaf(Tensor::from_f64(vec![3], &[0.1, 0.5, 0.9]).unwrap(), false);
        let log_var = tape.leaf(Tensor::zeros(&[3]), false);
        let loss = rul_core::train::build_loss(
            &tape,
            &cfg,
            loss_cfg,
            &store,
            &leaves,
            mean,
            Some(log_var),
            &labels,
        )
        .unwrap();
        tape.value(loss).item().unwrap()
    };
    let with_penalties = eval_loss(&LossConfig::default());
    let without = eval_loss(&LossConfig { logvar_penalty: 0.0, l2: 0.0 });
    let penalties_ok = with_penalties == without;

    verdict(
        7,
        "loss arithmetic",
        nll_ok && penalties_ok,
        &format!(
            "nll(y=μ, lv=0, w=1) = {:.6} = 0.918939 ± 1e-5, zero-input penalties add \
             exactly 0 ({with_penalties} == {without})",
            gaussian_nll(1.0, 1.0, 0.0, 1.0)
        ),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_logvar_clipping_and_fresh_head() {
    let cfg = reduced_config();
    let n = 10_000usize;
    let mut r = rng::stream(88, "acceptance-clip");
    let windows: Vec<f32> = (0..n * cfg.window_len * cfg.feature_count)
        .map(|_| r.random_range(-1.0f32..1.0))
        .collect();
    let settings: Vec<f32> = (0..n * 3).map(|_| r.random_range(-0.8f32..0.8)).collect();

    // Freshly initialized: zero kernel + unit bias make the raw
    // log-variance exactly 1.0 everywhere, comfortably inside the clip.
    let store = init_params::<f32>(&cfg, 5).unwrap();
    let fresh = predict(&cfg, &store, &windows, &settings, 512).unwrap();
    let fresh_ok = fresh.iter().all(|p| p.log_variance == Some(1.0));

    // Rescaled head: force raw values far outside [−5, 3] in both
    // directions and confirm the clip binds at exactly the bounds.
    let mut store = store;
    let d2 = cfg.dense_units.1;
    let spread: Vec<f32> =
        (0..d2).map(|j| if j % 2 == 0 { 40.0 } else { -40.0 }).collect();
    store.insert("head.logvar.kernel", Tensor::new(vec![d2, 1], spread).unwrap(), true, true);
    store.insert("head.logvar.bias", Tensor::zeros(&[1]), true, false);
    let wild = predict(&cfg, &store, &windows, &settings, 512).unwrap();
    let mut low = f64::INFINITY;
    let mut high = f64::NEG_INFINITY;
    for p in &wild {
        let lv = p.log_variance.unwrap();
        low = low.min(lv);
        high = high.max(lv);
    }
    let clip_ok = low >= -5.0 && high <= 3.0 && low == -5.0 && high == 3.0;

    verdict(
        8,
        "log-variance clipping",
        fresh_ok && clip_ok,
        &format!(
            "fresh head: 10⁴ outputs all exactly 1.0; rescaled head: range \
             [{low}, {high}] pinned to [−5, 3]"
        ),
    );
}

// ---------------------------------------------------------------- 9–11 (need real FD001)

#[test]
fn criterion_09_fd001_feature_selection() {
    let Some(dir) = fd001_dir() else {
        skip(9, "feature selection");
        return;
    };
    let bundle = load_bundle(DatasetId::FD001, &dir).unwrap();
    let model = PreprocessModel::fit(&bundle.train, PrepConfig::default(), 42).unwrap();
    let got: Vec<usize> = model.selection.selected.iter().map(|i| i + 1).collect();
    let want = vec![2usize, 3, 4, 7, 8, 11, 12, 13, 15, 17, 20, 21];
    // A near-miss must be reported with the full sets, never patched over.
    verdict(
        9,
        "feature selection",
        got == want,
        &format!("selected sensors {got:?}, reference {want:?}"),
    );
}

/// Reduced geometry used by the smoke and determinism criteria.
fn smoke_setup(dir: &Path, epochs: usize) -> (DatasetBundle, PrepConfig, ModelConfig, TrainConfig) {
    let mut bundle = load_bundle(DatasetId::FD001, dir).unwrap();
    bundle.train.truncate(40);
    let model = ModelConfig { inception_filters: 16, lstm_units: 32, ..ModelConfig::default() };
    let train_cfg = TrainConfig { epochs, augment_factor: 1, ..TrainConfig::default() };
    (bundle, PrepConfig::default(), model, train_cfg)
}

fn run_smoke(dir: &Path, epochs: usize) -> TrainResult {
    let (bundle, prep, model, cfg) = smoke_setup(dir, epochs);
    train(&bundle, prep, model, &cfg, 42, |_| {}).unwrap()
}

#[test]
fn criterion_10_fd001_smoke_training() {
    let Some(dir) = fd001_dir() else {
        skip(10, "smoke training");
        return;
    };
    let result = run_smoke(&dir, 25);

    let finite = result
        .history
        .iter()
        .all(|s| s.train_loss.is_finite() && s.val_rmse.is_finite() && s.lr.is_finite());
    let lr_monotone = result.history.windows(2).all(|w| w[1].lr <= w[0].lr);
    let best = result.meta.best_val_rmse;
    let min_val = result.history.iter().map(|s| s.val_rmse).fold(f64::INFINITY, f64::min);
    let restored_ok = (best - min_val).abs() < 1e-6;
    let ok = finite && lr_monotone && restored_ok && best <= 35.0;
    verdict(
        10,
        "smoke training",
        ok,
        &format!(
            "best val RMSE {best:.2} ≤ 35 at epoch {} of {}, finite history, \
             non-increasing lr, restored best = history min",
            result.meta.best_epoch, result.meta.epochs_run
        ),
    );
}

#[test]
fn criterion_11_fd001_determinism() {
    let Some(dir) = fd001_dir() else {
        skip(11, "determinism");
        return;
    };
    let a = run_smoke(&dir, 3);
    let b = run_smoke(&dir, 3);
    let histories_ok = a.history.len() == 3
        && b.history.len() == 3
        && a.history.iter().zip(&b.history).all(|(x, y)| {
            x.epoch == y.epoch
                && x.train_loss == y.train_loss
                && x.val_rmse == y.val_rmse
                && x.lr == y.lr
        });
    let json_a = a.preprocess.to_json().unwrap();
    let json_b = b.preprocess.to_json().unwrap();
    let ok = histories_ok && json_a == json_b;
    verdict(
        11,
        "determinism",
        ok,
        &format!(
            "two runs: first-3-epoch histories identical = {histories_ok}, \
             preprocess JSON byte-identical = {}",
            json_a == json_b
        ),
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_parameter_budget() {
    let count = param_count(&ModelConfig::default()).unwrap();
    let ok = (390_000..=585_000).contains(&count);
    verdict(
        12,
        "parameter budget",
        ok,
        &format!("default config has {count} trainable parameters ∈ [390K, 585K]"),
    );
}

// ---------------------------------------------------------------- 13 (non-gating, hours)

#[test]
#[ignore = "full FD001 training takes hours; run explicitly to record results"]
fn criterion_13_fd001_full_training() {
    let Some(dir) = fd001_dir() else {
        skip(13, "full training");
        return;
    };
    let bundle = load_bundle(DatasetId::FD001, &dir).unwrap();
    let result = train(
        &bundle,
        PrepConfig::default(),
        ModelConfig::default(),
        &TrainConfig::default(),
        42,
        |s| println!("epoch {:>3}  loss {:.5}  val rmse {:.2}", s.epoch, s.train_loss, s.val_rmse),
    )
    .unwrap();
    let rows =
        final_predictions(&result.config, &result.params, &result.preprocess, &bundle, 256)
            .unwrap();
    let report = build_report("FD001", "-", &rows, 30.0).unwrap();
    let critical = report.zones.critical.rmse;
    // Recorded, not gated: headline numbers from a long CPU run vary.
    println!(
        "criterion 13 (full training): RECORDED — test RMSE {:.2} (target ≤ 22), \
         critical-zone RMSE {:?} (target ≤ 10), best val {:.2} at epoch {}",
        report.point.rmse, critical, result.meta.best_val_rmse, result.meta.best_epoch
    );
}
