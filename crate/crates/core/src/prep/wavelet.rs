//! Daubechies-4 wavelet denoising for sensor channels.
//!
//! Decomposition uses symmetric (half-sample) boundary extension and the
//! expansive convolution scheme: each analysis step over a length-`n` input
//! emits `floor((n + L - 1) / 2)` coefficients, and each synthesis step
//! truncates back to the recorded input length, so round trips are exact to
//! floating-point precision. Detail coefficients are soft-thresholded with
//! a universal threshold scaled by 0.5, with the noise scale estimated from
//! the finest detail band via the median absolute deviation.

/// Daubechies-4 analysis low-pass filter (8 taps), kept at the published
/// precision.
#[allow(clippy::excessive_precision)]
pub const DB4_DEC_LO: [f64; 8] = [
    -0.010597401784997278,
    0.032883011666982945,
    0.030841381835986965,
    -0.187034811718881060,
    -0.027983769416983849,
    0.630880767929590380,
    0.714846570552541600,
    0.230377813308855140,
];

const FILTER_LEN: usize = 8;
/// Maximum decomposition depth.
pub const MAX_LEVEL: usize = 4;
/// MAD-to-sigma factor for Gaussian noise (the 0.75 normal quantile).
pub const MAD_SCALE: f64 = 0.6745;
/// Scale applied to the universal threshold.
pub const THRESHOLD_SCALE: f64 = 0.5;

/// The four filters of the orthogonal Daubechies-4 bank.
pub struct FilterBank {
    pub dec_lo: [f64; FILTER_LEN],
    pub dec_hi: [f64; FILTER_LEN],
    pub rec_lo: [f64; FILTER_LEN],
    pub rec_hi: [f64; FILTER_LEN],
}

/// Build the db4 bank: `dec_hi[n] = (-1)^n dec_lo[L-1-n]`, synthesis
/// filters are time-reversed analysis filters.
pub fn db4() -> FilterBank {
    let mut bank = FilterBank {
        dec_lo: DB4_DEC_LO,
        dec_hi: [0.0; FILTER_LEN],
        rec_lo: [0.0; FILTER_LEN],
        rec_hi: [0.0; FILTER_LEN],
    };
    for n in 0..FILTER_LEN {
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        bank.dec_hi[n] = sign * bank.dec_lo[FILTER_LEN - 1 - n];
    }
    for n in 0..FILTER_LEN {
        bank.rec_lo[n] = bank.dec_lo[FILTER_LEN - 1 - n];
        bank.rec_hi[n] = bank.dec_hi[FILTER_LEN - 1 - n];
    }
    bank
}

/// Symmetric (half-sample) extension lookup: `... x1 x0 | x0 x1 ... | xn-1 xn-1 ...`.
fn sym_index(mut k: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    loop {
        if k < 0 {
            k = -k - 1;
        } else if k >= n {
            k = 2 * n - 1 - k;
        } else {
            return k as usize;
        }
    }
}

/// One analysis step: returns `(approximation, detail)`, each of length
/// `floor((n + L - 1) / 2)`.
pub fn dwt_step(signal: &[f64], bank: &FilterBank) -> (Vec<f64>, Vec<f64>) {
    let n = signal.len();
    let out_len = (n + FILTER_LEN - 1) / 2;
    let mut approx = vec![0.0; out_len];
    let mut detail = vec![0.0; out_len];
    for o in 0..out_len {
        let mut a = 0.0;
        let mut d = 0.0;
        for j in 0..FILTER_LEN {
            let k = 2 * o as isize + 1 - j as isize;
            let x = signal[sym_index(k, n)];
            a += bank.dec_lo[j] * x;
            d += bank.dec_hi[j] * x;
        }
        approx[o] = a;
        detail[o] = d;
    }
    (approx, detail)
}

/// One synthesis step: upsampling convolution of both bands, truncated to
/// `target_len` (the length of the signal the matching analysis step saw).
pub fn idwt_step(
    approx: &[f64],
    detail: &[f64],
    bank: &FilterBank,
    target_len: usize,
) -> Vec<f64> {
    debug_assert_eq!(approx.len(), detail.len());
    let na = approx.len();
    let half = FILTER_LEN / 2;
    let rec_len = 2 * na + 2 - FILTER_LEN;
    let mut out = vec![0.0; rec_len];
    let mut o = 0;
    for i in (half - 1)..na {
        let mut even = 0.0;
        let mut odd = 0.0;
        for j in 0..half {
            even += bank.rec_lo[2 * j] * approx[i - j] + bank.rec_hi[2 * j] * detail[i - j];
            odd +=
                bank.rec_lo[2 * j + 1] * approx[i - j] + bank.rec_hi[2 * j + 1] * detail[i - j];
        }
        out[o] = even;
        out[o + 1] = odd;
        o += 2;
    }
    out.truncate(target_len);
    out
}

/// A multi-level decomposition. `details[0]` is the finest band;
/// `input_lens[i]` is the length the i-th analysis step consumed.
pub struct Decomposition {
    pub approx: Vec<f64>,
    pub details: Vec<Vec<f64>>,
    pub input_lens: Vec<usize>,
}

/// Decompose up to [`MAX_LEVEL`] levels, stopping once the running
/// approximation is shorter than the filter.
pub fn wavedec(signal: &[f64], bank: &FilterBank) -> Decomposition {
    let mut approx = signal.to_vec();
    let mut details = Vec::new();
    let mut input_lens = Vec::new();
    while details.len() < MAX_LEVEL && approx.len() >= FILTER_LEN {
        input_lens.push(approx.len());
        let (a, d) = dwt_step(&approx, bank);
        details.push(d);
        approx = a;
    }
    Decomposition { approx, details, input_lens }
}

/// Invert [`wavedec`], truncating each step to its recorded input length.
pub fn waverec(decomp: &Decomposition, bank: &FilterBank) -> Vec<f64> {
    let mut approx = decomp.approx.clone();
    for level in (0..decomp.details.len()).rev() {
        approx = idwt_step(&approx, &decomp.details[level], bank, decomp.input_lens[level]);
    }
    approx
}

/// Robust noise-scale estimate from the finest detail band:
/// `median(|d|) / 0.6745`.
pub fn estimate_noise_sigma(finest_detail: &[f64]) -> f64 {
    if finest_detail.is_empty() {
        return 0.0;
    }
    let mut mags: Vec<f64> = finest_detail.iter().map(|d| d.abs()).collect();
    mags.sort_by(|a, b| a.partial_cmp(b).expect("finite detail coefficients"));
    let mid = mags.len() / 2;
    let median = if mags.len() % 2 == 1 {
        mags[mid]
    } else {
        0.5 * (mags[mid - 1] + mags[mid])
    };
    median / MAD_SCALE
}

/// Scaled universal threshold `0.5 * sigma * sqrt(2 ln n)` for a signal of
/// original length `n`.
pub fn universal_threshold(sigma: f64, n: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    THRESHOLD_SCALE * sigma * (2.0 * (n as f64).ln()).sqrt()
}

/// Soft shrinkage: `sign(x) * max(|x| - tau, 0)`.
pub fn soft_threshold(x: f64, tau: f64) -> f64 {
    let shrunk = x.abs() - tau;
    if shrunk <= 0.0 {
        0.0
    } else {
        shrunk * x.signum()
    }
}

/// Denoise one channel: decompose, soft-threshold every detail band with a
/// threshold derived from the finest band, reconstruct. Signals shorter
/// than the filter pass through unchanged.
pub fn denoise(signal: &[f64]) -> Vec<f64> {
    if signal.len() < FILTER_LEN {
        return signal.to_vec();
    }
    let bank = db4();
    let mut decomp = wavedec(signal, &bank);
    let sigma = estimate_noise_sigma(&decomp.details[0]);
    let tau = universal_threshold(sigma, signal.len());
    for band in decomp.details.iter_mut() {
        for v in band.iter_mut() {
            *v = soft_threshold(*v, tau);
        }
    }
    waverec(&decomp, &bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn filters_are_orthonormal() {
        let bank = db4();
        let e_lo: f64 = bank.dec_lo.iter().map(|v| v * v).sum();
        let e_hi: f64 = bank.dec_hi.iter().map(|v| v * v).sum();
        assert!((e_lo - 1.0).abs() < 1e-12);
        assert!((e_hi - 1.0).abs() < 1e-12);
        let dot: f64 = bank.dec_lo.iter().zip(&bank.dec_hi).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-12, "low/high pass must be orthogonal, dot = {dot}");
        let sum_lo: f64 = bank.dec_lo.iter().sum();
        assert!((sum_lo - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn analysis_lengths_follow_expansive_rule() {
        let bank = db4();
        for n in [8usize, 9, 30, 64, 100, 127] {
            let signal: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
            let (a, d) = dwt_step(&signal, &bank);
            assert_eq!(a.len(), (n + 7) / 2, "approx length for n={n}");
            assert_eq!(d.len(), (n + 7) / 2, "detail length for n={n}");
        }
    }

    #[test]
    fn round_trip_is_exact_across_lengths() {
        let bank = db4();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [8usize, 9, 30, 31, 64, 100, 128, 300, 511, 512] {
            let signal: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let decomp = wavedec(&signal, &bank);
            let rec = waverec(&decomp, &bank);
            assert_eq!(rec.len(), n);
            let max_err = signal
                .iter()
                .zip(&rec)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-9, "round trip error {max_err} at n={n}");
        }
    }

    #[test]
    fn decomposition_depth_caps_at_four_and_respects_filter_length() {
        let bank = db4();
        let long: Vec<f64> = (0..512).map(|i| i as f64).collect();
        assert_eq!(wavedec(&long, &bank).details.len(), 4);
        // n=30 -> 18 -> 12 -> 9 -> 8, every step long enough: 4 levels.
        let med: Vec<f64> = (0..30).map(|i| i as f64).collect();
        assert_eq!(wavedec(&med, &bank).details.len(), 4);
        // n=9 -> 8 coefficients after one step... first step allowed, next
        // sees length 8 which still admits one more, then 7 stops it.
        let short: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let d = wavedec(&short, &bank);
        assert!(!d.details.is_empty() && d.details.len() <= 4);
        let tiny: Vec<f64> = (0..7).map(|i| i as f64).collect();
        assert_eq!(wavedec(&tiny, &bank).details.len(), 0);
    }

    #[test]
    fn noise_sigma_matches_hand_values() {
        assert!((estimate_noise_sigma(&[0.6745, -0.6745, 0.6745]) - 1.0).abs() < 1e-12);
        assert!((estimate_noise_sigma(&[1.349]) - 2.0).abs() < 1e-12);
        assert_eq!(estimate_noise_sigma(&[]), 0.0);
    }

    #[test]
    fn universal_threshold_matches_frozen_value() {
        // 0.5 * sqrt(2 ln 1024) = 1.8616487055...
        assert!((universal_threshold(1.0, 1024) - 1.861_648_705_5).abs() < 1e-9);
        assert_eq!(universal_threshold(1.0, 1), 0.0);
    }

    #[test]
    fn soft_threshold_shrinks_toward_zero() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(2.0, 0.0), 2.0);
    }

    #[test]
    fn short_signals_pass_through() {
        let s = [1.0, 2.0, 3.0];
        assert_eq!(denoise(&s), s.to_vec());
    }

    #[test]
    fn constant_signals_survive_denoising() {
        let s = vec![7.5; 100];
        let out = denoise(&s);
        for v in &out {
            assert!((v - 7.5).abs() < 1e-9);
        }
    }

    #[test]
    fn denoising_reduces_error_against_clean_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 256;
        let clean: Vec<f64> = (0..n).map(|i| (i as f64 * 0.08).sin() * 5.0).collect();
        let noisy: Vec<f64> = clean
            .iter()
            .map(|&v| {
                // Box-Muller keeps this free of distribution helpers.
                let u1: f64 = rng.random_range(1e-12..1.0);
                let u2: f64 = rng.random_range(0.0..1.0);
                let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                v + 0.4 * g
            })
            .collect();
        let den = denoise(&noisy);
        let mse = |a: &[f64]| -> f64 {
            a.iter().zip(&clean).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64
        };
        let before = mse(&noisy);
        let after = mse(&den);
        assert!(
            after < before,
            "denoising should reduce error: before {before}, after {after}"
        );
    }

    #[test]
    fn denoising_output_length_matches_input() {
        for n in [8usize, 13, 30, 100, 257] {
            let s: Vec<f64> = (0..n).map(|i| (i as f64 * 0.2).cos()).collect();
            assert_eq!(denoise(&s).len(), n);
        }
    }
}
