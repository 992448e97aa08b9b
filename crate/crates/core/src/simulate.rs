//! Synthetic run-to-failure fleets in the turbofan text layout.
//!
//! The generator mimics the qualitative structure of the real subsets:
//! a few operating regimes expressed through jittered settings, sensors
//! that drift with accumulated wear, channels that never move, and
//! channels that are pure chatter. It lets the whole pipeline — selection,
//! denoising, clustering, training, evaluation, the CLI — run end-to-end
//! in tests without the original data files.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cmapss::{format_trajectories, DatasetBundle, DatasetId, EngineTrajectory, SENSORS};
use crate::error::{Error, Result};
use crate::rng;

/// Operating regimes available to the generator: altitude-like, Mach-like
/// and throttle-like base settings per regime.
const CONDITION_TABLE: [[f64; 3]; 6] = [
    [0.0, 0.0, 100.0],
    [10.0, 0.25, 100.0],
    [20.0, 0.7, 100.0],
    [25.0, 0.62, 60.0],
    [35.0, 0.84, 100.0],
    [42.0, 0.84, 100.0],
];

/// Per-channel behavior as (base level, trend amplitude, noise std, shift
/// per regime). Zero trend with zero noise is a dead channel; zero trend
/// with positive noise is uninformative chatter.
const CHANNELS: [(f64, f64, f64, f64); SENSORS] = [
    (518.67, 0.0, 0.0, 0.0),
    (642.0, 25.0, 0.40, 3.0),
    (1585.0, 40.0, 0.60, -2.5),
    (1400.0, 30.0, 0.50, 2.0),
    (14.62, 0.0, 0.0, 0.0),
    (21.6, -18.0, 0.30, 1.5),
    (554.0, 12.0, 0.50, -1.0),
    (2388.0, 0.0, 1.00, 0.0),
    (9046.0, 22.0, 0.40, 2.5),
    (1.3, 0.0, 1.00, 0.0),
    (47.5, 28.0, 0.45, 1.8),
    (521.7, -20.0, 0.35, -1.2),
    (2388.1, 15.0, 0.50, 0.8),
    (8138.0, 0.0, 0.0, 0.0),
    (8.44, -26.0, 0.40, 1.0),
    (0.03, 0.0, 1.00, 0.0),
    (392.0, 19.0, 0.40, -2.0),
    (2388.0, 0.0, 0.0, 0.0),
    (100.0, 24.0, 0.50, 1.4),
    (38.9, -17.0, 0.30, -0.9),
    (23.4, 21.0, 0.45, 1.1),
];

/// Zero-based indices of the channels that actually track wear; the
/// selection stage should recover exactly this set.
pub fn trending_channels() -> Vec<usize> {
    CHANNELS
        .iter()
        .enumerate()
        .filter(|(_, c)| c.1 != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Fleet geometry for [`synthetic_bundle`].
#[derive(Clone, Debug)]
pub struct SimSpec {
    pub train_units: usize,
    pub test_units: usize,
    /// Mean trajectory length; individual engines vary by ±25%.
    pub base_len: usize,
    /// Number of operating regimes, 1..=6.
    pub conditions: usize,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec { train_units: 12, test_units: 6, base_len: 160, conditions: 2 }
    }
}

fn jitter_len(base: usize, r: &mut ChaCha8Rng) -> usize {
    ((base as f64 * r.random_range(0.75..1.25)).round() as usize).max(12)
}

fn one_engine(unit: u32, cycles: usize, conditions: usize, r: &mut ChaCha8Rng) -> EngineTrajectory {
    let conditions = conditions.clamp(1, CONDITION_TABLE.len());
    // Each unit gets its own per-channel degradation amplitude.
    let amp: Vec<f64> = (0..SENSORS).map(|_| r.random_range(0.9..1.1)).collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut settings = Vec::with_capacity(cycles * 3);
    let mut sensors = Vec::with_capacity(cycles * SENSORS);
    for t in 0..cycles {
        let cond = if conditions == 1 { 0 } else { r.random_range(0..conditions) };
        for base in &CONDITION_TABLE[cond] {
            settings.push(base + r.random_range(-0.002..0.002));
        }
        let wear = if cycles > 1 { t as f64 / (cycles - 1) as f64 } else { 1.0 };
        let curve = 0.3 * wear + 0.7 * wear * wear;
        for (ch, &(level, trend, noise, shift)) in CHANNELS.iter().enumerate() {
            let mut v = level + trend * amp[ch] * curve + shift * cond as f64;
            if noise > 0.0 {
                v += noise * normal.sample(r);
            }
            sensors.push(v);
        }
    }
    EngineTrajectory { unit, cycles, settings, sensors }
}

/// Generate run-to-failure engines (two regimes, lengths around
/// `base_len`). Unit `u` draws from its own seed stream, so fleets are
/// reproducible and insensitive to generation order.
pub fn synthetic_fleet(units: usize, base_len: usize, seed: u64) -> Vec<EngineTrajectory> {
    (1..=units as u32)
        .map(|u| {
            let mut r = rng::stream_indexed(seed, "sim-unit", u as u64);
            let cycles = jitter_len(base_len, &mut r);
            one_engine(u, cycles, 2, &mut r)
        })
        .collect()
}

/// Generate a complete subset: run-to-failure training engines plus test
/// engines truncated before failure with their true remaining life.
pub fn synthetic_bundle(id: DatasetId, spec: &SimSpec, seed: u64) -> DatasetBundle {
    let train = (1..=spec.train_units as u32)
        .map(|u| {
            let mut r = rng::stream_indexed(seed, "sim-train", u as u64);
            let cycles = jitter_len(spec.base_len, &mut r);
            one_engine(u, cycles, spec.conditions, &mut r)
        })
        .collect();
    let mut test = Vec::with_capacity(spec.test_units);
    let mut test_rul = Vec::with_capacity(spec.test_units);
    for u in 1..=spec.test_units as u32 {
        let mut r = rng::stream_indexed(seed, "sim-test", u as u64);
        let full = jitter_len(spec.base_len, &mut r);
        let mut tr = one_engine(u, full, spec.conditions, &mut r);
        let keep = r.random_range(0.5..0.85);
        let kept = ((full as f64 * keep).round() as usize).clamp(3, full - 1);
        test_rul.push((full - kept) as f64);
        tr.cycles = kept;
        tr.settings.truncate(kept * 3);
        tr.sensors.truncate(kept * SENSORS);
        test.push(tr);
    }
    DatasetBundle { id, train, test, test_rul }
}

/// Generate a subset and write its three files (`train_*`, `test_*`,
/// `RUL_*`) into `dir`, creating the directory if needed.
pub fn write_synthetic_dataset(
    dir: &Path,
    id: DatasetId,
    spec: &SimSpec,
    seed: u64,
) -> Result<DatasetBundle> {
    let bundle = synthetic_bundle(id, spec, seed);
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(id.train_file(), format_trajectories(&bundle.train))?;
    write(id.test_file(), format_trajectories(&bundle.test))?;
    let rul: String = bundle.test_rul.iter().map(|v| format!("{}\n", *v as i64)).collect();
    write(id.rul_file(), rul)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmapss::{load_bundle, train_rul_series, RUL_CAP};
    use crate::prep::select::select_features;

    #[test]
    fn fleets_are_seeded_and_vary_in_length() {
        let a = synthetic_fleet(5, 100, 7);
        let b = synthetic_fleet(5, 100, 7);
        assert_eq!(a, b);
        let c = synthetic_fleet(5, 100, 8);
        assert_ne!(a, c);
        assert!(a.iter().any(|t| t.cycles != a[0].cycles), "lengths should vary");
        for t in &a {
            assert!(t.cycles >= 75 && t.cycles <= 125);
            assert_eq!(t.settings.len(), t.cycles * 3);
            assert_eq!(t.sensors.len(), t.cycles * SENSORS);
        }
    }

    #[test]
    fn settings_rows_sit_near_regime_bases() {
        let fleet = synthetic_fleet(3, 60, 11);
        for t in &fleet {
            for c in 0..t.cycles {
                let row = t.settings_at(c);
                let near = CONDITION_TABLE[..2].iter().any(|base| {
                    row.iter().zip(base).all(|(a, b)| (a - b).abs() < 0.01)
                });
                assert!(near, "settings row {row:?} far from every regime base");
            }
        }
    }

    #[test]
    fn selection_recovers_the_trending_channels() {
        let fleet = synthetic_fleet(10, 150, 3);
        let labels: Vec<Vec<f64>> =
            fleet.iter().map(|t| train_rul_series(t.cycles, RUL_CAP)).collect();
        let sel = select_features(&fleet, &labels, 0.1, 0.01).unwrap();
        assert_eq!(sel.selected, trending_channels());
    }

    #[test]
    fn bundles_truncate_test_engines_with_positive_rul() {
        let spec = SimSpec { train_units: 4, test_units: 5, base_len: 80, conditions: 2 };
        let bundle = synthetic_bundle(DatasetId::FD001, &spec, 3);
        assert_eq!(bundle.train.len(), 4);
        assert_eq!(bundle.test.len(), 5);
        assert_eq!(bundle.test_rul.len(), 5);
        for (tr, rul) in bundle.test.iter().zip(&bundle.test_rul) {
            assert!(*rul >= 1.0, "test engine {} has no life left", tr.unit);
            assert!(tr.cycles >= 3);
        }
    }

    #[test]
    fn written_files_load_back_as_an_identical_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SimSpec { train_units: 3, test_units: 2, base_len: 40, conditions: 2 };
        let written = write_synthetic_dataset(dir.path(), DatasetId::FD003, &spec, 5).unwrap();
        let loaded = load_bundle(DatasetId::FD003, dir.path()).unwrap();
        assert_eq!(loaded.train, written.train);
        assert_eq!(loaded.test, written.test);
        assert_eq!(loaded.test_rul, written.test_rul);
    }
}
