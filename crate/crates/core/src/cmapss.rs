//! Turbofan run-to-failure data ingestion (CMAPSS text format).
//!
//! Each line of a trajectory file is one engine cycle with 26 whitespace
//! separated columns: unit id, cycle index, three operational settings and
//! twenty-one sensor channels. Companion RUL files carry one integer per
//! test engine: the remaining useful life at the last recorded cycle.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Columns per trajectory line.
pub const COLUMNS: usize = 26;
/// Operational setting channels per cycle.
pub const SETTINGS: usize = 3;
/// Sensor channels per cycle.
pub const SENSORS: usize = 21;
/// Default piecewise cap on remaining useful life, in cycles.
pub const RUL_CAP: f64 = 125.0;

/// The four turbofan subsets and their conventional file names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DatasetId {
    FD001,
    FD002,
    FD003,
    FD004,
}

impl DatasetId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::FD001 => "FD001",
            DatasetId::FD002 => "FD002",
            DatasetId::FD003 => "FD003",
            DatasetId::FD004 => "FD004",
        }
    }

    pub fn train_file(&self) -> String {
        format!("train_{}.txt", self.as_str())
    }

    pub fn test_file(&self) -> String {
        format!("test_{}.txt", self.as_str())
    }

    pub fn rul_file(&self) -> String {
        format!("RUL_{}.txt", self.as_str())
    }

    /// Parse an identifier such as "FD001" (case-insensitive).
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "FD001" => Ok(DatasetId::FD001),
            "FD002" => Ok(DatasetId::FD002),
            "FD003" => Ok(DatasetId::FD003),
            "FD004" => Ok(DatasetId::FD004),
            other => Err(Error::Config(format!(
                "unknown dataset id '{other}' (expected FD001..FD004)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One engine's full multivariate time series.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineTrajectory {
    /// Unit id as recorded in the file.
    pub unit: u32,
    /// Cycle count `T`.
    pub cycles: usize,
    /// Row-major `[T, 3]` operational settings.
    pub settings: Vec<f64>,
    /// Row-major `[T, 21]` sensor readings.
    pub sensors: Vec<f64>,
}

impl EngineTrajectory {
    /// Settings row for a zero-based cycle index.
    pub fn settings_at(&self, t: usize) -> &[f64] {
        &self.settings[t * SETTINGS..(t + 1) * SETTINGS]
    }

    /// Sensor row for a zero-based cycle index.
    pub fn sensors_at(&self, t: usize) -> &[f64] {
        &self.sensors[t * SENSORS..(t + 1) * SENSORS]
    }

    /// One sensor channel (zero-based) as a contiguous series.
    pub fn sensor_series(&self, channel: usize) -> Vec<f64> {
        (0..self.cycles).map(|t| self.sensors[t * SENSORS + channel]).collect()
    }
}

/// Parse a trajectory file. Validates column count, numeric fields,
/// per-engine cycle numbering (1..=T, ascending, no gaps) and that each
/// unit's rows form one contiguous block.
pub fn parse_trajectories(text: &str) -> Result<Vec<EngineTrajectory>> {
    let mut result: Vec<EngineTrajectory> = Vec::new();
    let mut seen_units: Vec<u32> = Vec::new();
    let mut current: Option<EngineTrajectory> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != COLUMNS {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {COLUMNS} columns, found {}", fields.len()),
            });
        }
        let unit: u32 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad unit id '{}'", fields[0]),
        })?;
        let cycle: usize = fields[1].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad cycle index '{}'", fields[1]),
        })?;
        let mut values = [0.0f64; COLUMNS - 2];
        for (j, f) in fields[2..].iter().enumerate() {
            values[j] = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad numeric field '{f}' in column {}", j + 3),
            })?;
        }

        let start_new = match &current {
            None => true,
            Some(tr) => tr.unit != unit,
        };
        if start_new {
            if let Some(tr) = current.take() {
                result.push(tr);
            }
            if seen_units.contains(&unit) {
                return Err(Error::Structure(format!(
                    "unit {unit} reappears at line {line_no} after its block ended"
                )));
            }
            seen_units.push(unit);
            if cycle != 1 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unit {unit} starts at cycle {cycle}, expected 1"),
                });
            }
            current = Some(EngineTrajectory {
                unit,
                cycles: 0,
                settings: Vec::new(),
                sensors: Vec::new(),
            });
        }
        let tr = current.as_mut().unwrap();
        if cycle != tr.cycles + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!(
                    "unit {unit} jumps from cycle {} to {cycle}; cycles must be contiguous",
                    tr.cycles
                ),
            });
        }
        tr.cycles += 1;
        tr.settings.extend_from_slice(&values[..SETTINGS]);
        tr.sensors.extend_from_slice(&values[SETTINGS..]);
    }
    if let Some(tr) = current.take() {
        result.push(tr);
    }
    if result.is_empty() {
        return Err(Error::Structure("trajectory file contains no data rows".into()));
    }
    Ok(result)
}

/// Render trajectories back into the text format accepted by
/// [`parse_trajectories`]. Floats use Rust's shortest round-trip form, so
/// parse -> format -> parse is value-identical.
pub fn format_trajectories(trajectories: &[EngineTrajectory]) -> String {
    let mut out = String::new();
    for tr in trajectories {
        for t in 0..tr.cycles {
            let _ = write!(out, "{} {}", tr.unit, t + 1);
            for v in tr.settings_at(t) {
                let _ = write!(out, " {v}");
            }
            for v in tr.sensors_at(t) {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
    }
    out
}

/// Parse an RUL file: one non-negative integer per non-empty line.
pub fn parse_rul_file(text: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let v: i64 = line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad RUL value '{line}'"),
        })?;
        if v < 0 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("negative RUL value {v}"),
            });
        }
        out.push(v as f64);
    }
    if out.is_empty() {
        return Err(Error::Structure("RUL file contains no values".into()));
    }
    Ok(out)
}

/// Piecewise-linear RUL labels for a training engine observed to failure:
/// at zero-based cycle `t` of `T`, RUL is `min(T - 1 - t, cap)`, hitting
/// zero on the final cycle.
pub fn train_rul_series(cycles: usize, cap: f64) -> Vec<f64> {
    (0..cycles).map(|t| ((cycles - 1 - t) as f64).min(cap)).collect()
}

/// RUL labels for a test engine truncated `final_rul` cycles before failure:
/// at zero-based cycle `t` of `T`, RUL is `final_rul + (T - 1 - t)`, capped.
pub fn test_rul_series(cycles: usize, final_rul: f64, cap: f64) -> Vec<f64> {
    (0..cycles)
        .map(|t| (final_rul + (cycles - 1 - t) as f64).min(cap))
        .collect()
}

/// A train/test subset pair with the test engines' final RUL values.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub id: DatasetId,
    pub train: Vec<EngineTrajectory>,
    pub test: Vec<EngineTrajectory>,
    pub test_rul: Vec<f64>,
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load `train_*`, `test_*` and `RUL_*` for a subset from a directory and
/// cross-check that the RUL file has one value per test engine.
pub fn load_bundle(id: DatasetId, dir: &Path) -> Result<DatasetBundle> {
    let train = parse_trajectories(&read_file(&dir.join(id.train_file()))?)?;
    let test = parse_trajectories(&read_file(&dir.join(id.test_file()))?)?;
    let test_rul = parse_rul_file(&read_file(&dir.join(id.rul_file()))?)?;
    if test.len() != test_rul.len() {
        return Err(Error::Structure(format!(
            "{id}: {} test engines but {} RUL values",
            test.len(),
            test_rul.len()
        )));
    }
    Ok(DatasetBundle { id, train, test, test_rul })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_line(unit: u32, cycle: usize, seed: f64) -> String {
        let mut s = format!("{unit} {cycle} {} {} 100.0", seed * 0.001, -seed * 0.0004);
        for k in 0..SENSORS {
            let _ = write!(s, " {}", 500.0 + seed + k as f64 * 0.25);
        }
        s
    }

    fn sample_text() -> String {
        let mut text = String::new();
        for cycle in 1..=3 {
            text.push_str(&sample_line(1, cycle, cycle as f64));
            text.push('\n');
        }
        for cycle in 1..=2 {
            text.push_str(&sample_line(2, cycle, 10.0 + cycle as f64));
            text.push('\n');
        }
        text
    }

    #[test]
    fn parses_units_cycles_and_channels() {
        let trs = parse_trajectories(&sample_text()).unwrap();
        assert_eq!(trs.len(), 2);
        assert_eq!(trs[0].unit, 1);
        assert_eq!(trs[0].cycles, 3);
        assert_eq!(trs[1].cycles, 2);
        assert_eq!(trs[0].settings.len(), 3 * SETTINGS);
        assert_eq!(trs[0].sensors.len(), 3 * SENSORS);
        assert_eq!(trs[0].settings_at(1)[2], 100.0);
        assert_eq!(trs[0].sensors_at(0)[0], 501.0);
    }

    #[test]
    fn rejects_wrong_column_count_with_line_number() {
        let mut text = sample_text();
        text.push_str("1 4 0.0\n");
        let err = parse_trajectories(&text).unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 6);
                assert!(msg.contains("26"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_non_numeric_field() {
        let text = sample_text().replace("100.0", "oops");
        assert!(matches!(parse_trajectories(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_cycle_gap_and_wrong_start() {
        let mut text = sample_text();
        text.push_str(&sample_line(3, 2, 0.0));
        text.push('\n');
        assert!(parse_trajectories(&text).is_err());

        let gap = [sample_line(1, 1, 0.0), sample_line(1, 3, 0.0)].join("\n");
        assert!(parse_trajectories(&gap).is_err());
    }

    #[test]
    fn rejects_unit_reappearing_after_block_end() {
        let text = [
            sample_line(1, 1, 0.0),
            sample_line(2, 1, 1.0),
            sample_line(1, 2, 2.0),
        ]
        .join("\n");
        assert!(matches!(parse_trajectories(&text), Err(Error::Structure(_))));
    }

    #[test]
    fn round_trip_preserves_values() {
        let orig = parse_trajectories(&sample_text()).unwrap();
        let text = format_trajectories(&orig);
        let again = parse_trajectories(&text).unwrap();
        assert_eq!(orig, again);
    }

    #[test]
    fn rul_file_parses_and_rejects_garbage() {
        assert_eq!(parse_rul_file("112\n98\n 69 \n").unwrap(), vec![112.0, 98.0, 69.0]);
        assert!(parse_rul_file("7\n-3\n").is_err());
        assert!(parse_rul_file("7\nx\n").is_err());
        assert!(parse_rul_file("\n\n").is_err());
    }

    #[test]
    fn train_rul_is_piecewise_capped_and_ends_at_zero() {
        let r = train_rul_series(200, RUL_CAP);
        assert_eq!(r.len(), 200);
        assert_eq!(r[0], 125.0);
        assert_eq!(r[73], 125.0); // T-1-t = 126, still capped
        assert_eq!(r[74], 125.0);
        assert_eq!(r[75], 124.0);
        assert_eq!(r[199], 0.0);
    }

    #[test]
    fn test_rul_extends_final_value_backwards() {
        let r = test_rul_series(4, 30.0, RUL_CAP);
        assert_eq!(r, vec![33.0, 32.0, 31.0, 30.0]);
        let capped = test_rul_series(3, 124.0, RUL_CAP);
        assert_eq!(capped, vec![125.0, 125.0, 124.0]);
    }

    #[test]
    fn bundle_checks_rul_count_against_test_engines() {
        let dir = tempfile::tempdir().unwrap();
        let id = DatasetId::FD001;
        std::fs::write(dir.path().join(id.train_file()), sample_text()).unwrap();
        std::fs::write(dir.path().join(id.test_file()), sample_text()).unwrap();
        std::fs::write(dir.path().join(id.rul_file()), "5\n9\n").unwrap();
        let bundle = load_bundle(id, dir.path()).unwrap();
        assert_eq!(bundle.test_rul, vec![5.0, 9.0]);

        std::fs::write(dir.path().join(id.rul_file()), "5\n").unwrap();
        assert!(load_bundle(id, dir.path()).is_err());
    }

    #[test]
    fn dataset_id_parses_and_formats() {
        assert_eq!(DatasetId::parse("fd003").unwrap(), DatasetId::FD003);
        assert!(DatasetId::parse("FD009").is_err());
        assert_eq!(DatasetId::FD002.train_file(), "train_FD002.txt");
        assert_eq!(DatasetId::FD004.rul_file(), "RUL_FD004.txt");
    }
}
