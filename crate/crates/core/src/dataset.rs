//! Window extraction, engine-level splitting, augmentation, batching and a
//! binary cache for prepared samples.
//!
//! Samples are fixed-length sliding windows over preprocessed features; the
//! label, raw settings vector and condition cluster all come from the
//! window's final cycle. Engines shorter than the window produce a single
//! left-padded sample. Splits operate on whole engines so no engine leaks
//! across the train/validation boundary, and augmentation runs only on the
//! training side, after the split.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::prep::PreprocessedTrajectory;
use crate::rng;

/// Default sliding-window length in cycles.
pub const WINDOW_LEN: usize = 30;
/// Default augmentation multiplier (originals plus two jittered copies).
pub const AUGMENT_FACTOR: usize = 3;
/// Jitter standard deviation for augmentation noise.
pub const JITTER_STD: f64 = 0.005;
/// Per-sample scaling range for augmentation.
pub const SCALE_RANGE: (f64, f64) = (0.95, 1.05);

/// One training/evaluation sample.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Row-major `[window_len, feature_count]` normalized features.
    pub window: Vec<f32>,
    /// Raw settings at the window's final cycle.
    pub settings: [f32; 3],
    /// Condition cluster at the window's final cycle.
    pub cluster: u32,
    /// RUL in cycles at the window's final cycle.
    pub label: f32,
    /// Source engine unit id.
    pub unit: u32,
}

/// A set of samples with fixed geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowDataset {
    pub window_len: usize,
    pub feature_count: usize,
    pub samples: Vec<WindowSample>,
}

impl WindowDataset {
    pub fn new(window_len: usize, feature_count: usize) -> Self {
        WindowDataset { window_len, feature_count, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Slide a window over one preprocessed engine. `labels` holds the RUL per
/// cycle. Engines with `T >= window_len` yield `T - window_len + 1` samples
/// at stride 1; shorter engines yield one sample left-padded by repeating
/// the first row.
pub fn make_windows(
    prep: &PreprocessedTrajectory,
    labels: &[f64],
    window_len: usize,
) -> Result<Vec<WindowSample>> {
    if window_len == 0 {
        return Err(Error::Config("windowing: window length must be positive".into()));
    }
    if labels.len() != prep.cycles {
        return Err(Error::Structure(format!(
            "windowing: unit {} has {} cycles but {} labels",
            prep.unit,
            prep.cycles,
            labels.len()
        )));
    }
    if prep.cycles == 0 {
        return Err(Error::Structure(format!("windowing: unit {} is empty", prep.unit)));
    }
    let d = prep.feature_count;
    let t = prep.cycles;
    let mut out = Vec::new();
    let sample_at = |last: usize| -> WindowSample {
        let mut window = Vec::with_capacity(window_len * d);
        let first_in = last + 1 >= window_len;
        let start = if first_in { last + 1 - window_len } else { 0 };
        let pad = window_len - (last - start + 1);
        for _ in 0..pad {
            window.extend(prep.features[0..d].iter().map(|&v| v as f32));
        }
        for row in start..=last {
            window.extend(prep.features[row * d..(row + 1) * d].iter().map(|&v| v as f32));
        }
        let s = &prep.settings[last * 3..(last + 1) * 3];
        WindowSample {
            window,
            settings: [s[0] as f32, s[1] as f32, s[2] as f32],
            cluster: prep.clusters[last] as u32,
            label: labels[last] as f32,
            unit: prep.unit,
        }
    };
    if t >= window_len {
        for last in window_len - 1..t {
            out.push(sample_at(last));
        }
    } else {
        out.push(sample_at(t - 1));
    }
    Ok(out)
}

/// Shuffle engine units with a seeded stream and split them whole:
/// `round(frac * N)` to the first side, clamped so both sides stay
/// non-empty. Errors if fewer than two units exist.
pub fn split_units(units: &[u32], frac: f64, seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    if units.len() < 2 {
        return Err(Error::Structure(format!(
            "split: need at least 2 engines, got {}",
            units.len()
        )));
    }
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::Config(format!("split: fraction {frac} outside [0, 1]")));
    }
    let mut shuffled = units.to_vec();
    let mut r = rng::stream(seed, "engine-split");
    shuffled.shuffle(&mut r);
    let n = units.len();
    let k = ((frac * n as f64).round() as usize).clamp(1, n - 1);
    let val = shuffled.split_off(k);
    Ok((shuffled, val))
}

/// Augment training samples: keep the originals and append
/// `(factor - 1) * N` copies with per-element Gaussian jitter and one
/// uniform scale per copy. Labels, settings and clusters stay untouched.
pub fn augment(dataset: &WindowDataset, factor: usize, seed: u64) -> WindowDataset {
    let mut out = dataset.clone();
    if factor <= 1 {
        return out;
    }
    let n = dataset.samples.len();
    let noise = Normal::new(0.0, JITTER_STD).expect("valid jitter std");
    for round in 1..factor {
        for (j, sample) in dataset.samples.iter().enumerate() {
            let mut rng =
                rng::stream_indexed(seed, "augment", (round * n + j) as u64);
            let scale = rng.random_range(SCALE_RANGE.0..SCALE_RANGE.1);
            let mut copy = sample.clone();
            for v in copy.window.iter_mut() {
                let jittered = (*v as f64 + noise.sample(&mut rng)) * scale;
                *v = jittered as f32;
            }
            out.samples.push(copy);
        }
    }
    out
}

/// Seeded batch schedule for one epoch: a shuffled permutation of sample
/// indices, chunked to `batch_size`, final partial batch included.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream_indexed(seed, "batches", epoch);
    order.shuffle(&mut r);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Gather a batch into dense buffers: windows `[B, L, d]`, settings `[B, 3]`,
/// labels `[B]`, clusters `[B]`.
pub struct Batch {
    pub windows: Vec<f32>,
    pub settings: Vec<f32>,
    pub labels: Vec<f32>,
    pub clusters: Vec<u32>,
    pub size: usize,
}

pub fn gather_batch(dataset: &WindowDataset, indices: &[usize]) -> Batch {
    let ld = dataset.window_len * dataset.feature_count;
    let mut batch = Batch {
        windows: Vec::with_capacity(indices.len() * ld),
        settings: Vec::with_capacity(indices.len() * 3),
        labels: Vec::with_capacity(indices.len()),
        clusters: Vec::with_capacity(indices.len()),
        size: indices.len(),
    };
    for &i in indices {
        let s = &dataset.samples[i];
        batch.windows.extend_from_slice(&s.window);
        batch.settings.extend_from_slice(&s.settings);
        batch.labels.push(s.label);
        batch.clusters.push(s.cluster);
    }
    batch
}

// ---- binary cache ------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"RULD";
const CACHE_VERSION: u32 = 1;

/// Header metadata stored with a cached dataset.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CacheMeta {
    pub dataset: String,
    pub split: String,
    pub prep_digest: String,
    pub window_len: usize,
    pub feature_count: usize,
    pub sample_count: usize,
}

fn write_u32(w: &mut impl Write, v: u32, path: &Path) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))
}

fn write_f32s(w: &mut impl Write, vs: &[f32], path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 4);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Write a dataset cache atomically (temp file + rename).
pub fn write_cache(path: &Path, dataset: &WindowDataset, meta: &CacheMeta) -> Result<()> {
    if meta.window_len != dataset.window_len
        || meta.feature_count != dataset.feature_count
        || meta.sample_count != dataset.samples.len()
    {
        return Err(Error::Structure(
            "cache write: metadata does not describe this dataset".into(),
        ));
    }
    let tmp = path.with_extension("tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(CACHE_MAGIC).map_err(|e| Error::io(&tmp, e))?;
        write_u32(&mut w, CACHE_VERSION, &tmp)?;
        let header = serde_json::to_vec(meta)
            .map_err(|e| Error::Format(format!("cache header serialization: {e}")))?;
        write_u32(&mut w, header.len() as u32, &tmp)?;
        w.write_all(&header).map_err(|e| Error::io(&tmp, e))?;

        let n = dataset.samples.len();
        let mut windows = Vec::with_capacity(n * dataset.window_len * dataset.feature_count);
        let mut settings = Vec::with_capacity(n * 3);
        let mut labels = Vec::with_capacity(n);
        let mut clusters = Vec::with_capacity(n);
        let mut units = Vec::with_capacity(n);
        for s in &dataset.samples {
            windows.extend_from_slice(&s.window);
            settings.extend_from_slice(&s.settings);
            labels.push(s.label);
            clusters.push(s.cluster);
            units.push(s.unit);
        }
        write_f32s(&mut w, &windows, &tmp)?;
        write_f32s(&mut w, &settings, &tmp)?;
        write_f32s(&mut w, &labels, &tmp)?;
        for v in &clusters {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
        }
        for v in &units {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    read_exact(r, &mut buf, path)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Read a dataset cache written by [`write_cache`].
pub fn read_cache(path: &Path) -> Result<(WindowDataset, CacheMeta)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "dataset cache {}: bad magic {magic:?}",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "dataset cache {}: unsupported version {version}",
            path.display()
        )));
    }
    let header_len = read_u32(&mut r, path)? as usize;
    let mut header = vec![0u8; header_len];
    read_exact(&mut r, &mut header, path)?;
    let meta: CacheMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("cache header parse: {e}")))?;

    let n = meta.sample_count;
    let ld = meta.window_len * meta.feature_count;
    let windows = read_f32s(&mut r, n * ld, path)?;
    let settings = read_f32s(&mut r, n * 3, path)?;
    let labels = read_f32s(&mut r, n, path)?;
    let mut clusters = Vec::with_capacity(n);
    let mut units = Vec::with_capacity(n);
    for _ in 0..n {
        clusters.push(read_u32(&mut r, path)?);
    }
    for _ in 0..n {
        units.push(read_u32(&mut r, path)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Format(format!(
            "dataset cache {}: trailing bytes after payload",
            path.display()
        )));
    }

    let mut ds = WindowDataset::new(meta.window_len, meta.feature_count);
    for i in 0..n {
        ds.samples.push(WindowSample {
            window: windows[i * ld..(i + 1) * ld].to_vec(),
            settings: [settings[i * 3], settings[i * 3 + 1], settings[i * 3 + 2]],
            cluster: clusters[i],
            label: labels[i],
            unit: units[i],
        });
    }
    Ok((ds, meta))
}
