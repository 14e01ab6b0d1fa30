//! Windowing multi-receiver streams into `w x 2 x n` classifier inputs,
//! min-max normalization and stratified splitting.
//!
//! A window is stored flat in `(time, component, channel)` order: element
//! `[l, c, i]` lives at `l * 2 * n + c * n + i`, with component 0 = I, 1 = Q.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::signal::IQStreamSet;
use iqband_nn::{Shape3, TensorSet};

/// Scope of the min-max statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Joint I/Q min and max per receiver channel.
    #[default]
    PerChannel,
    /// One min and max over the whole window.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSettings {
    pub w: usize,
    pub n: usize,
    pub normalize: bool,
    #[serde(default)]
    pub scope: NormScope,
}

impl InputSettings {
    pub fn shape(&self) -> Shape3 {
        Shape3::new(self.w, 2, self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierInput {
    pub tensor: Vec<f32>,
    pub label: usize,
}

impl ClassifierInput {
    pub fn one_hot(&self, classes: usize) -> Vec<f32> {
        (0..classes).map(|c| if c == self.label { 1.0 } else { 0.0 }).collect()
    }
}

/// Index of element `[l, comp, i]` in a flat window with `n` channels.
pub fn index(l: usize, comp: usize, i: usize, n: usize) -> usize {
    l * 2 * n + comp * n + i
}

/// Non-overlapping windows over the first `n` streams; the remainder past the
/// last full window is dropped.
pub fn window_streams(set: &IQStreamSet, w: usize, n: usize) -> Result<Vec<Vec<f32>>> {
    if n == 0 || n > set.num_receivers() {
        return Err(CoreError::StreamSelection {
            requested: n,
            available: set.num_receivers(),
        });
    }
    let len = set.stream_len();
    if w == 0 || w > len {
        return Err(CoreError::EmptyWindows { window: w, length: len });
    }
    Ok((0..len / w)
        .map(|k| {
            let mut win = vec![0.0; w * 2 * n];
            for (i, stream) in set.streams[..n].iter().enumerate() {
                for (l, z) in stream[k * w..(k + 1) * w].iter().enumerate() {
                    win[index(l, 0, i, n)] = z.re;
                    win[index(l, 1, i, n)] = z.im;
                }
            }
            win
        })
        .collect())
}

/// Rescales `window[start], window[start + step], ...`.
fn rescale(window: &mut [f32], start: usize, step: usize) {
    let (lo, hi) = window[start..]
        .iter()
        .step_by(step)
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in window[start..].iter_mut().step_by(step) {
        *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
    }
}

/// Maps values affinely onto `[0, 1]`; a constant channel maps to zeros.
pub fn minmax_normalize(window: &mut [f32], n: usize, scope: NormScope) {
    match scope {
        NormScope::Joint => rescale(window, 0, 1),
        NormScope::PerChannel => {
            for i in 0..n {
                rescale(window, i, n);
            }
        }
    }
}

/// Windows every stream set and labels each window with its class index.
pub fn assemble_inputs(sets: &[IQStreamSet], settings: InputSettings) -> Result<Vec<ClassifierInput>> {
    let per_set = sets
        .par_iter()
        .map(|set| {
            let mut wins = window_streams(set, settings.w, settings.n)?;
            if settings.normalize {
                for win in &mut wins {
                    minmax_normalize(win, settings.n, settings.scope);
                }
            }
            Ok(wins
                .into_iter()
                .map(|tensor| ClassifierInput {
                    tensor,
                    label: set.class_id.index(),
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_set.into_iter().flatten().collect())
}

/// Stacks inputs into a training tensor set.
pub fn to_tensor_set(inputs: &[ClassifierInput], shape: Shape3) -> Result<TensorSet<f32>> {
    let mut data = Vec::with_capacity(inputs.len() * shape.size());
    for input in inputs {
        data.extend_from_slice(&input.tensor);
    }
    Ok(TensorSet::new(shape, data, inputs.iter().map(|i| i.label).collect())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

pub const MIN_PER_CLASS: usize = 5;

/// Index sets of a split; each list is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Stratified shuffled split. Every class is shuffled and cut at counts from
/// a controlled rounding of its exact shares: each (class, split) count is the
/// floor or ceiling of `count * ratio`, and each split total is within one of
/// `total * ratio`.
pub fn split_indices(labels: &[usize], ratios: SplitRatios, seed: u64) -> Result<SplitIndices> {
    let SplitRatios { train, valid, test } = ratios;
    if [train, valid, test].iter().any(|r| !(0.0..=1.0).contains(r)) || (train + valid + test - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidSplit(format!(
            "ratios {train}/{valid}/{test} must be in [0, 1] and sum to 1"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class.retain(|m| !m.is_empty());
    if let Some(m) = by_class.iter().find(|m| m.len() < MIN_PER_CLASS) {
        return Err(CoreError::InvalidSplit(format!(
            "class {} has {} items, need at least {MIN_PER_CLASS}",
            labels[m[0]],
            m.len()
        )));
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let cells = controlled_rounding(&sizes, [train, valid, test]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (members, cell) in by_class.iter_mut().zip(&cells) {
        members.shuffle(&mut rng);
        let mut rest = &members[..];
        for (part, &k) in parts.iter_mut().zip(cell) {
            part.extend_from_slice(&rest[..k]);
            rest = &rest[k..];
        }
    }
    let [mut tr, mut va, mut te] = parts;
    for p in [&mut tr, &mut va, &mut te] {
        p.sort_unstable();
    }
    Ok(SplitIndices {
        train: tr,
        valid: va,
        test: te,
        seed,
    })
}

/// Rounds the table `sizes[c] * ratios[s]` to integers so that rows keep their
/// exact sums, every cell is a floor or ceiling, and column sums are within one
/// of their exact values.
fn controlled_rounding(sizes: &[usize], ratios: [f64; 3]) -> Vec<[usize; 3]> {
    const EPS: f64 = 1e-9;
    let mut cells: Vec<[usize; 3]> = Vec::with_capacity(sizes.len());
    let mut fracs: Vec<[f64; 3]> = Vec::with_capacity(sizes.len());
    let mut need = Vec::with_capacity(sizes.len());
    for &m in sizes {
        let mut cell = [0; 3];
        let mut frac = [0.0; 3];
        for s in 0..3 {
            let x = m as f64 * ratios[s];
            let f = (x + EPS).floor();
            cell[s] = f as usize;
            frac[s] = if x - f > EPS { x - f } else { 0.0 };
        }
        need.push(m - cell.iter().sum::<usize>());
        cells.push(cell);
        fracs.push(frac);
    }
    let total: usize = need.iter().sum();
    let col: Vec<f64> = (0..3).map(|s| fracs.iter().map(|f| f[s]).sum()).collect();

    let mut options: Vec<[usize; 3]> = (0..8u8)
        .map(|bits| {
            let mut e = [0; 3];
            for s in 0..3 {
                e[s] = if bits >> s & 1 == 1 { (col[s] - EPS).ceil().max(0.0) } else { (col[s] + EPS).floor() } as usize;
            }
            e
        })
        .filter(|e| e.iter().sum::<usize>() == total)
        .collect();
    options.sort_by(|a, b| {
        let dev = |e: &[usize; 3]| (0..3).map(|s| (e[s] as f64 - col[s]).abs()).fold(0.0, f64::max);
        dev(a).total_cmp(&dev(b)).then(a.cmp(b))
    });
    options.dedup();
    for cols in options {
        if let Some(extra) = unit_assignment(&need, &cols, &fracs) {
            for (cell, add) in cells.iter_mut().zip(extra) {
                for s in 0..3 {
                    cell[s] += add[s];
                }
            }
            return cells;
        }
    }
    // Unreachable for two-dimensional tables; largest remainders per row.
    for ((cell, frac), &n) in cells.iter_mut().zip(&fracs).zip(&need) {
        let mut order = [0, 1, 2];
        order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]));
        for &s in &order[..n] {
            cell[s] += 1;
        }
    }
    cells
}

/// 0/1 matrix with row sums `rows`, column sums `cols`, ones only where the
/// fraction is positive; found by augmenting paths.
fn unit_assignment(rows: &[usize], cols: &[usize; 3], fracs: &[[f64; 3]]) -> Option<Vec<[usize; 3]>> {
    let mut x = vec![[0usize; 3]; rows.len()];
    let mut col_load = [0usize; 3];
    fn augment(
        c: usize,
        x: &mut [[usize; 3]],
        col_load: &mut [usize; 3],
        cols: &[usize; 3],
        fracs: &[[f64; 3]],
        seen: &mut [bool; 3],
    ) -> bool {
        for s in 0..3 {
            if x[c][s] == 1 || fracs[c][s] <= 0.0 || seen[s] {
                continue;
            }
            seen[s] = true;
            if col_load[s] < cols[s] {
                x[c][s] = 1;
                col_load[s] += 1;
                return true;
            }
            for other in 0..x.len() {
                if x[other][s] == 1 {
                    x[other][s] = 0;
                    x[c][s] = 1;
                    if augment(other, x, col_load, cols, fracs, seen) {
                        return true;
                    }
                    x[c][s] = 0;
                    x[other][s] = 1;
                }
            }
        }
        false
    }
    for (c, &n) in rows.iter().enumerate() {
        for _ in 0..n {
            let mut seen = [false; 3];
            if !augment(c, &mut x, &mut col_load, cols, fracs, &mut seen) {
                return None;
            }
        }
    }
    Some(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<ClassifierInput>,
    pub valid: Vec<ClassifierInput>,
    pub test: Vec<ClassifierInput>,
    pub split_seed: u64,
}

pub fn split_dataset(inputs: Vec<ClassifierInput>, ratios: SplitRatios, seed: u64) -> Result<SplitDataset> {
    let labels: Vec<usize> = inputs.iter().map(|i| i.label).collect();
    let idx = split_indices(&labels, ratios, seed)?;
    let mut slots: Vec<Option<ClassifierInput>> = inputs.into_iter().map(Some).collect();
    let mut take = |v: &[usize]| v.iter().map(|&i| slots[i].take().expect("indices are disjoint")).collect();
    Ok(SplitDataset {
        train: take(&idx.train),
        valid: take(&idx.valid),
        test: take(&idx.test),
        split_seed: seed,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"IQPT";
const CACHE_VERSION: u16 = 1;

/// Sidecar describing a cached tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub settings: InputSettings,
    pub source_hash: String,
    pub split_seed: Option<u64>,
    pub count: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes inputs as `IQPT` binary (magic, version u16, count u64, size u64,
/// then per input a label byte and `size` little-endian `f32`) plus a
/// `<path>.json` sidecar.
pub fn save_processed(path: impl AsRef<Path>, inputs: &[ClassifierInput], meta: &CacheManifest) -> Result<()> {
    let path = path.as_ref();
    let size = meta.settings.shape().size();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(inputs.len() as u64).to_le_bytes())?;
    w.write_all(&(size as u64).to_le_bytes())?;
    for input in inputs {
        if input.tensor.len() != size || input.label > u8::MAX as usize {
            return Err(CoreError::InvalidConfig("input does not match cache settings".into()));
        }
        w.write_all(&[input.label as u8])?;
        for v in &input.tensor {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = CacheManifest {
        count: inputs.len(),
        ..meta.clone()
    };
    fs::write(sidecar(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_processed(path: impl AsRef<Path>) -> Result<(Vec<ClassifierInput>, CacheManifest)> {
    let path = path.as_ref();
    let meta: CacheManifest = serde_json::from_slice(&fs::read(sidecar(path))?)?;
    let mut r = BufReader::new(fs::File::open(path)?);
    let err = |d: &str| CoreError::Format {
        what: path.display().to_string(),
        detail: d.into(),
    };
    let mut head = [0u8; 22];
    r.read_exact(&mut head)?;
    if &head[..4] != CACHE_MAGIC || u16::from_le_bytes([head[4], head[5]]) != CACHE_VERSION {
        return Err(err("not an IQPT v1 file"));
    }
    let count = u64::from_le_bytes(head[6..14].try_into().expect("8 bytes")) as usize;
    let size = u64::from_le_bytes(head[14..22].try_into().expect("8 bytes")) as usize;
    if count != meta.count || size != meta.settings.shape().size() {
        return Err(err("header disagrees with sidecar"));
    }
    let mut buf = vec![0u8; 1 + size * 4];
    let mut inputs = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        inputs.push(ClassifierInput {
            label: buf[0] as usize,
            tensor: buf[1..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        });
    }
    Ok((inputs, meta))
}
