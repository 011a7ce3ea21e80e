//! Trajectory datasets, normalization statistics, and the `AVFD` binary format.
//!
//! Layout: magic `AVFD`, then u32 LE version, T, C, H, W; H latitudes,
//! per-channel means, per-channel standard deviations, and T·C·H·W field
//! values in row-major (t, c, h, w) order, all as f64 LE.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalyticKernel;
use crate::diffkit::{RngStream, Tensor};
use crate::error::{invalid, shape_err, Error, Result};

const MAGIC: &[u8; 4] = b"AVFD";
const VERSION: u32 = 1;

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return shape_err("norm stats", &[mean.len()], &[std.len()]);
        }
        for (i, (m, s)) in mean.iter().zip(&std).enumerate() {
            if !m.is_finite() || !s.is_finite() || *s <= 0.0 {
                return invalid(format!("norm stats: channel {i} has mean {m}, std {s}; need finite mean and std > 0"));
            }
        }
        Ok(NormStats { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Population statistics over every axis except the channel axis of
    /// (T, C, H, W) fields.
    pub fn from_fields(fields: &Tensor) -> Result<Self> {
        let s = fields.shape();
        if s.len() != 4 || s[0] == 0 {
            return invalid(format!("norm stats need nonempty (T, C, H, W) fields, got {s:?}"));
        }
        let (c, cell) = (s[1], s[2] * s[3]);
        let n = (s[0] * cell) as f64;
        let mut mean = vec![0.0; c];
        for (i, chunk) in fields.data().chunks(cell).enumerate() {
            mean[i % c] += chunk.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for (i, chunk) in fields.data().chunks(cell).enumerate() {
            var[i % c] += chunk.iter().map(|x| (x - mean[i % c]).powi(2)).sum::<f64>();
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        Self::new(mean, std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let s = x.shape();
        if s.len() < 3 || s[s.len() - 3] != self.channels() {
            return shape_err("normalize", &[self.channels(), 0, 0], s);
        }
        let (c, cell) = (self.channels(), s[s.len() - 2] * s[s.len() - 1]);
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = (i / cell) % c;
                f(v, self.mean[k], self.std[k])
            })
            .collect();
        Tensor::new(s.to_vec(), data)
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, m, s| v * s + m)
    }

    /// Per-channel std broadcast over (…, C, H, W) for scaling differences.
    pub fn scale_field(&self, shape: &[usize]) -> Result<Tensor> {
        self.apply(&Tensor::zeros(shape), |_, _, s| s)
    }
}

/// Time-index ranges of the three splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Law of the first state of each episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialDist {
    Gaussian { mean: f64, std: f64 },
    Fixed { value: f64 },
}

impl InitialDist {
    pub fn sample(&self, shape: &[usize], rng: &RngStream) -> (Tensor, RngStream) {
        match self {
            InitialDist::Gaussian { mean, std } => {
                let (g, next) = rng.gaussian(shape);
                (g.map(|x| mean + std * x), next)
            }
            InitialDist::Fixed { value } => (Tensor::full(shape, *value), rng.clone()),
        }
    }
}

/// A set of equal-length trajectories stored back to back.
#[derive(Clone, Debug)]
pub struct Dataset {
    fields: Tensor,
    latitudes: Vec<f64>,
    stats: NormStats,
    episode_len: usize,
    splits: Splits,
}

/// Cell-centre latitudes evenly spaced inside (−80°, 80°).
pub fn default_latitudes(h: usize) -> Vec<f64> {
    (0..h).map(|i| -80.0 + (i as f64 + 0.5) * 160.0 / h as f64).collect()
}

/// Episode-aligned train/val/test ranges (80/10/10 of the episodes, at least
/// one each when there are three or more). A single episode is split in time.
pub fn default_splits(t: usize, episode_len: usize) -> Splits {
    let episodes = t / episode_len;
    let (a, b) = if episodes >= 3 {
        let val = (episodes / 10).max(1);
        let test = (episodes / 10).max(1);
        let train = episodes - val - test;
        (train * episode_len, (train + val) * episode_len)
    } else {
        let a = (t * 8) / 10;
        (a, a + (t - a) / 2)
    };
    Splits {
        train: 0..a,
        val: a..b,
        test: b..t,
    }
}

impl Dataset {
    /// Wraps fields; statistics come from the training split.
    pub fn new(fields: Tensor, latitudes: Vec<f64>, episode_len: usize) -> Result<Self> {
        let s = fields.shape();
        if s.len() != 4 {
            return invalid(format!("dataset fields must be (T, C, H, W), got {s:?}"));
        }
        if latitudes.len() != s[2] {
            return shape_err("dataset latitudes", &[s[2]], &[latitudes.len()]);
        }
        Self::check_episodes(s[0], episode_len)?;
        let splits = default_splits(s[0], episode_len);
        let stats = NormStats::from_fields(&fields.slice_axis(0, 0, splits.train.len())?)?;
        Ok(Dataset {
            fields,
            latitudes,
            stats,
            episode_len,
            splits,
        })
    }

    fn check_episodes(t: usize, episode_len: usize) -> Result<()> {
        if episode_len < 2 || !t.is_multiple_of(episode_len) {
            return invalid(format!("episode length {episode_len} must be ≥ 2 and divide T = {t}"));
        }
        Ok(())
    }

    /// Reinterprets the stored trajectory as episodes of the given length.
    /// Splits are recomputed; statistics read from disk are kept.
    pub fn with_episode_len(mut self, episode_len: usize) -> Result<Self> {
        Self::check_episodes(self.len(), episode_len)?;
        self.episode_len = episode_len;
        self.splits = default_splits(self.len(), episode_len);
        Ok(self)
    }

    pub fn fields(&self) -> &Tensor {
        &self.fields
    }

    pub fn latitudes(&self) -> &[f64] {
        &self.latitudes
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn len(&self) -> usize {
        self.fields.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (C, H, W)
    pub fn field_shape(&self) -> [usize; 3] {
        let s = self.fields.shape();
        [s[1], s[2], s[3]]
    }

    pub fn frame(&self, t: usize) -> Result<Tensor> {
        self.fields.slice_axis(0, t, 1)
    }

    pub fn range(&self, split: Split) -> &Range<usize> {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Starting indices τ with τ and τ + gap in the same episode and split.
    pub fn pair_starts(&self, split: Split, gap: usize) -> Vec<usize> {
        let r = self.range(split);
        r.clone()
            .filter(|&i| i + gap < r.end && i / self.episode_len == (i + gap) / self.episode_len)
            .collect()
    }

    /// Stacks frames `idx` into a (B, C, H, W) tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.field_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return invalid(format!("frame {i} out of range (T = {})", self.len()));
            }
            data.extend_from_slice(&self.fields.data()[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![idx.len(), c, h, w], data)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let s = self.fields.shape();
        let mut buf = Vec::with_capacity(24 + 8 * (self.fields.numel() + s[2] + 2 * s[1]));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for &d in s {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        let values = self
            .latitudes
            .iter()
            .chain(&self.stats.mean)
            .chain(&self.stats.std)
            .chain(self.fields.data());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a dataset; the whole file is treated as one episode.
    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        if u(0) != VERSION as usize {
            return Err(Error::Format(format!("unsupported dataset version {}", u(0))));
        }
        let (t, c, h, w) = (u(1), u(2), u(3), u(4));
        let n = h + 2 * c + t * c * h * w;
        if bytes.len() != 24 + 8 * n {
            return Err(Error::Format(format!(
                "dataset payload is {} bytes, header implies {}",
                bytes.len() - 24,
                8 * n
            )));
        }
        let vals: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let latitudes = vals[..h].to_vec();
        let stats = NormStats::new(vals[h..h + c].to_vec(), vals[h + c..h + 2 * c].to_vec())?;
        let fields = Tensor::new(vec![t, c, h, w], vals[h + 2 * c..].to_vec())?;
        Self::check_episodes(t, t)?;
        Ok(Dataset {
            fields,
            latitudes,
            stats,
            episode_len: t,
            splits: default_splits(t, t),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}

/// Simulates `episodes` independent trajectories of `steps` states each.
/// Episode `e` draws from `rng.child(e)`.
pub fn generate_dataset(
    kernel: &AnalyticKernel,
    initial: &InitialDist,
    field_shape: [usize; 3],
    episodes: usize,
    steps: usize,
    rng: &RngStream,
) -> Result<Dataset> {
    kernel.validate()?;
    if steps < 2 || episodes == 0 {
        return invalid(format!("need steps ≥ 2 and at least one episode, got steps = {steps}, episodes = {episodes}"));
    }
    let [c, h, w] = field_shape;
    let per = c * h * w;
    let trajectories: Vec<Vec<f64>> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let stream = rng.child(e as u64);
            let (mut x, mut stream) = initial.sample(&field_shape, &stream);
            let mut out = Vec::with_capacity(steps * per);
            out.extend_from_slice(x.data());
            for _ in 1..steps {
                let (next, s) = kernel.sample(&x, &stream)?;
                x = next;
                stream = s;
                out.extend_from_slice(x.data());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let fields = Tensor::new(vec![episodes * steps, c, h, w], trajectories.concat())?;
    Dataset::new(fields, default_latitudes(h), steps)
}
