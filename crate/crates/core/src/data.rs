//! Datasets: the CIFAR-10 binary loader, a procedurally generated stand-in
//! written in the same binary layout, and the synthetic denoise/demosaic
//! regression set.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    /// Target images with the same per-sample shape as the inputs.
    Images(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Per-sample `[C, H, W]`.
    pub shape: [usize; 3],
    pub inputs: Vec<f64>,
    pub targets: Targets,
    /// Random horizontal and vertical flips when batching for training.
    pub augment_flips: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchTargets {
    Labels(Vec<usize>),
    Images(Tensor),
}

impl Dataset {
    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.inputs[i * s..(i + 1) * s]
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.slice(0, n)
    }

    /// Samples `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let s = self.sample_len();
        let targets = match &self.targets {
            Targets::Labels(l) => Targets::Labels(l[start..end].to_vec()),
            Targets::Images(t) => Targets::Images(t[start * s..end * s].to_vec()),
        };
        Dataset {
            shape: self.shape,
            inputs: self.inputs[start * s..end * s].to_vec(),
            targets,
            augment_flips: self.augment_flips,
        }
    }

    /// Gathers samples in the given order without augmentation.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, BatchTargets)> {
        self.gather(idx, |_| (false, false))
    }

    /// Gathers samples, flipping each pair with probability 1/2 per axis when
    /// augmentation is enabled.
    pub fn batch_augmented<R: Rng>(&self, idx: &[usize], rng: &mut R) -> Result<(Tensor, BatchTargets)> {
        if !self.augment_flips {
            return self.batch(idx);
        }
        let flips: Vec<(bool, bool)> = idx.iter().map(|_| (rng.random(), rng.random())).collect();
        let mut k = 0;
        self.gather(idx, |_| {
            k += 1;
            flips[k - 1]
        })
    }

    fn gather(&self, idx: &[usize], mut flip: impl FnMut(usize) -> (bool, bool)) -> Result<(Tensor, BatchTargets)> {
        let s = self.sample_len();
        let mut xs = Vec::with_capacity(idx.len() * s);
        let mut ys = Vec::new();
        let mut labels = Vec::new();
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Dimension(format!("sample {i} out of {}", self.len())));
            }
            let (h, v) = flip(i);
            xs.extend(flip_image(&self.inputs[i * s..(i + 1) * s], self.shape, h, v));
            match &self.targets {
                Targets::Labels(l) => labels.push(l[i]),
                Targets::Images(t) => ys.extend(flip_image(&t[i * s..(i + 1) * s], self.shape, h, v)),
            }
        }
        let [c, hh, ww] = self.shape;
        let x = Tensor::new(&[idx.len(), c, hh, ww], xs)?;
        let y = match self.targets {
            Targets::Labels(_) => BatchTargets::Labels(labels),
            Targets::Images(_) => BatchTargets::Images(Tensor::new(&[idx.len(), c, hh, ww], ys)?),
        };
        Ok((x, y))
    }
}

/// Flips a `[C, H, W]` image horizontally and/or vertically.
pub fn flip_image(img: &[f64], shape: [usize; 3], horizontal: bool, vertical: bool) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = Vec::with_capacity(img.len());
    for ch in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.push(img[(ch * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixel bytes each.
pub fn parse_cifar10(bytes: &[u8], what: &str) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let expected = (bytes.len() / CIFAR_RECORD).max(1) * CIFAR_RECORD;
        return Err(Error::Format(format!(
            "{what}: size {} bytes is not a multiple of the {CIFAR_RECORD}-byte record \
             (expected {expected} bytes for {} records, got {})",
            bytes.len(),
            expected / CIFAR_RECORD,
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut inputs = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("{what}: record {r} has label {label}")));
        }
        labels.push(label);
        inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        shape: [3, 32, 32],
        inputs,
        targets: Targets::Labels(labels),
        augment_flips: false,
    })
}

/// Loads one CIFAR-10 batch file, or every `*.bin` file of a directory in
/// name order, keeping at most `subset` records.
pub fn load_cifar10(path: &Path, subset: Option<usize>) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Format(format!("{}: no .bin batch files", path.display())));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut bytes = Vec::new();
    for f in &files {
        let b = std::fs::read(f)?;
        // validate each file on its own so the error names it
        parse_cifar10_len(&b, &f.display().to_string())?;
        bytes.extend(b);
        if subset.is_some_and(|n| bytes.len() >= n * CIFAR_RECORD) {
            break;
        }
    }
    if let Some(n) = subset {
        bytes.truncate(n * CIFAR_RECORD);
    }
    parse_cifar10(&bytes, &path.display().to_string())
}

fn parse_cifar10_len(bytes: &[u8], what: &str) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        parse_cifar10(bytes, what).map(|_| ())
    } else {
        Ok(())
    }
}

/// A 10-class image set in CIFAR-10 binary layout. Each class is an
/// oriented sinusoidal grating (18 degrees apart) with jittered angle,
/// random frequency and phase, a class-biased colour tint, and pixel noise.
pub fn synthetic_cifar_bytes(seed: u64, n: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.12).expect("valid");
    let noise = Normal::new(0.0, 0.12).expect("valid");
    let mut out = Vec::with_capacity(n * CIFAR_RECORD);
    for _ in 0..n {
        let label = rng.random_range(0..CIFAR_CLASSES);
        let theta = label as f64 * PI / CIFAR_CLASSES as f64 + jitter.sample(&mut rng);
        let freq = rng.random_range(0.12..0.32) * 2.0 * PI;
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(0.2..0.45);
        let base = rng.random_range(0.35..0.65);
        let hue = label as f64 * 2.0 * PI / CIFAR_CLASSES as f64 + rng.random_range(-1.2..1.2);
        let tint: Vec<f64> = (0..3)
            .map(|c| 0.1 * (hue + c as f64 * 2.0 * PI / 3.0).cos())
            .collect();
        let (s, c) = theta.sin_cos();
        out.push(label as u8);
        for &t in &tint {
            for y in 0..32 {
                for x in 0..32 {
                    let u = (x as f64 - 15.5) * c + (y as f64 - 15.5) * s;
                    let v = base + t + contrast * (freq * u + phase).sin() + noise.sample(&mut rng);
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mosaic {
    /// RGGB Bayer subsampling: one colour sample per pixel.
    Bayer,
    /// Every channel sampled everywhere.
    Full,
}

impl Mosaic {
    pub fn sampled(self, ch: usize, y: usize, x: usize) -> bool {
        match self {
            Mosaic::Full => true,
            Mosaic::Bayer => match (y % 2, x % 2) {
                (0, 0) => ch == 0,
                (1, 1) => ch == 2,
                _ => ch == 1,
            },
        }
    }
}

/// Paired noisy-mosaiced / clean images. Clean images are smooth random
/// colour fields in `[0, 1]`; inputs keep the sampled positions plus
/// Gaussian noise of standard deviation `sigma` and are zero elsewhere.
pub fn synth_regression(seed: u64, n: usize, size: usize, sigma: f64, mosaic: Mosaic) -> Result<Dataset> {
    if n == 0 || size == 0 {
        return Err(Error::Parameter("synth_regression needs n >= 1 and size >= 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("noise sigma {sigma} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut clean = Vec::with_capacity(n * 3 * plane);
    let mut noisy = Vec::with_capacity(n * 3 * plane);
    for _ in 0..n {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.1..0.25),
                ]
            })
            .collect();
        let mix: Vec<[f64; 3]> = (0..3)
            .map(|_| [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)])
            .collect();
        let base: [f64; 3] = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
        let start = clean.len();
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let mut v = base[ch];
                    for (k, [fx, fy, ph, amp]) in waves.iter().enumerate() {
                        v += mix[k][ch] * amp * (fx * x as f64 + fy * y as f64 + ph).sin();
                    }
                    clean.push(v.clamp(0.0, 1.0));
                }
            }
        }
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let v = clean[start + ch * plane + y * size + x];
                    noisy.push(if mosaic.sampled(ch, y, x) {
                        v + sigma * gaussian(&mut rng)
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    Ok(Dataset {
        shape: [3, size, size],
        inputs: noisy,
        targets: Targets::Images(clean),
        augment_flips: true,
    })
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    Normal::new(0.0, 1.0).expect("valid").sample(rng)
}

/// Peak signal-to-noise ratio for peak value 1 over the aggregate MSE.
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "psnr over {} and {} values",
            pred.len(),
            target.len()
        )));
    }
    let mse = pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
    Ok(10.0 * (1.0 / mse).log10())
}

/// Fraction of correct argmax predictions, in percent.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = match logits.shape() {
        [n, k] if *n == labels.len() => *k,
        s => {
            return Err(Error::Dimension(format!(
                "logits {s:?} for {} labels",
                labels.len()
            )))
        }
    };
    let correct = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Index of the largest value, first one on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
