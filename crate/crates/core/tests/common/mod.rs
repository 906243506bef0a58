//! Scalar reference implementations and helpers shared by the integration
//! tests. Every oracle here works on plain `Vec<f64>` with explicit loops so
//! it shares no code path with the tensor implementations.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IGNORE: u32 = 255;

/// Dense `[B, C, H, W]` array in row-major order.
#[derive(Clone, Debug)]
pub struct Nchw {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Nchw {
    pub fn new(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), b * c * h * w);
        Self { b, c, h, w, data }
    }

    pub fn at(&self, b: usize, c: usize, i: usize) -> f64 {
        self.data[(b * self.c + c) * self.h * self.w + i]
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), (self.b, self.c, self.h, self.w), &Device::Cpu).unwrap()
    }

    pub fn var(&self) -> Var {
        Var::from_tensor(&self.tensor()).unwrap()
    }
}

/// Labels `[B, H, W]` plus a matching per-pixel map (e.g. Fg_max).
pub fn labels_tensor(labels: &[u32], b: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(labels.to_vec(), (b, h, w), &Device::Cpu).unwrap()
}

pub fn map_tensor(v: &[f64], b: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_vec(v.to_vec(), (b, h, w), &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps the oracle side free of extra dependencies.
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// Softmax over channels of pixel `(b, i)`.
pub fn softmax_at(z: &Nchw, b: usize, i: usize) -> Vec<f64> {
    let m = (0..z.c).map(|c| z.at(b, c, i)).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..z.c).map(|c| (z.at(b, c, i) - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn nlog(v: f64, eps: f64) -> f64 {
    -(v.max(eps)).ln()
}

pub fn ce_oracle(z: &Nchw, labels: &[u32], eps: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..z.b {
        for i in 0..z.pixels() {
            let y = labels[b * z.pixels() + i];
            if y == IGNORE {
                continue;
            }
            let p = softmax_at(z, b, i);
            sum += nlog(p[y as usize], eps);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Background/foreground focal loss with `num_old` old channels after the
/// background channel and the rest current.
pub fn bg_fg_oracle(z: &Nchw, labels: &[u32], fg: &[f64], num_old: usize, gamma: f64, eps: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..z.b {
        for i in 0..z.pixels() {
            let k = b * z.pixels() + i;
            let y = labels[k];
            if y == IGNORE {
                continue;
            }
            let p = softmax_at(z, b, i);
            let folded = if y == 0 {
                p[0]
            } else {
                p[1 + num_old..].iter().sum()
            };
            sum += (1.0 - fg[k]).powf(gamma) * nlog(folded, eps);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

pub fn new_class_oracle(z: &Nchw, labels: &[u32], num_old: usize, eps: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..z.b {
        for i in 0..z.pixels() {
            let y = labels[b * z.pixels() + i];
            if y == IGNORE {
                continue;
            }
            let p = softmax_at(z, b, i);
            let folded = if (y as usize) > num_old {
                p[y as usize]
            } else {
                p[..=num_old].iter().sum()
            };
            sum += nlog(folded, eps);
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

pub fn kd_oracle(student: &Nchw, teacher: &Nchw, fg: &[f64], delta: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..student.b {
        for i in 0..student.pixels() {
            if fg[b * student.pixels() + i] <= delta {
                continue;
            }
            n += 1;
            for c in 0..student.c {
                let t = teacher.at(b, c, i);
                let s = student.at(b, c, i);
                let d = t * t - s * s;
                sum += d * d;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Logit replay: mean squared error over stored channels `1..stored.c`
/// and non-ignore pixels.
pub fn der_oracle(current: &Nchw, stored: &Nchw, labels: &[u32]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for b in 0..current.b {
        for i in 0..current.pixels() {
            if labels[b * current.pixels() + i] == IGNORE {
                continue;
            }
            for c in 1..stored.c {
                let d = current.at(b, c, i) - stored.at(b, c, i);
                sum += d * d;
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

/// Binary focal loss on raw logits.
pub fn focal_bce_oracle(logits: &[f64], labels: &[u32], positives: &[u32], gamma: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (x, &y) in logits.iter().zip(labels) {
        if y == IGNORE {
            continue;
        }
        let p = 1.0 / (1.0 + (-x).exp());
        sum += if positives.contains(&y) {
            -(1.0 - p).powf(gamma) * p.ln()
        } else {
            -p.powf(gamma) * (1.0 - p).ln()
        };
        n += 1;
    }
    sum / n.max(1) as f64
}

/// Random incremental-step case: `num_old` old channels and `num_new`
/// current channels, labels drawn from background, current classes and
/// ignore.
pub struct StepCase {
    pub z: Nchw,
    pub labels: Vec<u32>,
    pub fg: Vec<f64>,
    pub num_old: usize,
    pub num_new: usize,
}

pub fn step_case(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> StepCase {
    let num_old = rng.random_range(1..=3);
    let num_new = rng.random_range(1..=2);
    let c = 1 + num_old + num_new;
    let z = Nchw::new(b, c, h, w, normal_vec(rng, b * c * h * w, 2.0));
    let labels = (0..b * h * w)
        .map(|_| match rng.random_range(0..10) {
            0 => IGNORE,
            1..=4 => 0,
            _ => (1 + num_old + rng.random_range(0..num_new)) as u32,
        })
        .collect();
    let fg = (0..b * h * w).map(|_| rng.random::<f64>()).collect();
    StepCase {
        z,
        labels,
        fg,
        num_old,
        num_new,
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + h;
            let up = f(&v);
            v[i] = orig - h;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Plain reservoir sampling over class tags, used as the balance baseline.
pub fn plain_reservoir(stream: &[u8], capacity: usize, seed: u64) -> Vec<u8> {
    let mut rng = rng(seed);
    let mut buf = Vec::with_capacity(capacity);
    for (seen, &c) in stream.iter().enumerate() {
        if buf.len() < capacity {
            buf.push(c);
        } else {
            let j = rng.random_range(0..=seen);
            if j < capacity {
                buf[j] = c;
            }
        }
    }
    buf
}

/// 80/5/5/5/5 class stream, shuffled.
pub fn skewed_stream(n: usize, seed: u64) -> Vec<u8> {
    use rand::seq::SliceRandom;
    let mut s: Vec<u8> = (0..n)
        .map(|i| match i * 100 / n {
            0..=79 => 1,
            80..=84 => 2,
            85..=89 => 3,
            90..=94 => 4,
            _ => 5,
        })
        .collect();
    s.shuffle(&mut rng(seed ^ 0x5eed));
    s
}

pub fn max_share(classes: impl IntoIterator<Item = u8>) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    let mut n = 0usize;
    for c in classes {
        *counts.entry(c).or_insert(0usize) += 1;
        n += 1;
    }
    *counts.values().max().unwrap_or(&0) as f64 / n.max(1) as f64
}

/// Brute-force confusion counts for `classes` classes.
pub fn brute_confusion(truth: &[u8], pred: &[u32], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for t in 0..classes {
        for p in 0..classes {
            m[t][p] = truth
                .iter()
                .zip(pred)
                .filter(|(&a, &b)| a as usize == t && b as usize == p)
                .count() as u64;
        }
    }
    m
}

pub fn brute_iou(m: &[Vec<u64>], c: usize) -> Option<f64> {
    let tp = m[c][c];
    let fn_: u64 = m[c].iter().sum::<u64>() - tp;
    let fp: u64 = m.iter().map(|row| row[c]).sum::<u64>() - tp;
    let union = tp + fn_ + fp;
    (union > 0).then(|| tp as f64 / union as f64)
}
