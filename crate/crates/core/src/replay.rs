//! Exemplar memory with balanced, loss-aware reservoir insertion and the
//! logit/label replay losses.

use crate::arrays::{Container, NamedArray};
use crate::batch::{images_to_tensor, labels_to_tensor};
use crate::error::{Error, Result};
use crate::losses;
use crate::taskstream::{ClassId, Image, LabelMap, IGNORE_ID};
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::collections::BTreeMap;
use std::path::Path;

const FORMAT_VERSION: &str = "1";

/// One stored image with its step-time labels and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayEntry {
    image: Image,
    labels: LabelMap,
    logits: Vec<f32>,
    channels: usize,
    histogram: BTreeMap<ClassId, u32>,
    loss: f64,
    importance: f64,
}

impl ReplayEntry {
    /// `logits` is `[channels, H, W]`, detached from any graph.
    pub fn new(image: Image, labels: LabelMap, logits: Vec<f32>, channels: usize) -> Result<Self> {
        let (h, w) = (labels.height(), labels.width());
        if (image.height(), image.width()) != (h, w) {
            return Err(Error::Shape {
                expected: format!("{h}x{w} image"),
                got: format!("{}x{}", image.height(), image.width()),
            });
        }
        if channels == 0 || logits.len() != channels * h * w {
            return Err(Error::Shape {
                expected: format!("{channels}x{h}x{w} logits"),
                got: format!("{} values", logits.len()),
            });
        }
        if let Some(&c) = labels
            .as_slice()
            .iter()
            .find(|&&c| c != IGNORE_ID && c as usize >= channels)
        {
            return Err(Error::UnknownClass(c));
        }
        let mut histogram = BTreeMap::new();
        for &c in labels.as_slice() {
            if c != 0 && c != IGNORE_ID {
                *histogram.entry(c).or_insert(0) += 1;
            }
        }
        Ok(Self {
            image,
            labels,
            logits,
            channels,
            histogram,
            loss: 0.0,
            importance: 0.0,
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Label-space size at insertion time, background included.
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Pixel counts of the non-background classes present.
    pub fn histogram(&self) -> &BTreeMap<ClassId, u32> {
        &self.histogram
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn importance(&self) -> f64 {
        self.importance
    }
}

/// Fixed-capacity memory. Below capacity every offer is stored; at capacity
/// an offer is first accepted with probability `capacity / seen`, then
/// replaces the least important entry if it is more important.
///
/// Importance is the min-max normalised loss minus `lambda` times the mean,
/// over the entry's classes, of the fraction of the memory holding that
/// class.
#[derive(Clone, Debug)]
pub struct ReservoirBuffer {
    capacity: usize,
    lambda: f64,
    entries: Vec<ReplayEntry>,
    seen: u64,
    rng: ChaCha8Rng,
}

impl ReservoirBuffer {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument {
                arg: "capacity",
                reason: "must be positive".into(),
            });
        }
        Ok(Self {
            capacity,
            lambda: 1.0,
            entries: Vec::with_capacity(capacity),
            seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    /// Number of entries containing each class.
    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            for &c in e.histogram.keys() {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Importance of every stored entry and of `candidate`, with class
    /// counts taken over the memory plus the candidate.
    fn importances(&self, candidate: &ReplayEntry) -> (Vec<f64>, f64) {
        let all = || self.entries.iter().chain(std::iter::once(candidate));
        let (lo, hi) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.loss), hi.max(e.loss))
        });
        let mut counts: BTreeMap<ClassId, usize> = BTreeMap::new();
        for e in all() {
            for &c in e.histogram.keys() {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        let score = |e: &ReplayEntry| {
            let norm = if hi > lo { (e.loss - lo) / (hi - lo) } else { 0.0 };
            let redundancy = if e.histogram.is_empty() {
                0.0
            } else {
                e.histogram
                    .keys()
                    .map(|c| counts[c] as f64 / self.capacity as f64)
                    .sum::<f64>()
                    / e.histogram.len() as f64
            };
            norm - self.lambda * redundancy
        };
        (self.entries.iter().map(score).collect(), score(candidate))
    }

    /// Offer an entry whose training loss was `loss`. Returns whether it was
    /// stored.
    pub fn maybe_insert(&mut self, mut entry: ReplayEntry, loss: f64) -> bool {
        self.seen += 1;
        entry.loss = loss;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return true;
        }
        let draw: f64 = self.rng.random();
        if draw >= self.capacity as f64 / self.seen as f64 {
            return false;
        }
        let (scores, candidate) = self.importances(&entry);
        for (e, s) in self.entries.iter_mut().zip(&scores) {
            e.importance = *s;
        }
        let (victim, &lowest) = scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("buffer at capacity is nonempty");
        if candidate > lowest {
            entry.importance = candidate;
            self.entries[victim] = entry;
            true
        } else {
            false
        }
    }

    /// Uniform sample of `k` indices: without replacement when `k` fits,
    /// with replacement otherwise.
    pub fn sample_indices(&mut self, k: usize) -> Result<Vec<usize>> {
        let n = self.entries.len();
        if n == 0 {
            return Err(Error::EmptyBuffer);
        }
        Ok(if k <= n {
            rand::seq::index::sample(&mut self.rng, n, k).into_vec()
        } else {
            (0..k).map(|_| self.rng.random_range(0..n)).collect()
        })
    }

    pub fn sample_batch(&mut self, k: usize) -> Result<Vec<&ReplayEntry>> {
        let idx = self.sample_indices(k)?;
        Ok(idx.into_iter().map(|i| &self.entries[i]).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::default();
        let meta = &mut c.metadata;
        meta.insert("format_version".into(), FORMAT_VERSION.into());
        meta.insert("capacity".into(), self.capacity.to_string());
        meta.insert("lambda".into(), serde_json::to_string(&self.lambda)?);
        meta.insert("seen".into(), self.seen.to_string());
        meta.insert("rng".into(), serde_json::to_string(&self.rng)?);
        let scores: Vec<(f64, f64, usize)> = self
            .entries
            .iter()
            .map(|e| (e.loss, e.importance, e.channels))
            .collect();
        meta.insert("entries".into(), serde_json::to_string(&scores)?);
        for (i, e) in self.entries.iter().enumerate() {
            let (h, w) = (e.labels.height(), e.labels.width());
            c.insert(
                format!("entry.{i:05}.image"),
                NamedArray::f32(vec![h, w, 3], e.image.as_slice().to_vec()),
            );
            c.insert(
                format!("entry.{i:05}.labels"),
                NamedArray::u8(vec![h, w], e.labels.as_slice().to_vec()),
            );
            c.insert(
                format!("entry.{i:05}.logits"),
                NamedArray::f32(vec![e.channels, h, w], e.logits.clone()),
            );
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        let version = c.meta("format_version", path)?;
        if version != FORMAT_VERSION {
            return Err(Error::malformed(path, format!("unsupported format_version {version}")));
        }
        let parse = |key: &str| -> Result<u64> {
            c.meta(key, path)?
                .parse()
                .map_err(|_| Error::malformed(path, format!("bad `{key}`")))
        };
        let capacity = parse("capacity")? as usize;
        let seen = parse("seen")?;
        let lambda: f64 = serde_json::from_str(c.meta("lambda", path)?)
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        let rng: ChaCha8Rng = serde_json::from_str(c.meta("rng", path)?)
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        let scores: Vec<(f64, f64, usize)> = serde_json::from_str(c.meta("entries", path)?)
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        if capacity == 0 || scores.len() > capacity {
            return Err(Error::malformed(path, "entry count exceeds capacity"));
        }
        let mut entries = Vec::with_capacity(capacity);
        for (i, (loss, importance, channels)) in scores.into_iter().enumerate() {
            let (shape, img) = c.f32(&format!("entry.{i:05}.image"), path)?;
            let (h, w) = match shape {
                [h, w, 3] => (*h, *w),
                _ => return Err(Error::malformed(path, format!("entry {i}: bad image shape"))),
            };
            let image = Image::new(h, w, img.to_vec())?;
            let (_, lab) = c.u8(&format!("entry.{i:05}.labels"), path)?;
            let labels = LabelMap::new(h, w, lab.to_vec())?;
            let (_, logits) = c.f32(&format!("entry.{i:05}.logits"), path)?;
            let mut e = ReplayEntry::new(image, labels, logits.to_vec(), channels)
                .map_err(|err| Error::malformed(path, format!("entry {i}: {err}")))?;
            e.loss = loss;
            e.importance = importance;
            entries.push(e);
        }
        Ok(Self {
            capacity,
            lambda,
            entries,
            seen,
            rng,
        })
    }
}

/// Replayed entries stacked into tensors. Stored logits are zero-padded to
/// `channels`; `channel_mask` `[B, channels]` marks each entry's
/// non-background stored channels.
pub struct ReplayBatch {
    pub images: Tensor,
    pub labels: Tensor,
    pub stored_logits: Tensor,
    pub channel_mask: Tensor,
}

impl ReplayBatch {
    pub fn new(entries: &[&ReplayEntry], channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        let first = entries.first().ok_or(Error::EmptyBuffer)?;
        let (h, w) = (first.labels.height(), first.labels.width());
        let mut stored = vec![0f32; entries.len() * channels * h * w];
        let mut mask = vec![0f32; entries.len() * channels];
        for (b, e) in entries.iter().enumerate() {
            if e.channels > channels {
                return Err(Error::Shape {
                    expected: format!("at most {channels} stored channels"),
                    got: format!("{}", e.channels),
                });
            }
            if (e.labels.height(), e.labels.width()) != (h, w) {
                return Err(Error::Shape {
                    expected: format!("{h}x{w} entries"),
                    got: format!("{}x{}", e.labels.height(), e.labels.width()),
                });
            }
            let off = b * channels * h * w;
            stored[off..off + e.logits.len()].copy_from_slice(&e.logits);
            for k in 1..e.channels {
                mask[b * channels + k] = 1.0;
            }
        }
        let images: Vec<&Image> = entries.iter().map(|e| &e.image).collect();
        let labels: Vec<&LabelMap> = entries.iter().map(|e| &e.labels).collect();
        Ok(Self {
            images: images_to_tensor(&images, dtype, device)?,
            labels: labels_to_tensor(&labels, device)?,
            stored_logits: Tensor::from_vec(stored, (entries.len(), channels, h, w), device)?
                .to_dtype(dtype)?,
            channel_mask: Tensor::from_vec(mask, (entries.len(), channels), device)?.to_dtype(dtype)?,
        })
    }
}

/// Mean squared logit error over the stored non-background channels and
/// non-ignore pixels. `stored` must be a channel prefix of `current`.
pub fn der_loss(current: &Tensor, stored: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = current.dims4()?;
    let (sb, cs, sh, sw) = stored.dims4()?;
    if (sb, sh, sw) != (b, h, w) || cs > c || cs == 0 {
        return Err(Error::Shape {
            expected: format!("stored logits [{b}, <= {c}, {h}, {w}]"),
            got: format!("{:?}", stored.dims()),
        });
    }
    let padded = if cs < c {
        let pad = Tensor::zeros((b, c - cs, h, w), stored.dtype(), stored.device())?;
        Tensor::cat(&[stored, &pad], 1)?
    } else {
        stored.clone()
    };
    let row: Vec<f64> = (0..c).map(|k| if k >= 1 && k < cs { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(row, (1, c), current.device())?
        .to_dtype(current.dtype())?
        .broadcast_as((b, c))?;
    der_loss_masked(current, &padded, &mask, labels)
}

/// [`der_loss`] with a per-sample channel mask `[B, C]`; `stored` is
/// already padded to `current`'s shape.
pub fn der_loss_masked(
    current: &Tensor,
    stored: &Tensor,
    channel_mask: &Tensor,
    labels: &Tensor,
) -> Result<Tensor> {
    let (b, c, h, w) = current.dims4()?;
    if stored.dims() != current.dims() || channel_mask.dims() != [b, c] || labels.dims() != [b, h, w] {
        return Err(Error::Shape {
            expected: format!("stored {:?}, mask [{b}, {c}], labels [{b}, {h}, {w}]", current.dims()),
            got: format!(
                "stored {:?}, mask {:?}, labels {:?}",
                stored.dims(),
                channel_mask.dims(),
                labels.dims()
            ),
        });
    }
    let dt = current.dtype();
    let valid = labels.ne(IGNORE_ID as u32)?.to_dtype(dt)?.unsqueeze(1)?;
    let weight = channel_mask
        .reshape((b, c, 1, 1))?
        .broadcast_mul(&valid)?;
    let sq = (current - stored.detach())?.sqr()?;
    let n = weight.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    Ok(((sq * weight)?.sum_all()? / n)?)
}

/// Cross-entropy of current logits against stored step-time labels.
pub fn der_pp_loss(current: &Tensor, stored_labels: &Tensor, eps: f64) -> Result<Tensor> {
    losses::cross_entropy(current, stored_labels, eps)
}
