//! Detector of old-class foreground hidden in the background label.
//!
//! Encoder features are projected by a small pixel-wise network `K`
//! (trained only in the first step). Each step `t` owns a prototype, the
//! running mean of projected embeddings of its labeled foreground pixels,
//! and a 1x1 head that scores the comparison feature
//! `[e ⊙ P, |e − P|]` between a pixel embedding `e` and the prototype `P`.
//! Heads of completed steps are frozen.

use crate::error::{Error, Result};
use crate::nn::{self, ParamSource, ParamStore};
use crate::taskstream::{ClassId, IGNORE_ID};
use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    /// Projection width `p`.
    pub proj_width: usize,
    /// Focal exponent of the detector's binary loss.
    pub focal_gamma: f64,
    /// Read encoder features without letting detector gradients reach the
    /// encoder.
    pub detach_encoder: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            proj_width: 32,
            focal_gamma: 2.0,
            detach_encoder: true,
        }
    }
}

/// Running mean of foreground embeddings for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub mean: Vec<f64>,
    pub count: u64,
}

impl Prototype {
    fn zeros(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            count: 0,
        }
    }

    /// Fold `m` new embeddings with sum `sum` into the mean.
    pub fn absorb(&mut self, sum: &[f64], m: u64) {
        if m == 0 {
            return;
        }
        let n = self.count as f64;
        let total = n + m as f64;
        for (p, s) in self.mean.iter_mut().zip(sum) {
            *p = (n * *p + s) / total;
        }
        self.count += m;
    }

    pub fn norm(&self) -> f64 {
        self.mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Per-step foreground logits `[B, steps, H, W]`.
#[derive(Clone, Debug)]
pub struct ForegroundScores {
    pub logits: Tensor,
}

impl ForegroundScores {
    pub fn num_steps(&self) -> Result<usize> {
        Ok(self.logits.dim(1)?)
    }

    /// Foreground probabilities in `[0, 1]`.
    pub fn probs(&self) -> Result<Tensor> {
        Ok(softplus(&self.logits.neg()?)?.neg()?.exp()?)
    }

    /// Per-pixel maximum probability over steps, `[B, H, W]`, detached.
    pub fn max_prob(&self) -> Result<Tensor> {
        Ok(self.probs()?.max(1)?.detach())
    }
}

/// `log(1 + exp(x))`, stable for large |x|.
fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?
}

const NORM_EPS: f64 = 1e-12;

fn k_names() -> [String; 4] {
    [
        "det.k.0.weight".into(),
        "det.k.0.bias".into(),
        "det.k.1.weight".into(),
        "det.k.1.bias".into(),
    ]
}

fn head_names(t: usize) -> (String, String) {
    (format!("det.head.{t:02}.weight"), format!("det.head.{t:02}.bias"))
}

pub struct Detector {
    cfg: DetectorConfig,
    enc_width: usize,
    params: ParamStore,
    prototypes: Vec<Prototype>,
    step: usize,
    dtype: DType,
    device: Device,
}

impl Detector {
    pub fn new(
        cfg: DetectorConfig,
        enc_width: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if cfg.proj_width == 0 || cfg.focal_gamma < 0.0 {
            return Err(Error::Config("detector needs p > 0 and gamma >= 0".into()));
        }
        let p = cfg.proj_width;
        let mut params = ParamStore::default();
        let [w0, b0, w1, b1] = k_names();
        let bound = |fan_in: usize| (6.0 / fan_in as f64).sqrt();
        params.insert(w0, &nn::uniform(rng, &[enc_width, p], bound(enc_width), dtype, device)?)?;
        params.insert(b0, &Tensor::zeros(p, dtype, device)?)?;
        params.insert(w1, &nn::uniform(rng, &[p, p], (3.0 / p as f64).sqrt(), dtype, device)?)?;
        params.insert(b1, &Tensor::zeros(p, dtype, device)?)?;
        Ok(Self {
            cfg,
            enc_width,
            params,
            prototypes: Vec::new(),
            step: 0,
            dtype,
            device: device.clone(),
        })
    }

    /// Restore from checkpointed parameters and prototypes.
    pub fn from_parts(
        cfg: DetectorConfig,
        enc_width: usize,
        params: ParamStore,
        prototypes: Vec<Prototype>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        for name in k_names() {
            params.var(&name)?;
        }
        for t in 1..=prototypes.len() {
            params.var(&head_names(t).0)?;
        }
        Ok(Self {
            cfg,
            enc_width,
            params,
            step: prototypes.len(),
            prototypes,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn enc_width(&self) -> usize {
        self.enc_width
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn projector_frozen(&self) -> bool {
        self.step > 1
    }

    pub fn head_frozen(&self, t: usize) -> bool {
        t < self.step
    }

    /// Open step `t`: add its head and an empty prototype, freezing earlier
    /// heads (and `K` once past the first step).
    pub fn begin_step(&mut self, t: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if t != self.step + 1 {
            return Err(Error::InvalidArgument {
                arg: "t",
                reason: format!("expected step {}, got {t}", self.step + 1),
            });
        }
        let p = self.cfg.proj_width;
        let (w, b) = head_names(t);
        let bound = (3.0 / (2 * p) as f64).sqrt();
        self.params
            .insert(w, &nn::uniform(rng, &[2 * p], bound, self.dtype, &self.device)?)?;
        self.params
            .insert(b, &Tensor::zeros(1, self.dtype, &self.device)?)?;
        self.prototypes.push(Prototype::zeros(p));
        self.step = t;
        Ok(())
    }

    /// Parameters the optimizer may update at the current step.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.step == 1 {
            names.extend(k_names());
        }
        if self.step >= 1 {
            let (w, b) = head_names(self.step);
            names.push(w);
            names.push(b);
        }
        names
    }

    /// Parameters that must not change during the current step.
    pub fn frozen_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.projector_frozen() {
            names.extend(k_names());
        }
        for t in 1..self.step {
            let (w, b) = head_names(t);
            names.push(w);
            names.push(b);
        }
        names
    }

    pub fn projector_names() -> Vec<String> {
        k_names().to_vec()
    }

    pub fn head_param_names(t: usize) -> Vec<String> {
        let (w, b) = head_names(t);
        vec![w, b]
    }

    fn k_param(&self, name: &str) -> Result<Tensor> {
        let t = self.params.param(name)?;
        Ok(if self.projector_frozen() { t.detach() } else { t })
    }

    /// Pixel-wise projection `K`, rescaled to unit root-mean-square per
    /// pixel: `[B, c, h, w] -> [B, p, h, w]`.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = features.dims4()?;
        if c != self.enc_width {
            return Err(Error::Shape {
                expected: format!("{} feature channels", self.enc_width),
                got: format!("{c}"),
            });
        }
        let x = if self.cfg.detach_encoder {
            features.detach()
        } else {
            features.clone()
        };
        let [w0, b0, w1, b1] = k_names();
        let x = x.permute((0, 2, 3, 1))?.contiguous()?;
        let h = nn::linear(&x, &self.k_param(&w0)?, &self.k_param(&b0)?)?.relu()?;
        let e = nn::linear(&h, &self.k_param(&w1)?, &self.k_param(&b1)?)?;
        let rms = (e.sqr()?.mean_keepdim(3)? + NORM_EPS)?.sqrt()?;
        let e = e.broadcast_div(&rms)?;
        Ok(e.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Projection upsampled to the label resolution.
    pub fn embed(&self, features: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        nn::upsample_bilinear(&self.project(features)?, height, width)
    }

    /// Fold the embeddings of masked pixels into the prototype of step `t`.
    /// `mask` is in `[B, H, W]` order. Embeddings are read as plain values;
    /// no gradient is recorded.
    pub fn update_prototype(&mut self, t: usize, embeddings: &Tensor, mask: &[bool]) -> Result<()> {
        let proto = self
            .prototypes
            .get_mut(t.wrapping_sub(1))
            .ok_or(Error::NoPrototypes)?;
        let (b, p, h, w) = embeddings.dims4()?;
        if mask.len() != b * h * w {
            return Err(Error::Shape {
                expected: format!("{} mask entries", b * h * w),
                got: format!("{}", mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Ok(());
        }
        let hw = h * w;
        let v = embeddings
            .detach()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let mut sum = vec![0.0; p];
        let mut m = 0u64;
        for bi in 0..b {
            for i in 0..hw {
                if !mask[bi * hw + i] {
                    continue;
                }
                m += 1;
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += v[(bi * p + c) * hw + i];
                }
            }
        }
        proto.absorb(&sum, m);
        Ok(())
    }

    fn head_logit(&self, t: usize, embeddings: &Tensor) -> Result<Tensor> {
        let p = self.cfg.proj_width;
        let proto = Tensor::from_vec(self.prototypes[t - 1].mean.clone(), (1, p, 1, 1), &self.device)?
            .to_dtype(embeddings.dtype())?;
        let (wn, bn) = head_names(t);
        let (mut w, mut b) = (self.params.param(&wn)?, self.params.param(&bn)?);
        if self.head_frozen(t) {
            w = w.detach();
            b = b.detach();
        }
        let prod = embeddings.broadcast_mul(&proto)?;
        let diff = embeddings.broadcast_sub(&proto)?.abs()?;
        let feat = Tensor::cat(&[&prod, &diff], 1)?;
        let logit = feat
            .broadcast_mul(&w.reshape((1, 2 * p, 1, 1))?)?
            .sum_keepdim(1)?
            .broadcast_add(&b.reshape((1, 1, 1, 1))?)?;
        Ok(logit)
    }

    /// Scores of heads `first..=last` (1-based, inclusive).
    pub fn scores_for(&self, embeddings: &Tensor, first: usize, last: usize) -> Result<ForegroundScores> {
        if self.prototypes.is_empty() {
            return Err(Error::NoPrototypes);
        }
        if first == 0 || last < first || last > self.prototypes.len() {
            return Err(Error::InvalidArgument {
                arg: "heads",
                reason: format!("{first}..={last} outside 1..={}", self.prototypes.len()),
            });
        }
        let logits = (first..=last)
            .map(|t| self.head_logit(t, embeddings))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForegroundScores {
            logits: Tensor::cat(&logits, 1)?,
        })
    }

    /// Scores of every head up to the current step.
    pub fn foreground_scores(&self, embeddings: &Tensor) -> Result<ForegroundScores> {
        self.scores_for(embeddings, 1, self.prototypes.len())
    }

    /// Maximum foreground probability over the heads of completed steps
    /// (`1..t`), detached. `None` in the first step.
    pub fn old_foreground_max(&self, embeddings: &Tensor) -> Result<Option<Tensor>> {
        if self.step < 2 {
            return Ok(None);
        }
        let s = self.scores_for(embeddings, 1, self.step - 1)?;
        Ok(Some(s.max_prob()?))
    }
}

/// Binary focal loss of a single head. `logits` is `[B, 1, H, W]` or
/// `[B, H, W]`; pixels labeled with one of `positives` are targets `1`,
/// every other non-ignore pixel is `0`. Mean over non-ignore pixels.
pub fn detector_loss(
    logits: &Tensor,
    labels: &Tensor,
    positives: &[ClassId],
    gamma: f64,
) -> Result<Tensor> {
    let x = match logits.rank() {
        4 => logits.squeeze(1)?,
        _ => logits.clone(),
    };
    if x.dims() != labels.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", labels.dims()),
            got: format!("{:?}", x.dims()),
        });
    }
    let dt = x.dtype();
    let valid = labels.ne(IGNORE_ID as u32)?.to_dtype(dt)?;
    let mut target = labels.zeros_like()?.to_dtype(dt)?;
    for &c in positives {
        target = (target + labels.eq(c as u32)?.to_dtype(dt)?)?;
    }
    let log_p = softplus(&x.neg()?)?.neg()?;
    let log_q = softplus(&x)?.neg()?;
    let pos = ((log_q.clone() * gamma)?.exp()? * &log_p)?;
    let neg = ((log_p * gamma)?.exp()? * &log_q)?;
    let per_pixel = ((&target * pos)? + ((1.0 - &target)? * neg)?)?.neg()?;
    let n = valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    Ok(((per_pixel * valid)?.sum_all()? / n)?)
}
