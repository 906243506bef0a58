//! Training objectives.
//!
//! All per-pixel losses take logits `z` as `[B, C, H, W]` (channel 0 is
//! background, then old classes, then the current step's classes) and
//! labels as a `[B, H, W]` `u32` tensor. Pixels labeled [`IGNORE_ID`] are
//! excluded and every loss is a mean over the remaining pixels.

use crate::error::{Error, Result};
use crate::nn;
use crate::taskstream::{StepSpec, IGNORE_ID};
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focal exponent applied to `1 - max Fg`.
    pub gamma: f64,
    /// Detector threshold selecting pixels for feature distillation.
    pub delta: f64,
    /// Weight of the logit replay term.
    pub alpha: f64,
    /// Weight of the label replay term.
    pub beta: f64,
    /// Weight of the masked distillation term.
    pub kappa: f64,
    /// Probability floor applied before every logarithm.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            delta: 0.7,
            alpha: 0.3,
            beta: 0.5,
            kappa: 1.0,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("kappa", self.kappa)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.eps > 0.0 && self.eps <= 1e-4) {
            return Err(Error::Config(format!("eps must be in (0, 1e-4], got {}", self.eps)));
        }
        Ok(())
    }
}

/// Channel layout at a step: background, `num_old` old classes, then
/// `num_new` current classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    pub num_old: usize,
    pub num_new: usize,
}

impl LabelSpace {
    pub fn new(num_old: usize, num_new: usize) -> Self {
        Self { num_old, num_new }
    }

    /// Layout implied by a step whose class IDs are consecutive.
    pub fn for_step(step: &StepSpec) -> Result<Self> {
        let first = *step.new_classes.first().ok_or_else(|| Error::InvalidArgument {
            arg: "step",
            reason: "step has no classes".into(),
        })? as usize;
        let n = step.new_classes.len();
        let consecutive = step
            .new_classes
            .iter()
            .enumerate()
            .all(|(i, &c)| c as usize == first + i);
        if first == 0 || !consecutive {
            return Err(Error::InvalidArgument {
                arg: "step",
                reason: format!("class IDs {:?} are not consecutive from >= 1", step.new_classes),
            });
        }
        Ok(Self::new(first - 1, n))
    }

    pub fn channels(&self) -> usize {
        1 + self.num_old + self.num_new
    }

    pub fn old_channels(&self) -> Range<usize> {
        1..1 + self.num_old
    }

    pub fn new_channels(&self) -> Range<usize> {
        1 + self.num_old..self.channels()
    }

    pub fn is_initial(&self) -> bool {
        self.num_old == 0
    }
}

fn check_logits(z: &Tensor, labels: &Tensor, channels: Option<usize>) -> Result<usize> {
    let (b, c, h, w) = z.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(Error::Shape {
            expected: format!("labels [{b}, {h}, {w}]"),
            got: format!("{:?}", labels.dims()),
        });
    }
    if let Some(expected) = channels {
        if c != expected {
            return Err(Error::Shape {
                expected: format!("{expected} logit channels"),
                got: format!("{c}"),
            });
        }
    }
    Ok(c)
}

/// `[1, C, 1, 1]` indicator of `range`.
fn channel_mask(c: usize, range: Range<usize>, z: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = (0..c).map(|k| if range.contains(&k) { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(v, (1, c, 1, 1), z.device())?.to_dtype(z.dtype())?)
}

/// Sum of probabilities over the channels selected by `mask`, `[B, H, W]`.
fn fold(p: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(p.broadcast_mul(mask)?.sum(1)?)
}

/// `[B, C, H, W]` one-hot of labels; ignore pixels map to all zeros.
pub fn one_hot(labels: &Tensor, c: usize, dtype: DType) -> Result<Tensor> {
    let ids = Tensor::arange(0u32, c as u32, labels.device())?.reshape((1, c, 1, 1))?;
    Ok(labels.unsqueeze(1)?.broadcast_eq(&ids)?.to_dtype(dtype)?)
}

fn valid_mask(labels: &Tensor, dtype: DType) -> Result<Tensor> {
    Ok(labels.ne(IGNORE_ID as u32)?.to_dtype(dtype)?)
}

fn masked_mean(per_pixel: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let n = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.max(1.0);
    Ok(((per_pixel * mask)?.sum_all()? / n)?)
}

fn neg_log(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.maximum(eps)?.log()?.neg()?)
}

/// Largest non-ignore label, if any.
fn max_label(labels: &Tensor) -> Result<Option<u32>> {
    let v = labels.flatten_all()?.to_vec1::<u32>()?;
    Ok(v.into_iter().filter(|&l| l != IGNORE_ID as u32).max())
}

/// Plain per-pixel cross-entropy.
pub fn cross_entropy(z: &Tensor, labels: &Tensor, eps: f64) -> Result<Tensor> {
    let c = check_logits(z, labels, None)?;
    if let Some(m) = max_label(labels)? {
        if m as usize >= c {
            return Err(Error::InvalidArgument {
                arg: "labels",
                reason: format!("label {m} has no logit channel (C = {c})"),
            });
        }
    }
    let p = nn::softmax(z, 1)?;
    let py = (p * one_hot(labels, c, z.dtype())?)?.sum(1)?;
    masked_mean(&neg_log(&py, eps)?, &valid_mask(labels, z.dtype())?)
}

/// Per-pixel focal weights `(1 - fg_max)^gamma`, detached.
pub fn focal_weights(fg_max: &Tensor, gamma: f64) -> Result<Tensor> {
    Ok((1.0 - fg_max.detach())?.powf(gamma)?)
}

/// Background/foreground loss of incremental steps.
///
/// A pixel labeled background is scored by the background probability; any
/// other pixel by the summed probability of the current classes. Each
/// pixel is weighted by `(1 - fg_max)^gamma` so pixels the detector flags
/// as old foreground are down-weighted. `fg_max` is `[B, H, W]` and never
/// receives gradient.
pub fn bg_fg_loss(
    z: &Tensor,
    labels: &Tensor,
    fg_max: &Tensor,
    space: LabelSpace,
    gamma: f64,
    eps: f64,
) -> Result<Tensor> {
    if space.is_initial() {
        return Err(Error::FirstStep(1));
    }
    let c = check_logits(z, labels, Some(space.channels()))?;
    if fg_max.dims() != labels.dims() {
        return Err(Error::Shape {
            expected: format!("fg_max {:?}", labels.dims()),
            got: format!("{:?}", fg_max.dims()),
        });
    }
    let dt = z.dtype();
    let p = nn::softmax(z, 1)?;
    let p_new = fold(&p, &channel_mask(c, space.new_channels(), z)?)?;
    let p_bg = p.narrow(1, 0, 1)?.squeeze(1)?;
    let is_fg = labels.ne(0u32)?.to_dtype(dt)?;
    let folded = ((&is_fg * p_new)? + ((1.0 - &is_fg)? * p_bg)?)?;
    let per_pixel = (focal_weights(fg_max, gamma)?.to_dtype(dt)? * neg_log(&folded, eps)?)?;
    masked_mean(&per_pixel, &valid_mask(labels, dt)?)
}

/// Unbiased new-class loss: background and old classes share one folded
/// probability; current classes are scored individually.
pub fn new_class_loss(z: &Tensor, labels: &Tensor, space: LabelSpace, eps: f64) -> Result<Tensor> {
    if space.is_initial() {
        return Err(Error::FirstStep(1));
    }
    let c = check_logits(z, labels, Some(space.channels()))?;
    let dt = z.dtype();
    let p = nn::softmax(z, 1)?;
    let p_rest = fold(&p, &channel_mask(c, 0..space.num_old + 1, z)?)?;
    let p_label = (&p * one_hot(labels, c, dt)?)?.sum(1)?;
    let is_new = labels
        .ge(space.new_channels().start as u32)?
        .to_dtype(dt)?
        .mul(&labels.lt(c as u32)?.to_dtype(dt)?)?;
    let folded = ((&is_new * p_label)? + ((1.0 - &is_new)? * p_rest)?)?;
    masked_mean(&neg_log(&folded, eps)?, &valid_mask(labels, dt)?)
}

/// Classification loss: plain cross-entropy at the first step, otherwise
/// the sum of [`bg_fg_loss`] and [`new_class_loss`].
pub fn bacs_loss(
    z: &Tensor,
    labels: &Tensor,
    fg_max: Option<&Tensor>,
    space: LabelSpace,
    gamma: f64,
    eps: f64,
) -> Result<Tensor> {
    if space.is_initial() {
        check_logits(z, labels, Some(space.channels()))?;
        return cross_entropy(z, labels, eps);
    }
    let fg = fg_max.ok_or_else(|| Error::InvalidArgument {
        arg: "fg_max",
        reason: "detector scores are required at incremental steps".into(),
    })?;
    Ok((bg_fg_loss(z, labels, fg, space, gamma, eps)? + new_class_loss(z, labels, space, eps)?)?)
}

/// Feature distillation restricted to pixels with `fg_max > delta`:
/// squared L2 distance between element-wise squared teacher and student
/// penultimate features, averaged over selected pixels.
pub fn masked_kd_loss(
    student: &Tensor,
    teacher: &Tensor,
    fg_max: &Tensor,
    delta: f64,
) -> Result<Tensor> {
    if student.dims() != teacher.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", student.dims()),
            got: format!("{:?}", teacher.dims()),
        });
    }
    let (b, _, h, w) = student.dims4()?;
    if fg_max.dims() != [b, h, w] {
        return Err(Error::Shape {
            expected: format!("fg_max [{b}, {h}, {w}]"),
            got: format!("{:?}", fg_max.dims()),
        });
    }
    let dt = student.dtype();
    let mask = fg_max.detach().gt(delta)?.to_dtype(dt)?;
    let diff = (teacher.detach().sqr()? - student.sqr()?)?.sqr()?.sum(1)?;
    masked_mean(&diff, &mask)
}

/// Scalar loss terms of one optimisation step.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub classification: Tensor,
    pub der: Option<Tensor>,
    pub der_pp: Option<Tensor>,
    pub kd: Option<Tensor>,
    pub detector: Tensor,
}

/// Weighted total: classification + α·der + β·der++ + κ·kd + detector.
pub fn total_loss(terms: &LossTerms, cfg: &LossConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut total = (&terms.classification + &terms.detector)?;
    for (term, weight) in [
        (&terms.der, cfg.alpha),
        (&terms.der_pp, cfg.beta),
        (&terms.kd, cfg.kappa),
    ] {
        if let Some(t) = term {
            total = (total + (t * weight)?)?;
        }
    }
    Ok(total)
}
