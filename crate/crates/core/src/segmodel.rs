//! Segmentation network: a small convolutional encoder followed by a
//! transformer decoder that processes patch embeddings jointly with one
//! learnable token per class. Logits are dot products between output
//! patches and output class tokens, so adding a class means appending a
//! token rather than a new convolutional head.

use crate::error::{Error, Result};
use crate::nn::{self, FrozenParams, ParamSource, ParamStore};
use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Spatial stride of the encoder output.
pub const ENCODER_STRIDE: usize = 4;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenInit {
    /// Mean of every existing class token, background included.
    Mean,
    /// Copy of the background token.
    Background,
    Random,
}

impl fmt::Display for TokenInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenInit::Mean => "mean",
            TokenInit::Background => "background",
            TokenInit::Random => "random",
        })
    }
}

impl FromStr for TokenInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(TokenInit::Mean),
            "background" => Ok(TokenInit::Background),
            "random" => Ok(TokenInit::Random),
            other => Err(Error::Config(format!("unknown token init `{other}`"))),
        }
    }
}

/// How class scores are produced from decoder outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Class tokens attend jointly with patches; logits are dot products.
    ClassTokens,
    /// Patch-only decoder with one linear classifier per class, new classes
    /// initialised from the background classifier.
    MultiClassifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Encoder channel width.
    pub enc_width: usize,
    /// Decoder width `d`.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            enc_width: 64,
            dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            head: HeadKind::ClassTokens,
        }
    }
}

impl ModelConfig {
    pub fn feature_size(&self) -> (usize, usize) {
        (
            self.height.div_ceil(ENCODER_STRIDE),
            self.width.div_ceil(ENCODER_STRIDE),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.enc_width == 0 || self.dim == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    /// Encoder features `[B, enc_width, H/4, W/4]`.
    pub features: Tensor,
    /// Penultimate per-pixel features `[B, d, H, W]`.
    pub penultimate: Tensor,
    /// Pre-softmax logits `[B, num_classes, H, W]`, background in channel 0.
    pub logits: Tensor,
}

/// Anything that maps an image batch to [`ModelOutputs`].
pub trait Segmenter {
    fn config(&self) -> &ModelConfig;
    /// Number of logit channels, background included.
    fn num_classes(&self) -> usize;
    /// Floating-point type of parameters and expected inputs.
    fn dtype(&self) -> DType;
    fn forward(&self, images: &Tensor) -> Result<ModelOutputs>;
}

fn enc_names(i: usize) -> (String, String) {
    (format!("enc.{i}.weight"), format!("enc.{i}.bias"))
}

pub fn token_name(c: usize) -> String {
    format!("dec.token.{c:03}")
}

pub fn scale_name(c: usize) -> String {
    format!("dec.scale.{c:03}")
}

pub fn shift_name(c: usize) -> String {
    format!("dec.shift.{c:03}")
}

pub fn classifier_names(c: usize) -> (String, String) {
    (format!("dec.cls.weight.{c:03}"), format!("dec.cls.bias.{c:03}"))
}

const ENC_STRIDES: [usize; 4] = [1, 2, 2, 1];

fn stack_params(p: &dyn ParamSource, names: impl Iterator<Item = String>) -> Result<Tensor> {
    let ts = names.map(|n| p.param(&n)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

fn attention(p: &dyn ParamSource, cfg: &ModelConfig, l: usize, x: &Tensor) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    let hd = d / cfg.heads;
    let qkv = nn::linear(
        x,
        &p.param(&format!("dec.{l}.qkv.weight"))?,
        &p.param(&format!("dec.{l}.qkv.bias"))?,
    )?;
    let split = |i: usize| -> Result<Tensor> {
        Ok(qkv
            .narrow(2, i * d, d)?
            .reshape((b, n, cfg.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?)
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);
    let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
    let attn = nn::softmax(&scores, 3)?;
    let ctx = attn
        .matmul(&v)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, n, d))?;
    nn::linear(
        &ctx,
        &p.param(&format!("dec.{l}.out.weight"))?,
        &p.param(&format!("dec.{l}.out.bias"))?,
    )
}

fn decoder_layer(p: &dyn ParamSource, cfg: &ModelConfig, l: usize, x: &Tensor) -> Result<Tensor> {
    let ln = |name: &str, x: &Tensor| -> Result<Tensor> {
        nn::layer_norm(
            x,
            &p.param(&format!("dec.{l}.{name}.gain"))?,
            &p.param(&format!("dec.{l}.{name}.bias"))?,
            LN_EPS,
        )
    };
    let x = (x + attention(p, cfg, l, &ln("ln1", x)?)?)?;
    let h = nn::linear(
        &ln("ln2", &x)?,
        &p.param(&format!("dec.{l}.fc1.weight"))?,
        &p.param(&format!("dec.{l}.fc1.bias"))?,
    )?
    .gelu()?;
    let h = nn::linear(
        &h,
        &p.param(&format!("dec.{l}.fc2.weight"))?,
        &p.param(&format!("dec.{l}.fc2.bias"))?,
    )?;
    Ok((x + h)?)
}

/// Shared forward pass for live and frozen parameters.
fn forward_with(
    p: &dyn ParamSource,
    cfg: &ModelConfig,
    num_classes: usize,
    images: &Tensor,
) -> Result<ModelOutputs> {
    let (b, c, h, w) = images.dims4()?;
    if (c, h, w) != (3, cfg.height, cfg.width) {
        return Err(Error::Shape {
            expected: format!("[B, 3, {}, {}]", cfg.height, cfg.width),
            got: format!("{:?}", images.dims()),
        });
    }

    let mut x = images.clone();
    for (i, &stride) in ENC_STRIDES.iter().enumerate() {
        let (wn, bn) = enc_names(i);
        let bias = p.param(&bn)?.reshape((1, (), 1, 1))?;
        x = x
            .conv2d(&p.param(&wn)?, 1, stride, 1, 1)?
            .broadcast_add(&bias)?
            .relu()?;
    }
    let features = x;
    let (_, _, fh, fw) = features.dims4()?;
    let n_patches = fh * fw;
    let d = cfg.dim;

    let seq = features.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
    let patches = nn::linear(
        &seq,
        &p.param("dec.patch.weight")?,
        &p.param("dec.patch.bias")?,
    )?
    .broadcast_add(&p.param("dec.pos")?)?;

    let (patch_out, patch_logits) = match cfg.head {
        HeadKind::ClassTokens => {
            let tokens = stack_params(p, (0..num_classes).map(token_name))?;
            let tokens = tokens.unsqueeze(0)?.broadcast_as((b, num_classes, d))?;
            let mut seq = Tensor::cat(&[&patches, &tokens], 1)?;
            for l in 0..cfg.layers {
                seq = decoder_layer(p, cfg, l, &seq)?;
            }
            let po = seq.narrow(1, 0, n_patches)?;
            let qo = seq.narrow(1, n_patches, num_classes)?;
            let scale = stack_params(p, (0..num_classes).map(scale_name))?.reshape((1, 1, num_classes))?;
            let shift = stack_params(p, (0..num_classes).map(shift_name))?.reshape((1, 1, num_classes))?;
            let s = po
                .matmul(&qo.t()?)?
                .broadcast_mul(&scale)?
                .broadcast_add(&shift)?;
            (po, s)
        }
        HeadKind::MultiClassifier => {
            let mut seq = patches;
            for l in 0..cfg.layers {
                seq = decoder_layer(p, cfg, l, &seq)?;
            }
            let wc = stack_params(p, (0..num_classes).map(|c| classifier_names(c).0))?;
            let bc = stack_params(p, (0..num_classes).map(|c| classifier_names(c).1))?.reshape(num_classes)?;
            let s = nn::linear(&seq, &wc.t()?, &bc)?;
            (seq, s)
        }
    };

    let logits = patch_logits
        .transpose(1, 2)?
        .reshape((b, num_classes, fh, fw))?;
    let logits = nn::upsample_bilinear(&logits, h, w)?;
    let penultimate = patch_out.transpose(1, 2)?.reshape((b, d, fh, fw))?;
    let penultimate = nn::upsample_bilinear(&penultimate, h, w)?;
    Ok(ModelOutputs {
        features,
        penultimate,
        logits,
    })
}

/// Trainable segmentation model.
pub struct SegModel {
    cfg: ModelConfig,
    num_classes: usize,
    params: ParamStore,
    dtype: DType,
    device: Device,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, dt: DType, dev: &Device) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    nn::uniform(rng, &[fan_in, fan_out], bound, dt, dev)
}

impl SegModel {
    /// Fresh model with background plus `initial_classes` foreground classes.
    pub fn new(
        cfg: ModelConfig,
        initial_classes: usize,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::default();
        let dev = device;
        let mut in_ch = 3;
        for i in 0..ENC_STRIDES.len() {
            let (wn, bn) = enc_names(i);
            let fan_in = in_ch * 9;
            let bound = (6.0 / fan_in as f64).sqrt();
            ps.insert(wn, &nn::uniform(rng, &[cfg.enc_width, in_ch, 3, 3], bound, dtype, dev)?)?;
            ps.insert(bn, &Tensor::zeros(cfg.enc_width, dtype, dev)?)?;
            in_ch = cfg.enc_width;
        }
        let d = cfg.dim;
        let (fh, fw) = cfg.feature_size();
        ps.insert("dec.patch.weight", &xavier(rng, cfg.enc_width, d, dtype, dev)?)?;
        ps.insert("dec.patch.bias", &Tensor::zeros(d, dtype, dev)?)?;
        ps.insert("dec.pos", &nn::normal(rng, &[fh * fw, d], 0.02, dtype, dev)?)?;
        let hidden = d * cfg.mlp_ratio;
        for l in 0..cfg.layers {
            for ln in ["ln1", "ln2"] {
                ps.insert(format!("dec.{l}.{ln}.gain"), &Tensor::ones(d, dtype, dev)?)?;
                ps.insert(format!("dec.{l}.{ln}.bias"), &Tensor::zeros(d, dtype, dev)?)?;
            }
            for (name, fi, fo) in [
                ("qkv", d, 3 * d),
                ("out", d, d),
                ("fc1", d, hidden),
                ("fc2", hidden, d),
            ] {
                ps.insert(format!("dec.{l}.{name}.weight"), &xavier(rng, fi, fo, dtype, dev)?)?;
                ps.insert(format!("dec.{l}.{name}.bias"), &Tensor::zeros(fo, dtype, dev)?)?;
            }
        }
        let mut model = Self {
            cfg,
            num_classes: 0,
            params: ps,
            dtype,
            device: device.clone(),
        };
        for c in 0..=initial_classes {
            model.insert_random_class(c, rng)?;
        }
        model.num_classes = initial_classes + 1;
        Ok(model)
    }

    fn insert_random_class(&mut self, c: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.cfg.dim;
        let (dt, dev) = (self.dtype, &self.device);
        match self.cfg.head {
            HeadKind::ClassTokens => {
                let tok = nn::normal(rng, &[d], 1.0 / (d as f64).sqrt(), dt, dev)?;
                self.params.insert(token_name(c), &tok)?;
                self.params.insert(scale_name(c), &Tensor::ones(1, dt, dev)?)?;
                self.params.insert(shift_name(c), &Tensor::zeros(1, dt, dev)?)?;
            }
            HeadKind::MultiClassifier => {
                let (wn, bn) = classifier_names(c);
                let bound = (1.0 / d as f64).sqrt();
                self.params.insert(wn, &nn::uniform(rng, &[d], bound, dt, dev)?)?;
                self.params.insert(bn, &Tensor::zeros(1, dt, dev)?)?;
            }
        }
        Ok(())
    }

    /// Restore a model from named parameter values (checkpoint loading).
    pub fn from_params(
        cfg: ModelConfig,
        num_classes: usize,
        params: ParamStore,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = Self {
            cfg,
            num_classes,
            params,
            dtype,
            device: device.clone(),
        };
        // touch every class parameter so a truncated file fails here
        for c in 0..num_classes {
            match model.cfg.head {
                HeadKind::ClassTokens => {
                    model.params.var(&token_name(c))?;
                    model.params.var(&scale_name(c))?;
                    model.params.var(&shift_name(c))?;
                }
                HeadKind::MultiClassifier => {
                    model.params.var(&classifier_names(c).0)?;
                }
            }
        }
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Parameter names owned by the class-specific head (tokens, scales,
    /// shifts or classifiers).
    pub fn class_param_names(&self, c: usize) -> Vec<String> {
        match self.cfg.head {
            HeadKind::ClassTokens => vec![token_name(c), scale_name(c), shift_name(c)],
            HeadKind::MultiClassifier => {
                let (w, b) = classifier_names(c);
                vec![w, b]
            }
        }
    }

    /// Append `k` classes to the label space.
    pub fn add_classes(&mut self, k: usize, init: TokenInit, rng: &mut ChaCha8Rng) -> Result<()> {
        if k == 0 {
            return Err(Error::InvalidArgument {
                arg: "k",
                reason: "at least one class must be added".into(),
            });
        }
        let old = self.num_classes;
        match self.cfg.head {
            HeadKind::ClassTokens => {
                let mean_of = |names: Vec<String>| -> Result<Tensor> {
                    let ts = names
                        .iter()
                        .map(|n| self.params.param(n)?.to_dtype(DType::F64).map_err(Error::from))
                        .collect::<Result<Vec<_>>>()?;
                    Ok((Tensor::stack(&ts, 0)?.sum(0)? / ts.len() as f64)?.to_dtype(self.dtype)?)
                };
                let mean_scale = mean_of((0..old).map(scale_name).collect())?;
                let mean_shift = mean_of((0..old).map(shift_name).collect())?;
                let token = match init {
                    TokenInit::Mean => Some(mean_of((0..old).map(token_name).collect())?),
                    TokenInit::Background => Some(self.params.param(&token_name(0))?.copy()?),
                    TokenInit::Random => None,
                };
                let (scale, shift) = match init {
                    TokenInit::Background => (
                        self.params.param(&scale_name(0))?.copy()?,
                        self.params.param(&shift_name(0))?.copy()?,
                    ),
                    _ => (mean_scale, mean_shift),
                };
                for c in old..old + k {
                    let tok = match &token {
                        Some(t) => t.clone(),
                        None => nn::normal(
                            rng,
                            &[self.cfg.dim],
                            1.0 / (self.cfg.dim as f64).sqrt(),
                            self.dtype,
                            &self.device,
                        )?,
                    };
                    self.params.insert(token_name(c), &tok)?;
                    self.params.insert(scale_name(c), &scale)?;
                    self.params.insert(shift_name(c), &shift)?;
                }
            }
            HeadKind::MultiClassifier => {
                // New classifiers copy the background classifier and split its
                // probability mass evenly with the new classes.
                let (bw, bb) = classifier_names(0);
                let w = self.params.param(&bw)?.copy()?;
                let b = (self.params.param(&bb)? - ((k + 1) as f64).ln())?;
                self.params.set(&bb, &b)?;
                for c in old..old + k {
                    let (wn, bn) = classifier_names(c);
                    self.params.insert(wn, &w)?;
                    self.params.insert(bn, &b)?;
                }
            }
        }
        self.num_classes += k;
        Ok(())
    }

    /// Frozen deep copy, used as the previous-step teacher.
    pub fn snapshot(&self) -> Result<FrozenModel> {
        Ok(FrozenModel {
            cfg: self.cfg.clone(),
            num_classes: self.num_classes,
            params: self.params.freeze()?,
            dtype: self.dtype,
        })
    }

    /// Overwrite a single parameter (tests and checkpoint loading).
    pub fn set_param(&self, name: &str, value: &Tensor) -> Result<()> {
        self.params.set(name, value)
    }
}

impl Segmenter for SegModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn forward(&self, images: &Tensor) -> Result<ModelOutputs> {
        forward_with(&self.params, &self.cfg, self.num_classes, images)
    }
}

/// Immutable copy of a [`SegModel`]; gradients never flow into it.
#[derive(Clone, Debug)]
pub struct FrozenModel {
    cfg: ModelConfig,
    num_classes: usize,
    params: FrozenParams,
    dtype: DType,
}

impl Segmenter for FrozenModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn forward(&self, images: &Tensor) -> Result<ModelOutputs> {
        forward_with(&self.params, &self.cfg, self.num_classes, images)
    }
}

/// Per-pixel argmax over logit channels, `[B, H, W]` as `u32`.
pub fn predict(logits: &Tensor) -> Result<Tensor> {
    Ok(logits.argmax(1)?)
}
