//! Named parameter storage, initialisers, differentiable building blocks and
//! the SGD optimizer, all on top of `candle_core`.

use crate::error::{Error, Result};
use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::Hasher;

/// Anything that can hand out parameter tensors by name.
pub trait ParamSource {
    fn param(&self, name: &str) -> Result<Tensor>;
}

/// Trainable parameters, keyed by a stable dotted name.
///
/// Not `Clone`: cloning a `Var` aliases its storage. Use [`ParamStore::freeze`]
/// for an independent copy.
#[derive(Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor) -> Result<()> {
        self.vars
            .insert(name.into(), Var::from_tensor(&value.detach())?);
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Overwrite the value of an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(Error::Shape {
                expected: format!("{:?}", var.dims()),
                got: format!("{:?}", value.dims()),
            });
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep, detached copy of every parameter.
    pub fn freeze(&self) -> Result<FrozenParams> {
        let tensors = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect::<Result<_>>()?;
        Ok(FrozenParams { tensors })
    }

    /// Hash of the exact bit patterns of the named parameters.
    pub fn digest<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<u64> {
        let mut h = DefaultHasher::new();
        for name in names {
            h.write(name.as_bytes());
            let values = self
                .var(name)?
                .as_tensor()
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?;
            for v in values {
                h.write_u64(v.to_bits());
            }
        }
        Ok(h.finish())
    }
}

impl ParamSource for ParamStore {
    fn param(&self, name: &str) -> Result<Tensor> {
        Ok(self.var(name)?.as_tensor().clone())
    }
}

/// Immutable parameter snapshot; never receives gradients.
#[derive(Clone, Debug)]
pub struct FrozenParams {
    tensors: BTreeMap<String, Tensor>,
}

impl FrozenParams {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}

impl ParamSource for FrozenParams {
    fn param(&self, name: &str) -> Result<Tensor> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

pub fn uniform(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    bound: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

pub fn normal(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    std: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let v: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// `x @ w + b` over the last axis; `w` is `[in, out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.broadcast_matmul(w)?.broadcast_add(b)?)
}

/// Layer normalisation over the last axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gain)?.broadcast_add(bias)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

/// Interpolation weights `[out, in]` for 1-D bilinear resampling with
/// half-pixel centres. Every row sums to one.
pub fn bilinear_weights(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of `[B, C, h, w]` to `[B, C, height, width]`, expressed
/// as two matrix products so it is differentiable.
pub fn upsample_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let rows = Tensor::from_vec(bilinear_weights(height, h), (height, h), dev)?.to_dtype(x.dtype())?;
    let cols = Tensor::from_vec(bilinear_weights(width, w), (width, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let flat = x.reshape((b * c, h, w))?;
    let y = rows.broadcast_matmul(&flat)?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, c, height, width))?)
}

/// Sum of squared gradient entries of the named parameters.
pub fn grad_sq_norm<'a>(
    store: &ParamStore,
    names: impl IntoIterator<Item = &'a str>,
    grads: &GradStore,
) -> Result<f64> {
    let mut total = 0.0;
    for name in names {
        if let Some(g) = grads.get(store.var(name)?.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total)
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Update the named parameters of `store`. Parameters without a gradient
    /// are left untouched.
    pub fn step<'a>(
        &mut self,
        store: &ParamStore,
        names: impl IntoIterator<Item = &'a str>,
        grads: &GradStore,
    ) -> Result<()> {
        self.step_scaled(store, names, grads, 1.0)
    }

    /// [`Sgd::step`] with every gradient multiplied by `scale`.
    pub fn step_scaled<'a>(
        &mut self,
        store: &ParamStore,
        names: impl IntoIterator<Item = &'a str>,
        grads: &GradStore,
        scale: f64,
    ) -> Result<()> {
        for name in names {
            let var = store.var(name)?;
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale == 1.0 { g.clone() } else { (g * scale)? };
            let v = match self.velocity.get(name) {
                Some(prev) => ((prev * self.momentum)? + g)?,
                None => g,
            };
            var.set(&(var.as_tensor() - (&v * self.lr)?)?)?;
            self.velocity.insert(name.to_string(), v);
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}
