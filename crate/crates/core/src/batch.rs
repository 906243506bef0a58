//! Conversion of samples into `candle` tensors.

use crate::error::{Error, Result};
use crate::taskstream::{Image, LabelMap};
use candle_core::{DType, Device, Tensor};

/// Stack images into `[B, 3, H, W]`.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height(), img.width()) != (h, w) {
            return Err(Error::Shape {
                expected: format!("{h}x{w}"),
                got: format!("{}x{}", img.height(), img.width()),
            });
        }
        data.extend(img.to_chw());
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

/// Stack label maps into a `[B, H, W]` `u32` tensor.
pub fn labels_to_tensor(labels: &[&LabelMap], device: &Device) -> Result<Tensor> {
    let first = labels.first().ok_or_else(|| Error::EmptyDataset("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for l in labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(Error::Shape {
                expected: format!("{h}x{w}"),
                got: format!("{}x{}", l.height(), l.width()),
            });
        }
        data.extend(l.as_slice().iter().map(|&c| c as u32));
    }
    Ok(Tensor::from_vec(data, (labels.len(), h, w), device)?)
}
