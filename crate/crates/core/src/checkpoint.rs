//! Versioned checkpoint file holding the model, the detector and run state.
//!
//! Parameters are stored as arrays named `model.<param>` and
//! `detector.<param>`. Everything else (configs, class table, prototypes,
//! step index, free-form run state such as RNG snapshots) is JSON in the
//! container metadata under the `state` key.

use crate::arrays::{ArrayData, Container, NamedArray};
use crate::detector::{Detector, DetectorConfig, Prototype};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::segmodel::{ModelConfig, SegModel, Segmenter};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub format_version: u32,
    /// Index of the last completed step.
    pub step: usize,
    pub num_classes: usize,
    /// Class ID to class name; the class ID is also the token index.
    pub class_table: Vec<(u8, String)>,
    pub dtype: String,
    pub model: ModelConfig,
    pub detector: DetectorConfig,
    pub enc_width: usize,
    pub prototypes: Vec<Prototype>,
    pub extra: BTreeMap<String, String>,
}

pub struct Checkpoint {
    pub state: CheckpointState,
    pub model: SegModel,
    pub detector: Detector,
}

fn dtype_name(dt: DType) -> Result<&'static str> {
    match dt {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn store_params(c: &mut Container, prefix: &str, store: &ParamStore) -> Result<()> {
    for (name, var) in store.iter() {
        let t = var.as_tensor();
        let shape = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let array = match t.dtype() {
            DType::F64 => NamedArray::f64(shape, flat.to_vec1::<f64>()?),
            _ => NamedArray::f32(shape, flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
        };
        c.insert(format!("{prefix}.{name}"), array);
    }
    Ok(())
}

fn load_params(c: &Container, prefix: &str, device: &Device) -> Result<ParamStore> {
    let mut store = ParamStore::default();
    let dotted = format!("{prefix}.");
    for (name, a) in &c.arrays {
        let Some(param) = name.strip_prefix(&dotted) else {
            continue;
        };
        let t = match &a.data {
            ArrayData::F32(v) => Tensor::from_slice(v, a.shape.as_slice(), device)?,
            ArrayData::F64(v) => Tensor::from_slice(v, a.shape.as_slice(), device)?,
            ArrayData::U8(_) => {
                return Err(Error::Config(format!("parameter `{name}` stored as u8")));
            }
        };
        store.insert(param, &t)?;
    }
    Ok(store)
}

pub fn save(
    path: &Path,
    step: usize,
    class_table: Vec<(u8, String)>,
    model: &SegModel,
    detector: &Detector,
    extra: BTreeMap<String, String>,
) -> Result<()> {
    let state = CheckpointState {
        format_version: FORMAT_VERSION,
        step,
        num_classes: model.num_classes(),
        class_table,
        dtype: dtype_name(model.dtype())?.to_string(),
        model: model.config().clone(),
        detector: detector.config().clone(),
        enc_width: detector.enc_width(),
        prototypes: detector.prototypes().to_vec(),
        extra,
    };
    let mut c = Container::default();
    c.metadata
        .insert("format_version".into(), FORMAT_VERSION.to_string());
    c.metadata
        .insert("state".into(), serde_json::to_string(&state)?);
    store_params(&mut c, "model", model.params())?;
    store_params(&mut c, "detector", detector.params())?;
    c.write(path)
}

pub fn load(path: &Path, device: &Device) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    let version = c.meta("format_version", path)?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::malformed(path, format!("unsupported format_version {version}")));
    }
    let state: CheckpointState = serde_json::from_str(c.meta("state", path)?)
        .map_err(|e| Error::malformed(path, format!("bad state: {e}")))?;
    let dtype = match state.dtype.as_str() {
        "f32" => DType::F32,
        "f64" => DType::F64,
        other => return Err(Error::malformed(path, format!("unknown dtype `{other}`"))),
    };
    let wrap = |e: Error| Error::malformed(path, e.to_string());
    let model = SegModel::from_params(
        state.model.clone(),
        state.num_classes,
        load_params(&c, "model", device).map_err(wrap)?,
        dtype,
        device,
    )
    .map_err(wrap)?;
    let detector = Detector::from_parts(
        state.detector.clone(),
        state.enc_width,
        load_params(&c, "detector", device).map_err(wrap)?,
        state.prototypes.clone(),
        dtype,
        device,
    )
    .map_err(wrap)?;
    Ok(Checkpoint {
        state,
        model,
        detector,
    })
}
