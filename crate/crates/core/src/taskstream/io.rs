//! On-disk stream layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/step_01/train.safetensors   images: f32 [N, H, W, 3], labels: u8 [N, H, W]
//! <dir>/step_01/val.safetensors
//! ...
//! ```

use super::{
    ClassId, Dataset, Image, LabelMap, Sample, ShapeKind, StepSpec, StreamConfig, StreamStep,
    TaskStream,
};
use crate::arrays::{Container, NamedArray};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepManifest {
    pub spec: StepSpec,
    /// Paths relative to the manifest directory.
    pub train: String,
    pub val: String,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: StreamConfig,
    pub class_order: Vec<ShapeKind>,
    pub steps: Vec<StepManifest>,
}

fn write_dataset(ds: &Dataset, h: usize, w: usize, path: &Path) -> Result<()> {
    let n = ds.len();
    let mut images = Vec::with_capacity(n * h * w * 3);
    let mut labels = Vec::with_capacity(n * h * w);
    for s in &ds.samples {
        images.extend_from_slice(s.image.as_slice());
        labels.extend_from_slice(s.labels.as_slice());
    }
    let mut c = Container::default();
    c.insert("images", NamedArray::f32(vec![n, h, w, 3], images));
    c.insert("labels", NamedArray::u8(vec![n, h, w], labels));
    c.write(path)
}

fn read_dataset(path: &Path, h: usize, w: usize) -> Result<Dataset> {
    let c = Container::read(path)?;
    let (ishape, images) = c.f32("images", path)?;
    let (lshape, labels) = c.u8("labels", path)?;
    let n = ishape.first().copied().unwrap_or(0);
    if ishape != [n, h, w, 3] || lshape != [n, h, w] {
        return Err(Error::malformed(
            path,
            format!("expected images [N,{h},{w},3] and labels [N,{h},{w}], got {ishape:?} and {lshape:?}"),
        ));
    }
    let samples = (0..n)
        .map(|i| {
            Ok(Sample {
                image: Image::new(h, w, images[i * h * w * 3..(i + 1) * h * w * 3].to_vec())?,
                labels: LabelMap::new(h, w, labels[i * h * w..(i + 1) * h * w].to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

pub fn save_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (stream.config.height, stream.config.width);
    let mut steps = Vec::new();
    for st in &stream.steps {
        let sub = format!("step_{:02}", st.spec.index);
        std::fs::create_dir_all(dir.join(&sub))?;
        let train = format!("{sub}/train.safetensors");
        let val = format!("{sub}/val.safetensors");
        write_dataset(&st.train, h, w, &dir.join(&train))?;
        write_dataset(&st.val, h, w, &dir.join(&val))?;
        steps.push(StepManifest {
            spec: st.spec.clone(),
            train,
            val,
            n_train: st.train.len(),
            n_val: st.val.len(),
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: stream.config.clone(),
        class_order: stream.class_order.clone(),
        steps,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Load a stream written by [`save_stream`] or by an external adapter that
/// follows the same manifest layout.
pub fn load_stream(dir: &Path) -> Result<TaskStream> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::malformed(&mpath, e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::malformed(
            &mpath,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let (h, w) = (manifest.config.height, manifest.config.width);
    let num_classes = manifest.config.num_classes;
    let mut steps = Vec::new();
    for sm in &manifest.steps {
        let train = read_dataset(&dir.join(&sm.train), h, w)?;
        let val = read_dataset(&dir.join(&sm.val), h, w)?;
        if train.len() != sm.n_train || val.len() != sm.n_val {
            return Err(Error::malformed(
                &mpath,
                format!("step {} sample counts disagree with data files", sm.spec.index),
            ));
        }
        for ds in [&train, &val] {
            if let Some(&c) = ds
                .classes_present()
                .iter()
                .find(|&&c| c as usize > num_classes)
            {
                return Err(Error::UnknownClass(c as ClassId));
            }
        }
        steps.push(StreamStep {
            spec: sm.spec.clone(),
            train,
            val,
        });
    }
    Ok(TaskStream {
        config: manifest.config,
        class_order: manifest.class_order,
        steps,
    })
}
