//! Synthetic segmentation scenes and class-incremental task streams.
//!
//! Class IDs are consecutive in stream order: background is `0`, the
//! classes introduced at the first step are `1..=n1`, the next step's are
//! `n1+1..`, and so on. A class ID therefore doubles as the logit channel
//! index of that class.

mod io;
mod scene;
mod stream;

pub use io::{load_stream, save_stream, Manifest, StepManifest};
pub use scene::{synthesize_scene, Scene, SceneSpec, ShapeInstance, ShapeKind};
pub use stream::{
    build_stream, collapse_labels, Setup, StepSpec, StreamConfig, StreamMode, StreamStep,
    TaskStream,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

pub type ClassId = u8;

pub const BACKGROUND_ID: ClassId = 0;
/// Pixels carrying this ID are excluded from every loss and metric.
pub const IGNORE_ID: ClassId = 255;

/// Per-pixel class IDs, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<ClassId>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<ClassId>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                expected: format!("{height}x{width} labels"),
                got: format!("{} labels", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, id: ClassId) -> Self {
        Self {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: ClassId) {
        self.data[y * self.width + x] = id;
    }

    pub fn as_slice(&self) -> &[ClassId] {
        &self.data
    }

    pub fn map(&self, f: impl Fn(ClassId) -> ClassId) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&c| f(c)).collect(),
        }
    }

    /// Foreground classes present (background and ignore excluded).
    pub fn classes_present(&self) -> BTreeSet<ClassId> {
        self.data
            .iter()
            .copied()
            .filter(|&c| c != BACKGROUND_ID && c != IGNORE_ID)
            .collect()
    }

    /// Pixel count per ID, indexed by ID (length 256).
    pub fn histogram(&self) -> Vec<u32> {
        let mut h = vec![0u32; 256];
        for &c in &self.data {
            h[c as usize] += 1;
        }
        h
    }

    /// Mirror left-right.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            out.data[y * self.width..(y + 1) * self.width].reverse();
        }
        out
    }
}

/// RGB image with values in `[0, 1]`, row-major HWC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape {
                expected: format!("{height}x{width}x3 image"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Planar CHW copy of the pixel data.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0f32; n * 3];
        for i in 0..n {
            for c in 0..3 {
                out[c * n + i] = self.data[i * 3 + c];
            }
        }
        out
    }

    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * 3;
                let dst = (y * self.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Union of foreground classes over all label maps.
    pub fn classes_present(&self) -> BTreeSet<ClassId> {
        self.samples
            .iter()
            .flat_map(|s| s.labels.classes_present())
            .collect()
    }
}
