use super::{ClassId, Image, LabelMap, BACKGROUND_ID};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

const NOISE_STD: f32 = 0.05;

/// Shape generators available to the scene synthesizer. Each kind has a
/// fixed colour and texture, so a class is identified by both its outline
/// and its appearance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    HBar,
    Ring,
    Cross,
    Diamond,
    VBar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::HBar,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::VBar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::HBar => "hbar",
            ShapeKind::Ring => "ring",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::VBar => "vbar",
        }
    }

    fn ordinal(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    fn color(self) -> [f32; 3] {
        match self {
            ShapeKind::Disk => [0.9, 0.15, 0.15],
            ShapeKind::Square => [0.15, 0.75, 0.2],
            ShapeKind::Triangle => [0.2, 0.3, 0.9],
            ShapeKind::HBar => [0.95, 0.85, 0.1],
            ShapeKind::Ring => [0.85, 0.2, 0.85],
            ShapeKind::Cross => [0.1, 0.85, 0.85],
            ShapeKind::Diamond => [0.95, 0.5, 0.05],
            ShapeKind::VBar => [0.1, 0.1, 0.35],
        }
    }

    /// Brightness multiplier at pixel `(x, y)`.
    fn texture(self, x: usize, y: usize) -> f32 {
        match self.ordinal() % 4 {
            0 => 1.0,
            1 => {
                if y % 2 == 0 {
                    1.0
                } else {
                    0.75
                }
            }
            2 => {
                if x % 2 == 0 {
                    1.0
                } else {
                    0.75
                }
            }
            _ => {
                if (x + y) % 2 == 0 {
                    1.0
                } else {
                    0.75
                }
            }
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape kind `{s}`")))
    }
}

/// One rasterized shape. Geometry is integral: centre `(cx, cy)` and
/// half-extent `radius`, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeInstance {
    pub class: ClassId,
    pub kind: ShapeKind,
    pub cx: i32,
    pub cy: i32,
    pub radius: i32,
}

impl ShapeInstance {
    /// Half-thickness of bars and cross arms.
    pub fn thickness(&self) -> i32 {
        (self.radius / 3).max(1)
    }

    /// Width of the ring band.
    pub fn ring_width(&self) -> i32 {
        (self.radius / 2).max(2)
    }

    /// Whether the centre of pixel `(x, y)` lies inside the shape.
    ///
    /// Coordinates are doubled so pixel centres land on odd integers and all
    /// tests are exact integer comparisons.
    pub fn contains(&self, x: i32, y: i32) -> bool {
        let dx = 2 * x + 1 - 2 * self.cx;
        let dy = 2 * y + 1 - 2 * self.cy;
        let r = 2 * self.radius;
        let th = 2 * self.thickness();
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Triangle => dy <= r && 2 * dx.abs() <= dy + r,
            ShapeKind::HBar => dx.abs() <= r && dy.abs() <= th,
            ShapeKind::VBar => dx.abs() <= th && dy.abs() <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = r - 2 * self.ring_width();
                d2 <= r * r && (inner < 0 || d2 > inner * inner)
            }
            ShapeKind::Cross => {
                (dx.abs() <= th && dy.abs() <= r) || (dy.abs() <= th && dx.abs() <= r)
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Class ID `i` (1-based) is drawn with `class_catalog[i - 1]`.
    pub class_catalog: Vec<ShapeKind>,
    /// Inclusive range of shapes per scene.
    pub shapes_per_image: (usize, usize),
    pub seed: u64,
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.class_catalog.len()
    }

    fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config("scene must be at least 4x4".into()));
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "shapes_per_image range {lo}..={hi} is invalid"
            )));
        }
        if self.class_catalog.is_empty() || self.class_catalog.len() > 254 {
            return Err(Error::Config("class catalog size must be in 1..=254".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelMap,
    /// Shapes in drawing order; later shapes occlude earlier ones.
    pub shapes: Vec<ShapeInstance>,
}

/// Draw a random scene whose shapes are taken from `allowed` class IDs.
pub fn synthesize_scene(spec: &SceneSpec, allowed: &[ClassId]) -> Result<Scene> {
    spec.validate()?;
    if allowed.is_empty() {
        return Err(Error::InvalidArgument {
            arg: "allowed_classes",
            reason: "at least one class is required".into(),
        });
    }
    for &c in allowed {
        if c == BACKGROUND_ID || c as usize > spec.num_classes() {
            return Err(Error::UnknownClass(c));
        }
    }

    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("finite std");

    let (lo, hi) = spec.shapes_per_image;
    let n_shapes = rng.random_range(lo..=hi);
    let max_radius = ((h.min(w) / 4) as i32).max(3);
    let shapes: Vec<ShapeInstance> = (0..n_shapes)
        .map(|_| {
            let class = allowed[rng.random_range(0..allowed.len())];
            ShapeInstance {
                class,
                kind: spec.class_catalog[class as usize - 1],
                cx: rng.random_range(0..w as i32),
                cy: rng.random_range(0..h as i32),
                radius: rng.random_range(3..=max_radius),
            }
        })
        .collect();

    let gray: f32 = rng.random_range(0.4..0.6);
    let mut pixels = vec![gray; h * w * 3];
    let mut labels = LabelMap::filled(h, w, BACKGROUND_ID);
    for shape in &shapes {
        let color = shape.kind.color();
        let x0 = (shape.cx - shape.radius - 1).max(0);
        let x1 = (shape.cx + shape.radius + 1).min(w as i32 - 1);
        let y0 = (shape.cy - shape.radius - 1).max(0);
        let y1 = (shape.cy + shape.radius + 1).min(h as i32 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !shape.contains(x, y) {
                    continue;
                }
                let (xu, yu) = (x as usize, y as usize);
                let t = shape.kind.texture(xu, yu);
                let o = (yu * w + xu) * 3;
                for c in 0..3 {
                    pixels[o + c] = color[c] * t;
                }
                labels.set(xu, yu, shape.class);
            }
        }
    }
    for v in &mut pixels {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    Ok(Scene {
        image: Image::new(h, w, pixels)?,
        labels,
        shapes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec {
            height: 24,
            width: 24,
            class_catalog: ShapeKind::ALL.to_vec(),
            shapes_per_image: (1, 3),
            seed,
        }
    }

    #[test]
    fn single_class_scene_only_uses_that_class() {
        let scene = synthesize_scene(&spec(7), &[1]).unwrap();
        let present = scene.labels.classes_present();
        assert_eq!(present.into_iter().collect::<Vec<_>>(), vec![1]);
        assert!(scene
            .labels
            .as_slice()
            .iter()
            .all(|&c| c == 0 || c == 1));
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synthesize_scene(&spec(11), &[1, 2, 3]).unwrap();
        let b = synthesize_scene(&spec(11), &[1, 2, 3]).unwrap();
        assert_eq!(a.image.as_slice(), b.image.as_slice());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn pixel_values_in_unit_range() {
        let s = synthesize_scene(&spec(5), &[4, 5, 6]).unwrap();
        assert!(s.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_empty_or_unknown_classes() {
        assert!(synthesize_scene(&spec(1), &[]).is_err());
        assert!(matches!(
            synthesize_scene(&spec(1), &[9]),
            Err(Error::UnknownClass(9))
        ));
    }

    #[test]
    fn triangle_apex_is_a_single_column() {
        let t = ShapeInstance {
            class: 1,
            kind: ShapeKind::Triangle,
            cx: 10,
            cy: 10,
            radius: 4,
        };
        // top row of the triangle: dy = -7 (y = 6); needs 2|dx| <= 1, impossible
        // for odd dx, so the first filled row is y = 7.
        assert!(!(0..24).any(|x| t.contains(x, 6)));
        assert!((0..24).any(|x| t.contains(x, 7)));
    }
}
