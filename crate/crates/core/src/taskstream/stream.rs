use super::scene::{synthesize_scene, SceneSpec, ShapeKind};
use super::{ClassId, Dataset, LabelMap, Sample, BACKGROUND_ID, IGNORE_ID};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    /// Ground truth of every class seen so far is kept.
    Sequential,
    /// Only current classes are labeled; images with future classes are dropped.
    Disjoint,
    /// Only current classes are labeled; old and future classes become background.
    Overlap,
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamMode::Sequential => "sequential",
            StreamMode::Disjoint => "disjoint",
            StreamMode::Overlap => "overlap",
        })
    }
}

impl FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(StreamMode::Sequential),
            "disjoint" => Ok(StreamMode::Disjoint),
            "overlap" => Ok(StreamMode::Overlap),
            other => Err(Error::Config(format!("unknown stream mode `{other}`"))),
        }
    }
}

/// Incremental setup such as `15-1`: `initial` classes in the first step,
/// then `increment` new classes per step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Setup {
    pub initial: usize,
    pub increment: usize,
}

impl Setup {
    /// Per-step class counts over `num_classes` foreground classes.
    pub fn step_sizes(&self, num_classes: usize) -> Result<Vec<usize>> {
        if self.initial == 0 || self.increment == 0 {
            return Err(Error::Config(format!(
                "setup {self} must have a nonzero initial size and increment"
            )));
        }
        if self.initial > num_classes {
            return Err(Error::Config(format!(
                "setup {self} needs {} initial classes but only {num_classes} exist",
                self.initial
            )));
        }
        let mut sizes = vec![self.initial];
        let mut remaining = num_classes - self.initial;
        while remaining > 0 {
            if self.increment > remaining {
                return Err(Error::Config(format!(
                    "setup {self}: increment {} exceeds the {remaining} remaining classes",
                    self.increment
                )));
            }
            sizes.push(self.increment);
            remaining -= self.increment;
        }
        Ok(sizes)
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.initial, self.increment)
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("setup `{s}` is not of the form `<initial>-<increment>`"));
        let (a, b) = s.split_once('-').ok_or_else(bad)?;
        Ok(Setup {
            initial: a.trim().parse().map_err(|_| bad())?,
            increment: b.trim().parse().map_err(|_| bad())?,
        })
    }
}

impl TryFrom<String> for Setup {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Setup> for String {
    fn from(s: Setup) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSpec {
    /// 1-based step index.
    pub index: usize,
    pub new_classes: Vec<ClassId>,
    pub mode: StreamMode,
}

impl StepSpec {
    pub fn is_initial(&self) -> bool {
        self.index == 1
    }
}

/// Relabel a fully annotated map for `step`.
///
/// `seen` is the union of all class sets up to and including this step.
/// Returns `None` when the image is not part of the step's training set:
/// it contains none of the step's classes, or (sequential / disjoint) it
/// contains a class that has not been introduced yet.
pub fn collapse_labels(
    full: &LabelMap,
    step: &StepSpec,
    seen: &[ClassId],
    num_classes: usize,
) -> Result<Option<LabelMap>> {
    let present = full.classes_present();
    if let Some(&c) = present.iter().find(|&&c| c as usize > num_classes) {
        return Err(Error::UnknownClass(c));
    }
    let current: BTreeSet<ClassId> = step.new_classes.iter().copied().collect();
    let seen: BTreeSet<ClassId> = seen.iter().copied().collect();
    if present.is_disjoint(&current) {
        return Ok(None);
    }
    let has_future = present.iter().any(|c| !seen.contains(c));
    let keep: &BTreeSet<ClassId> = match step.mode {
        StreamMode::Sequential => {
            if has_future {
                return Ok(None);
            }
            &seen
        }
        StreamMode::Disjoint => {
            if has_future {
                return Ok(None);
            }
            &current
        }
        StreamMode::Overlap => &current,
    };
    Ok(Some(full.map(|c| {
        if c == IGNORE_ID || keep.contains(&c) {
            c
        } else {
            BACKGROUND_ID
        }
    })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub setup: Setup,
    pub mode: StreamMode,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub shapes_per_image: (usize, usize),
    /// Size of the fully labeled training pool the steps are carved from.
    pub train_pool: usize,
    pub val_pool: usize,
    pub data_seed: u64,
    /// Seed of the class-order permutation.
    pub ordering_seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            setup: Setup {
                initial: 4,
                increment: 1,
            },
            mode: StreamMode::Overlap,
            num_classes: 8,
            height: 32,
            width: 32,
            shapes_per_image: (1, 3),
            train_pool: 400,
            val_pool: 120,
            data_seed: 0,
            ordering_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamStep {
    pub spec: StepSpec,
    pub train: Dataset,
    /// Validation images with ground truth of every class seen so far;
    /// classes not yet introduced are background.
    pub val: Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub config: StreamConfig,
    /// `class_order[i]` is the shape drawn for class ID `i + 1`.
    pub class_order: Vec<ShapeKind>,
    pub steps: Vec<StreamStep>,
}

impl TaskStream {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Classes introduced up to and including step `t` (1-based).
    pub fn seen_classes(&self, t: usize) -> Vec<ClassId> {
        self.steps[..t]
            .iter()
            .flat_map(|s| s.spec.new_classes.iter().copied())
            .collect()
    }

    pub fn initial_classes(&self) -> &[ClassId] {
        &self.steps[0].spec.new_classes
    }
}

fn scene_seed(base: u64, stream: u64, index: usize) -> u64 {
    // splitmix64 over (base, stream, index)
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn generate_pool(spec: &SceneSpec, count: usize, stream: u64) -> Result<Vec<Sample>> {
    let all: Vec<ClassId> = (1..=spec.num_classes() as ClassId).collect();
    (0..count)
        .map(|i| {
            let s = SceneSpec {
                seed: scene_seed(spec.seed, stream, i),
                ..spec.clone()
            };
            let scene = synthesize_scene(&s, &all)?;
            Ok(Sample {
                image: scene.image,
                labels: scene.labels,
            })
        })
        .collect()
}

/// Build the class-incremental stream described by `config`.
pub fn build_stream(config: &StreamConfig) -> Result<TaskStream> {
    if config.num_classes == 0 || config.num_classes > ShapeKind::ALL.len() {
        return Err(Error::Config(format!(
            "num_classes must be in 1..={}",
            ShapeKind::ALL.len()
        )));
    }
    let sizes = config.setup.step_sizes(config.num_classes)?;

    let mut class_order: Vec<ShapeKind> = ShapeKind::ALL.to_vec();
    class_order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.ordering_seed));
    class_order.truncate(config.num_classes);

    let scene = SceneSpec {
        height: config.height,
        width: config.width,
        class_catalog: class_order.clone(),
        shapes_per_image: config.shapes_per_image,
        seed: config.data_seed,
    };
    let train_pool = generate_pool(&scene, config.train_pool, 1)?;
    let val_pool = generate_pool(&scene, config.val_pool, 2)?;

    let mut steps = Vec::with_capacity(sizes.len());
    let mut next_id: ClassId = 1;
    let mut seen: Vec<ClassId> = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let new_classes: Vec<ClassId> = (next_id..next_id + n as ClassId).collect();
        next_id += n as ClassId;
        seen.extend(&new_classes);
        let spec = StepSpec {
            index: i + 1,
            new_classes,
            mode: config.mode,
        };

        let mut train = Dataset::default();
        for s in &train_pool {
            if let Some(labels) = collapse_labels(&s.labels, &spec, &seen, config.num_classes)? {
                train.samples.push(Sample {
                    image: s.image.clone(),
                    labels,
                });
            }
        }
        let seen_set: BTreeSet<ClassId> = seen.iter().copied().collect();
        let val = Dataset {
            samples: val_pool
                .iter()
                .map(|s| Sample {
                    image: s.image.clone(),
                    labels: s.labels.map(|c| {
                        if c == IGNORE_ID || c == BACKGROUND_ID || seen_set.contains(&c) {
                            c
                        } else {
                            BACKGROUND_ID
                        }
                    }),
                })
                .collect(),
        };
        steps.push(StreamStep { spec, train, val });
    }

    check_disjoint(&steps)?;
    Ok(TaskStream {
        config: config.clone(),
        class_order,
        steps,
    })
}

fn check_disjoint(steps: &[StreamStep]) -> Result<()> {
    let mut all = BTreeSet::new();
    for s in steps {
        if s.spec.new_classes.is_empty() {
            return Err(Error::Config(format!("step {} has no classes", s.spec.index)));
        }
        for &c in &s.spec.new_classes {
            if !all.insert(c) {
                return Err(Error::Config(format!(
                    "class {c} appears in more than one step"
                )));
            }
        }
    }
    Ok(())
}
