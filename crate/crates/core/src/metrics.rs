//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};
use crate::taskstream::IGNORE_ID;
use serde::{Deserialize, Serialize};

/// Global pixel confusion matrix; rows are ground truth, columns are
/// predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    /// Accumulate one map. Ground-truth pixels equal to the ignore ID are
    /// skipped.
    pub fn update(&mut self, truth: &[u8], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape {
                expected: format!("{} predictions", truth.len()),
                got: format!("{}", pred.len()),
            });
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == IGNORE_ID {
                continue;
            }
            let (t, p) = (t as usize, p as usize);
            if t >= self.classes || p >= self.classes {
                return Err(Error::InvalidArgument {
                    arg: "labels",
                    reason: format!("class {} outside {} evaluated classes", t.max(p), self.classes),
                });
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape {
                expected: format!("{} classes", self.classes),
                got: format!("{}", other.classes),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `tp / (tp + fn + fp)`; `None` when the class never occurs in either
    /// ground truth or prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|k| self.get(c, k)).sum();
        let col: u64 = (0..self.classes).map(|k| self.get(k, c)).sum();
        let union = row + col - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over `classes`, skipping undefined entries.
    pub fn mean_iou(&self, classes: &[usize]) -> Option<f64> {
        let vals: Vec<f64> = classes.iter().filter_map(|&c| self.iou(c)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Reporting groups: background plus the first step's classes, classes
/// added afterwards, and all of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub old: Vec<usize>,
    pub new: Vec<usize>,
}

impl ClassGroups {
    pub fn new(initial_classes: usize, seen_classes: usize) -> Self {
        let initial = initial_classes.min(seen_classes);
        Self {
            old: (0..=initial).collect(),
            new: (initial + 1..=seen_classes).collect(),
        }
    }

    pub fn all(&self) -> Vec<usize> {
        self.old.iter().chain(&self.new).copied().collect()
    }
}

/// Old/new/all mean IoU in `[0, 1]`; `None` for an empty or undefined
/// group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupScores {
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

impl GroupScores {
    pub fn from_matrix(cm: &ConfusionMatrix, groups: &ClassGroups) -> Self {
        Self {
            old: cm.mean_iou(&groups.old),
            new: cm.mean_iou(&groups.new),
            all: cm.mean_iou(&groups.all()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_three_class_case() {
        // truth: 0 0 1 1 2 2, pred: 0 1 1 1 2 0
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0]).unwrap();
        // class 0: tp 1, fn 1, fp 1 -> 1/3
        // class 1: tp 2, fn 0, fp 1 -> 2/3
        // class 2: tp 1, fn 1, fp 0 -> 1/2
        assert_eq!(cm.iou(0), Some(1.0 / 3.0));
        assert_eq!(cm.iou(1), Some(2.0 / 3.0));
        assert_eq!(cm.iou(2), Some(0.5));
        let m = cm.mean_iou(&[0, 1, 2]).unwrap();
        assert!((m - (1.0 / 3.0 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ignore_pixels_and_absent_classes() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 255, 1], &[0, 2, 1]).unwrap();
        assert_eq!(cm.iou(2), None);
        assert_eq!(cm.mean_iou(&[0, 1, 2]), Some(1.0));
        assert!(cm.update(&[3], &[0]).is_err());
    }

    #[test]
    fn background_only_predictions() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 2, 2], &[0, 0, 0, 0]).unwrap();
        assert_eq!(cm.iou(1), Some(0.0));
        assert_eq!(cm.iou(2), Some(0.0));
    }

    #[test]
    fn groups_partition() {
        let g = ClassGroups::new(4, 6);
        assert_eq!(g.old, vec![0, 1, 2, 3, 4]);
        assert_eq!(g.new, vec![5, 6]);
        assert_eq!(g.all(), (0..=6).collect::<Vec<_>>());
        assert!(ClassGroups::new(4, 4).new.is_empty());
    }
}
