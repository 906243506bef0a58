//! Plain-text metrics file written by a continual run.
//!
//! One record per line, whitespace-separated `key=value` fields, the first
//! always `record=<kind>`:
//!
//! ```text
//! record=run variant=full seed=0 setup=4-1 mode=overlap token_init=mean
//! record=epoch step=1 epoch=1 total=1.2 cls=1.1 der=0 der_pp=0 kd=0 det=0.1
//! record=eval step=1 classes=5 old=0.61 new=na all=0.61 seconds=3.2 iou=0.9,0.5,0.6,0.4,0.7
//! ```
//!
//! Missing values are written as `na`. Floats use the shortest
//! representation that round-trips.

use crate::error::{Error, Result};
use crate::metrics::GroupScores;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Mean loss terms over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub total: f64,
    pub cls: f64,
    pub der: f64,
    pub der_pp: f64,
    pub kd: f64,
    pub det: f64,
}

/// Evaluation after one step, plus that step's loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Label-space size, background included.
    pub classes: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub scores: GroupScores,
    pub epochs: Vec<EpochLosses>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub meta: BTreeMap<String, String>,
    pub steps: Vec<StepReport>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

fn sanitize(v: &str) -> String {
    v.split_whitespace().collect::<Vec<_>>().join("_")
}

impl RunLog {
    pub fn render(&self) -> String {
        let mut out = String::from("record=run");
        for (k, v) in &self.meta {
            let _ = write!(out, " {}={}", sanitize(k), sanitize(v));
        }
        out.push('\n');
        for s in &self.steps {
            for (e, l) in s.epochs.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "record=epoch step={} epoch={} total={} cls={} der={} der_pp={} kd={} det={}",
                    s.step,
                    e + 1,
                    l.total,
                    l.cls,
                    l.der,
                    l.der_pp,
                    l.kd,
                    l.det
                );
            }
            let iou: Vec<String> = s.per_class_iou.iter().map(|v| opt(*v)).collect();
            let _ = writeln!(
                out,
                "record=eval step={} classes={} old={} new={} all={} seconds={} iou={}",
                s.step,
                s.classes,
                opt(s.scores.old),
                opt(s.scores.new),
                opt(s.scores.all),
                s.seconds,
                iou.join(",")
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut log = RunLog::default();
        let mut epochs: BTreeMap<usize, Vec<(usize, EpochLosses)>> = BTreeMap::new();
        let mut seen_run = false;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::malformed(path, format!("line {}: {reason}", n + 1));
            let mut fields = BTreeMap::new();
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=value, got `{tok}`")))?;
                fields.insert(k.to_string(), v.to_string());
            }
            let kind = fields.remove("record").ok_or_else(|| bad("missing `record`".into()))?;
            let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
            let num = |k: &str| -> Result<f64> {
                get(k)?.parse::<f64>().map_err(|_| bad(format!("bad number for `{k}`")))
            };
            let int = |k: &str| -> Result<usize> {
                get(k)?.parse::<usize>().map_err(|_| bad(format!("bad integer for `{k}`")))
            };
            let maybe = |v: &str| -> Result<Option<f64>> {
                if v == "na" {
                    Ok(None)
                } else {
                    v.parse::<f64>().map(Some).map_err(|_| bad(format!("bad value `{v}`")))
                }
            };
            match kind.as_str() {
                "run" => {
                    seen_run = true;
                    log.meta = fields.clone();
                }
                "epoch" => {
                    let l = EpochLosses {
                        total: num("total")?,
                        cls: num("cls")?,
                        der: num("der")?,
                        der_pp: num("der_pp")?,
                        kd: num("kd")?,
                        det: num("det")?,
                    };
                    epochs.entry(int("step")?).or_default().push((int("epoch")?, l));
                }
                "eval" => {
                    let iou = get("iou")?;
                    let per_class_iou = if iou.is_empty() {
                        Vec::new()
                    } else {
                        iou.split(',').map(maybe).collect::<Result<_>>()?
                    };
                    let classes = int("classes")?;
                    if per_class_iou.len() != classes {
                        return Err(bad(format!(
                            "{} IoU values for {classes} classes",
                            per_class_iou.len()
                        )));
                    }
                    log.steps.push(StepReport {
                        step: int("step")?,
                        classes,
                        per_class_iou,
                        scores: GroupScores {
                            old: maybe(get("old")?)?,
                            new: maybe(get("new")?)?,
                            all: maybe(get("all")?)?,
                        },
                        epochs: Vec::new(),
                        seconds: num("seconds")?,
                    });
                }
                other => return Err(bad(format!("unknown record kind `{other}`"))),
            }
        }
        if !seen_run {
            return Err(Error::malformed(path, "no `record=run` line"));
        }
        for s in &mut log.steps {
            if let Some(mut e) = epochs.remove(&s.step) {
                e.sort_by_key(|(i, _)| *i);
                s.epochs = e.into_iter().map(|(_, l)| l).collect();
            }
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    /// The last evaluated step.
    pub fn final_step(&self) -> Option<&StepReport> {
        self.steps.last()
    }
}
