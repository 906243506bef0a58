//! Experiment reporting from run directories: result matrices, the
//! class-ordering study and per-step curves. Every output is a pure
//! function of the metrics files it reads.

use crate::error::{Error, Result};
use crate::runlog::{RunLog, StepReport};
use crate::trainer::{run_continual, TrainConfig, METRICS_FILE};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Mean and sample standard deviation (`n - 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some((mean, std))
}

/// Seed statistics of one matrix cell, in IoU points (percent).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl Cell {
    fn from_values(values: &[f64]) -> Option<Self> {
        mean_std(values).map(|(mean, std)| Cell {
            mean,
            std,
            runs: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub name: String,
    pub runs: usize,
    /// Old, new and all groups; `None` is reported as N/A.
    pub cells: [Option<Cell>; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentMatrix {
    pub columns: [String; 3],
    pub rows: Vec<MatrixRow>,
}

fn row_key(log: &RunLog) -> String {
    let variant = log.meta.get("variant").cloned().unwrap_or_else(|| "unnamed".into());
    match log.meta.get("token_init").map(String::as_str) {
        Some("mean") | None => variant,
        Some(init) => format!("{variant} [{init}]"),
    }
}

fn row_rank(name: &str) -> (usize, String) {
    let order = ["full", "-mkd", "-mkd-dec", "-der", "finetune"];
    let rank = order.iter().position(|o| *o == name).unwrap_or(order.len());
    (rank, name.to_string())
}

fn read_run(dir: &Path) -> Result<Option<RunLog>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    RunLog::read(&path).map(Some)
}

fn percent(v: Option<f64>) -> Option<f64> {
    v.map(|x| 100.0 * x)
}

/// Final-step old/new/all mIoU per variant, aggregated over seeds. A run
/// directory without a metrics file yields an all-N/A row named after the
/// directory.
pub fn tabulate(run_dirs: &[PathBuf]) -> Result<ExperimentMatrix> {
    let mut groups: BTreeMap<String, Vec<[Option<f64>; 3]>> = BTreeMap::new();
    let mut missing = Vec::new();
    let mut columns: Option<[String; 3]> = None;
    for dir in run_dirs {
        let Some(log) = read_run(dir)? else {
            missing.push(dir.file_name().map_or_else(
                || dir.display().to_string(),
                |n| n.to_string_lossy().into_owned(),
            ));
            continue;
        };
        let Some(last) = log.final_step() else {
            return Err(Error::malformed(dir.join(METRICS_FILE), "no evaluation records"));
        };
        if columns.is_none() {
            columns = Some(group_columns(&log, last));
        }
        groups.entry(row_key(&log)).or_default().push([
            percent(last.scores.old),
            percent(last.scores.new),
            percent(last.scores.all),
        ]);
    }
    let mut rows: Vec<MatrixRow> = groups
        .into_iter()
        .map(|(name, runs)| {
            let cell = |g: usize| {
                let v: Vec<f64> = runs.iter().filter_map(|r| r[g]).collect();
                Cell::from_values(&v)
            };
            MatrixRow {
                runs: runs.len(),
                cells: [cell(0), cell(1), cell(2)],
                name,
            }
        })
        .collect();
    rows.sort_by_key(|r| row_rank(&r.name));
    for name in missing {
        rows.push(MatrixRow {
            name,
            runs: 0,
            cells: [None, None, None],
        });
    }
    Ok(ExperimentMatrix {
        columns: columns.unwrap_or_else(|| ["old".into(), "new".into(), "all".into()]),
        rows,
    })
}

fn group_columns(log: &RunLog, last: &StepReport) -> [String; 3] {
    let initial = log
        .meta
        .get("setup")
        .and_then(|s| s.split('-').next())
        .and_then(|s| s.parse::<usize>().ok());
    match initial {
        Some(i) if last.classes > i + 1 => [
            format!("0-{i}"),
            format!("{}-{}", i + 1, last.classes - 1),
            "all".into(),
        ],
        _ => ["old".into(), "new".into(), "all".into()],
    }
}

fn fmt_cell(c: &Option<Cell>) -> String {
    match c {
        Some(c) => format!("{:.2} ± {:.2}", c.mean, c.std),
        None => "N/A".into(),
    }
}

impl ExperimentMatrix {
    pub fn row(&self, name: &str) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut table: Vec<Vec<String>> = vec![vec![
            "variant".into(),
            self.columns[0].clone(),
            self.columns[1].clone(),
            self.columns[2].clone(),
            "runs".into(),
        ]];
        for r in &self.rows {
            let mut line = vec![r.name.clone()];
            line.extend(r.cells.iter().map(fmt_cell));
            line.push(r.runs.to_string());
            table.push(line);
        }
        let widths: Vec<usize> = (0..5)
            .map(|i| table.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (n, line) in table.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}", w = *w))
                .collect();
            let _ = writeln!(out, "{}", cells.join(" | ").trim_end());
            if n == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "{}", rule.join("-|-"));
            }
        }
        out
    }

    /// CSV with header
    /// `variant,runs,group,mean,std` and one line per row and group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,runs,group,mean,std\n");
        for r in &self.rows {
            for (col, cell) in self.columns.iter().zip(&r.cells) {
                let (m, s) = match cell {
                    Some(c) => (format!("{:.4}", c.mean), format!("{:.4}", c.std)),
                    None => ("NA".into(), "NA".into()),
                };
                let _ = writeln!(out, "{},{},{},{},{}", r.name, r.runs, col, m, s);
            }
        }
        out
    }
}

/// Final all-class mIoU of one class ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderingResult {
    pub ordering_seed: u64,
    pub class_order: Vec<String>,
    pub all_miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderingStudy {
    pub results: Vec<OrderingResult>,
    pub mean: f64,
    pub std: f64,
}

impl OrderingStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ordering_seed,class_order,all\n");
        for r in &self.results {
            let _ = writeln!(out, "{},{},{:.4}", r.ordering_seed, r.class_order.join(" "), r.all_miou);
        }
        let _ = writeln!(out, "mean,,{:.4}\nstd,,{:.4}", self.mean, self.std);
        out
    }
}

/// Run the stream once per ordering seed and summarise the final
/// all-class mIoU (in points). Run directories are written under `out`
/// when given.
pub fn ordering_study(cfg: &TrainConfig, ordering_seeds: &[u64], out: Option<&Path>) -> Result<OrderingStudy> {
    if ordering_seeds.len() < 2 {
        return Err(Error::InvalidArgument {
            arg: "orderings",
            reason: format!("need at least 2 orderings, got {}", ordering_seeds.len()),
        });
    }
    let mut results = Vec::new();
    for &seed in ordering_seeds {
        let mut c = cfg.clone();
        c.stream.ordering_seed = seed;
        let dir = out.map(|d| d.join(format!("order_{seed:03}")));
        let outcome = run_continual(&c, dir.as_deref())?;
        let all = outcome
            .log
            .final_step()
            .and_then(|s| s.scores.all)
            .ok_or_else(|| Error::MissingData("run produced no evaluation".into()))?;
        results.push(OrderingResult {
            ordering_seed: seed,
            class_order: outcome.stream.class_order.iter().map(|k| k.name().to_string()).collect(),
            all_miou: 100.0 * all,
        });
    }
    let scores: Vec<f64> = results.iter().map(|r| r.all_miou).collect();
    let (mean, std) = mean_std(&scores).expect("at least two results");
    let study = OrderingStudy { results, mean, std };
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("orderings.csv"), study.to_csv())?;
    }
    Ok(study)
}

/// Per-step old/new/all mIoU trajectories of one run, in points.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub name: String,
    pub old: Vec<(usize, f64)>,
    pub new: Vec<(usize, f64)>,
    pub all: Vec<(usize, f64)>,
}

impl Curves {
    pub fn from_log(name: impl Into<String>, log: &RunLog) -> Self {
        let pick = |f: fn(&StepReport) -> Option<f64>| -> Vec<(usize, f64)> {
            log.steps
                .iter()
                .filter_map(|s| f(s).map(|v| (s.step, 100.0 * v)))
                .collect()
        };
        Self {
            name: name.into(),
            old: pick(|s| s.scores.old),
            new: pick(|s| s.scores.new),
            all: pick(|s| s.scores.all),
        }
    }

    /// Line chart as a standalone SVG document.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (480.0, 320.0, 40.0);
        let last = self
            .all
            .iter()
            .chain(&self.old)
            .chain(&self.new)
            .map(|p| p.0)
            .max()
            .unwrap_or(1)
            .max(2);
        let x = |step: usize| pad + (step - 1) as f64 / (last - 1) as f64 * (w - 2.0 * pad);
        let y = |v: f64| h - pad - v.clamp(0.0, 100.0) / 100.0 * (h - 2.0 * pad);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{}</text>"#,
            self.name
        );
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="black" points="{pad},{pad} {pad},{} {},{}"/>"#,
            h - pad,
            w - pad,
            h - pad
        );
        for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
            let _ = writeln!(
                s,
                r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="10">{tick}</text>"#,
                y(tick) + 3.0
            );
        }
        for step in 1..=last {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="10">{step}</text>"#,
                x(step) - 3.0,
                h - pad + 14.0
            );
        }
        for (i, (label, pts, color)) in [
            ("old", &self.old, "#1f77b4"),
            ("new", &self.new, "#d62728"),
            ("all", &self.all, "#2ca02c"),
        ]
        .into_iter()
        .enumerate()
        {
            let coords: Vec<String> = pts.iter().map(|&(t, v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{label}</title></polyline>"#,
                coords.join(" ")
            );
            let ly = 30.0 + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="11" fill="{color}">{label}</text>"#,
                w - pad - 30.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Write one SVG per run directory into `out`; returns the curves drawn.
pub fn plot_curves(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<(PathBuf, Curves)>> {
    if run_dirs.is_empty() {
        return Err(Error::MissingData("no run directories given".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for dir in run_dirs {
        let log = read_run(dir)?.ok_or_else(|| {
            Error::MissingData(format!("{} has no {METRICS_FILE}", dir.display()))
        })?;
        if log.steps.is_empty() {
            return Err(Error::MissingData(format!("{} has no evaluated steps", dir.display())));
        }
        let name = dir
            .file_name()
            .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
        let curves = Curves::from_log(name.clone(), &log);
        let path = out.join(format!("{name}.svg"));
        std::fs::write(&path, curves.to_svg())?;
        written.push((path, curves));
    }
    Ok(written)
}
