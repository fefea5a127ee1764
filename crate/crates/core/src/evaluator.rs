//! Accuracy sweeps over (thinking steps x complexity) and frontier analysis.
//!
//! Cells are evaluated on fresh instances whose seeds depend only on the
//! evaluation seed, the complexity, and the instance index, so every step
//! count sees the same instance set per complexity and grids reproduce
//! exactly. The model is shared read-only across cell workers.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::atomic_write;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{child_seed, labeled_seed};
use crate::taskgen::{generate_balanced, TaskKind};

/// Accuracy grid over (steps x complexity) with training-boundary markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub task: TaskKind,
    pub steps: Vec<usize>,
    pub complexities: Vec<usize>,
    /// accuracy[i][j] for steps[i], complexities[j].
    pub accuracy: Vec<Vec<f64>>,
    pub n_per_cell: usize,
    /// Training ranges, drawn as dashed boundaries on the rendered map.
    pub train_step_range: (usize, usize),
    pub train_complexity_range: (usize, usize),
}

impl HeatmapReport {
    pub fn cell(&self, steps: usize, complexity: usize) -> Option<f64> {
        let i = self.steps.iter().position(|&s| s == steps)?;
        let j = self.complexities.iter().position(|&c| c == complexity)?;
        Some(self.accuracy[i][j])
    }
}

/// Evaluate the model over the grid. `n_per_cell` fresh instances per cell,
/// labels balanced by slot parity on binary tasks.
pub fn sweep(
    model: &Model,
    steps: &[usize],
    complexities: &[usize],
    n_per_cell: usize,
    seed: u64,
    train_step_range: (usize, usize),
    train_complexity_range: (usize, usize),
) -> Result<HeatmapReport> {
    if steps.is_empty() || complexities.is_empty() || n_per_cell == 0 {
        return Err(Error::EmptyGrid);
    }
    for &t in steps {
        if t < 1 || t > model.cfg.t_max {
            return Err(Error::StepOutOfRange {
                t,
                t_max: model.cfg.t_max,
            });
        }
    }
    let eval_seed = labeled_seed(seed, "eval");
    let task = model.cfg.task;

    let cells: Vec<(usize, usize)> = steps
        .iter()
        .flat_map(|&t| complexities.iter().map(move |&c| (t, c)))
        .collect();
    let accs: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(t, c)| cell_accuracy(model, task, t, c, n_per_cell, eval_seed))
        .collect();

    let mut accuracy = vec![vec![0.0; complexities.len()]; steps.len()];
    for (idx, acc) in accs.into_iter().enumerate() {
        let i = idx / complexities.len();
        let j = idx % complexities.len();
        accuracy[i][j] = acc?;
    }
    Ok(HeatmapReport {
        task,
        steps: steps.to_vec(),
        complexities: complexities.to_vec(),
        accuracy,
        n_per_cell,
        train_step_range,
        train_complexity_range,
    })
}

/// Accuracy of one cell; instance seeds are independent of the step count so
/// step columns are paired samples.
pub fn cell_accuracy(
    model: &Model,
    task: TaskKind,
    t_steps: usize,
    complexity: usize,
    n: usize,
    eval_seed: u64,
) -> Result<f64> {
    let cseed = child_seed(eval_seed, complexity as u64);
    let correct: Result<usize> = (0..n)
        .into_par_iter()
        .map(|i| {
            let inst_seed = child_seed(cseed, i as u64);
            let inst = generate_balanced(task, complexity, i, inst_seed)?;
            let pred = model.predict(&inst, t_steps, child_seed(inst_seed, 3))?;
            Ok((pred == inst.label_index()) as usize)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b));
    Ok(correct? as f64 / n as f64)
}

/// Per-complexity minimal sufficient steps and frontier sharpness.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub complexity: usize,
    /// Smallest evaluated step count reaching the threshold, if any.
    pub min_sufficient_steps: Option<usize>,
    /// Accuracy jump from the previous evaluated step count; `None` when the
    /// frontier sits on the first step of the axis.
    pub sharpness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierStats {
    pub threshold: f64,
    pub points: Vec<FrontierPoint>,
}

/// Scan the grid for the accuracy frontier at the given threshold.
pub fn frontier_stats(report: &HeatmapReport, threshold: f64) -> Result<FrontierStats> {
    if report.steps.is_empty() || report.complexities.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut points = Vec::with_capacity(report.complexities.len());
    for (j, &c) in report.complexities.iter().enumerate() {
        let mut found = None;
        for (i, &t) in report.steps.iter().enumerate() {
            if report.accuracy[i][j] >= threshold {
                let sharpness = if i > 0 {
                    Some(report.accuracy[i][j] - report.accuracy[i - 1][j])
                } else {
                    None
                };
                found = Some(FrontierPoint {
                    complexity: c,
                    min_sufficient_steps: Some(t),
                    sharpness,
                });
                break;
            }
        }
        points.push(found.unwrap_or(FrontierPoint {
            complexity: c,
            min_sufficient_steps: None,
            sharpness: None,
        }));
    }
    Ok(FrontierStats { threshold, points })
}

// ── Emission ─────────────────────────────────────────────────────────

/// Write the canonical CSV: columns steps, complexity, accuracy, n.
pub fn emit_csv(report: &HeatmapReport, path: &Path) -> Result<()> {
    if report.steps.is_empty() || report.complexities.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["steps", "complexity", "accuracy", "n"])
        .map_err(csv_err)?;
    for (i, &t) in report.steps.iter().enumerate() {
        for (j, &c) in report.complexities.iter().enumerate() {
            w.write_record([
                t.to_string(),
                c.to_string(),
                format!("{}", report.accuracy[i][j]),
                report.n_per_cell.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Parse a grid back from the canonical CSV (boundaries are not stored in
/// the CSV; they come back zeroed).
pub fn parse_csv(bytes: &[u8], task: TaskKind) -> Result<HeatmapReport> {
    let mut rd = csv::Reader::from_reader(bytes);
    let mut rows: Vec<(usize, usize, f64, usize)> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Config(format!("csv row missing field {i}")))
        };
        rows.push((
            field(0)?.parse().map_err(parse_err)?,
            field(1)?.parse().map_err(parse_err)?,
            field(2)?.parse().map_err(parse_err)?,
            field(3)?.parse().map_err(parse_err)?,
        ));
    }
    if rows.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut steps: Vec<usize> = rows.iter().map(|r| r.0).collect();
    steps.dedup();
    let first_step = rows[0].0;
    let complexities: Vec<usize> = rows
        .iter()
        .filter(|r| r.0 == first_step)
        .map(|r| r.1)
        .collect();
    let n_per_cell = rows[0].3;
    let mut accuracy = vec![vec![0.0; complexities.len()]; steps.len()];
    for (idx, row) in rows.iter().enumerate() {
        let i = idx / complexities.len();
        let j = idx % complexities.len();
        if steps.get(i) != Some(&row.0) || complexities.get(j) != Some(&row.1) {
            return Err(Error::Config("csv grid is not in canonical order".into()));
        }
        accuracy[i][j] = row.2;
    }
    Ok(HeatmapReport {
        task,
        steps,
        complexities,
        accuracy,
        n_per_cell,
        train_step_range: (0, 0),
        train_complexity_range: (0, 0),
    })
}

fn parse_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Config(format!("csv parse: {e}"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

const CELL_PX: u32 = 28;

/// Render the grid as a PNG: steps on x, complexity on y (top row = lowest
/// complexity), accuracy mapped through a dark-to-bright colormap, training
/// boundaries drawn as dashed white lines.
pub fn emit_png(report: &HeatmapReport, path: &Path) -> Result<()> {
    if report.steps.is_empty() || report.complexities.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let w = report.steps.len() as u32 * CELL_PX;
    let h = report.complexities.len() as u32 * CELL_PX;
    let mut img = image::RgbImage::new(w, h);
    for (i, _) in report.steps.iter().enumerate() {
        for (j, _) in report.complexities.iter().enumerate() {
            let color = colormap(report.accuracy[i][j]);
            for px in 0..CELL_PX {
                for py in 0..CELL_PX {
                    img.put_pixel(
                        i as u32 * CELL_PX + px,
                        j as u32 * CELL_PX + py,
                        image::Rgb(color),
                    );
                }
            }
        }
    }
    // Dashed vertical lines at the step training boundary, horizontal at the
    // complexity boundary; drawn just outside the trained range.
    let dash = |p: u32| p % 8 < 5;
    let vline = |img: &mut image::RgbImage, x: u32| {
        for y in 0..h {
            if dash(y) && x < w {
                img.put_pixel(x, y, image::Rgb([255, 255, 255]));
            }
        }
    };
    for bound in [report.train_step_range.0, report.train_step_range.1 + 1] {
        if let Some(i) = report.steps.iter().position(|&s| s == bound) {
            vline(&mut img, i as u32 * CELL_PX);
        }
    }
    let hline = |img: &mut image::RgbImage, y: u32| {
        for x in 0..w {
            if dash(x) && y < h {
                img.put_pixel(x, y, image::Rgb([255, 255, 255]));
            }
        }
    };
    for bound in [
        report.train_complexity_range.0,
        report.train_complexity_range.1 + 1,
    ] {
        if let Some(j) = report.complexities.iter().position(|&c| c == bound) {
            hline(&mut img, j as u32 * CELL_PX);
        }
    }

    let mut bytes: Vec<u8> = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Config(format!("png encode: {e}")))?;
    atomic_write(path, &bytes)
}

/// Three-stop colormap from dark violet through teal to yellow.
fn colormap(acc: f64) -> [u8; 3] {
    let a = acc.clamp(0.0, 1.0);
    let lerp = |lo: [u8; 3], hi: [u8; 3], t: f64| {
        [
            (lo[0] as f64 + (hi[0] as f64 - lo[0] as f64) * t) as u8,
            (lo[1] as f64 + (hi[1] as f64 - lo[1] as f64) * t) as u8,
            (lo[2] as f64 + (hi[2] as f64 - lo[2] as f64) * t) as u8,
        ]
    };
    if a < 0.5 {
        lerp([68, 1, 84], [33, 145, 140], a * 2.0)
    } else {
        lerp([33, 145, 140], [253, 231, 37], (a - 0.5) * 2.0)
    }
}
