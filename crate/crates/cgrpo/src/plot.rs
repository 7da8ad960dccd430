//! Static SVG charts from the emitted CSVs.
//!
//! Two artifacts, both fully recomputable from CSV content alone and
//! byte-identical across reruns:
//!
//! - per-run training curves: four stacked panels (goal rate; behavior rates
//!   with thresholds; multipliers; effective weights) over updates;
//! - sweep summary: final goal/lava/battery rates against the lava weight,
//!   one series per battery weight, mean +- sample std over seeds.

use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use thiserror::Error;

use crate::metrics::{read_metrics, MetricsError, MetricsRow};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("plot io at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("summary file {path} is missing column {column}")]
    MissingColumn { path: String, column: String },
    #[error("no plottable data under {0}")]
    NoData(String),
    #[error("render failed: {0}")]
    Render(String),
}

impl PlotError {
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PlotError::Metrics(MetricsError::MissingColumn { .. })
                | PlotError::MissingColumn { .. }
                | PlotError::NoData(_)
        )
    }
}

fn render_err<E: std::fmt::Debug>(e: E) -> PlotError {
    PlotError::Render(format!("{e:?}"))
}

const PALETTE: [RGBColor; 3] = [
    RGBColor(31, 119, 180),  // blue
    RGBColor(214, 39, 40),   // red
    RGBColor(44, 160, 44),   // green
];

fn finite_series(rows: &[MetricsRow], select: impl Fn(&MetricsRow) -> f64) -> Vec<(f64, f64)> {
    rows.iter()
        .map(|r| (r.update as f64, select(r)))
        .filter(|(_, y)| y.is_finite())
        .collect()
}

fn y_span(series: &[&[(f64, f64)]]) -> (f64, f64) {
    let mut max = f64::MIN;
    let mut min = f64::MAX;
    for s in series {
        for &(_, y) in *s {
            max = max.max(y);
            min = min.min(y);
        }
    }
    if !max.is_finite() || !min.is_finite() {
        (0.0, 1.0)
    } else {
        let pad = 0.05 * (max - min).max(1e-6);
        (min.min(0.0), max + pad)
    }
}

/// Renders the four-panel training-curve chart for one run.
pub fn plot_run_curves(rows: &[MetricsRow], out: &Path) -> Result<(), PlotError> {
    if rows.is_empty() {
        return Err(PlotError::NoData("empty metrics".into()));
    }
    let x_max = rows.last().map(|r| r.update as f64).unwrap_or(1.0).max(1.0);
    let root = SVGBackend::new(out, (900, 1200)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let panels = root.split_evenly((4, 1));

    let draw_panel = |area: &DrawingArea<SVGBackend, plotters::coord::Shift>,
                      title: &str,
                      y_range: (f64, f64),
                      series: &[(&str, Vec<(f64, f64)>)],
                      dashed: &[(&str, f64)]|
     -> Result<(), PlotError> {
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(28)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..x_max, y_range.0..y_range.1)
            .map_err(render_err)?;
        chart
            .configure_mesh()
            .x_desc("update")
            .light_line_style(RGBColor(235, 235, 235))
            .draw()
            .map_err(render_err)?;
        for (i, (name, points)) in series.iter().enumerate() {
            if points.is_empty() {
                continue;
            }
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(points.iter().copied(), &color))
                .map_err(render_err)?
                .label(*name)
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
                });
        }
        for (name, level) in dashed {
            chart
                .draw_series(DashedLineSeries::new(
                    [(0.0, *level), (x_max, *level)],
                    6,
                    4,
                    BLACK.stroke_width(1),
                ))
                .map_err(render_err)?
                .label(*name)
                .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], BLACK));
        }
        chart
            .configure_series_labels()
            .border_style(RGBColor(200, 200, 200))
            .background_style(WHITE.mix(0.85))
            .position(SeriesLabelPosition::UpperRight)
            .draw()
            .map_err(render_err)?;
        Ok(())
    };

    let goal = finite_series(rows, |r| r.goal_rate);
    draw_panel(
        &panels[0],
        "task: goal rate per update",
        (0.0, 1.02),
        &[("goal_rate", goal)],
        &[],
    )?;

    let lava = finite_series(rows, |r| r.lava_rate_per_step);
    let battery = finite_series(rows, |r| r.battery_rate_per_step);
    let mut thresholds = Vec::new();
    if let Some(d) = rows.iter().map(|r| r.d_lava).find(|d| d.is_finite()) {
        thresholds.push(("d_lava", d));
    }
    if let Some(d) = rows.iter().map(|r| r.d_battery).find(|d| d.is_finite()) {
        thresholds.push(("d_battery", d));
    }
    let span = y_span(&[&lava, &battery]);
    draw_panel(
        &panels[1],
        "behavior rates per step",
        span,
        &[("lava_rate", lava), ("battery_rate", battery)],
        &thresholds,
    )?;

    let lr = finite_series(rows, |r| r.lambda_r);
    let ll = finite_series(rows, |r| r.lambda_lava);
    let lb = finite_series(rows, |r| r.lambda_battery);
    draw_panel(
        &panels[2],
        "multipliers",
        (0.0, 1.02),
        &[("lambda_R", lr), ("lambda_lava", ll), ("lambda_battery", lb)],
        &[],
    )?;

    let er = finite_series(rows, |r| r.eff_w_r);
    let el = finite_series(rows, |r| r.eff_w_lava);
    let eb = finite_series(rows, |r| r.eff_w_battery);
    let span = y_span(&[&er, &el, &eb]);
    draw_panel(
        &panels[3],
        "effective weights",
        span,
        &[("eff_w_R", er), ("eff_w_lava", el), ("eff_w_battery", eb)],
        &[],
    )?;

    root.present().map_err(render_err)?;
    Ok(())
}

/// One aggregated sweep point parsed from `summary_agg.csv`.
#[derive(Debug, Clone)]
struct AggPoint {
    lava_weight: f64,
    battery_weight: f64,
    means: [f64; 3],
    stds: [f64; 3],
}

fn parse_agg(path: &Path) -> Result<Vec<AggPoint>, PlotError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| PlotError::Io {
        path: display.clone(),
        source,
    })?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| PlotError::NoData(display.clone()))?
        .split(',')
        .collect();
    let col = |name: &str| -> Result<usize, PlotError> {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| PlotError::MissingColumn {
                path: display.clone(),
                column: name.to_string(),
            })
    };
    let c_lava = col("lava_weight")?;
    let c_batt = col("battery_weight")?;
    let cols = [
        (col("goal_rate_mean")?, col("goal_rate_std")?),
        (col("lava_rate_mean")?, col("lava_rate_std")?),
        (col("battery_rate_mean")?, col("battery_rate_std")?),
    ];
    let mut points = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let get = |i: usize| fields.get(i).copied().unwrap_or("");
        // Constrained aggregates have empty weight columns; skip them.
        let Ok(lava_weight) = get(c_lava).parse::<f64>() else {
            continue;
        };
        let battery_weight = get(c_batt).parse::<f64>().unwrap_or(0.0);
        let mut means = [0.0; 3];
        let mut stds = [0.0; 3];
        for (slot, (cm, cs)) in cols.iter().enumerate() {
            means[slot] = get(*cm).parse::<f64>().unwrap_or(f64::NAN);
            stds[slot] = get(*cs).parse::<f64>().unwrap_or(f64::NAN);
        }
        points.push(AggPoint {
            lava_weight,
            battery_weight,
            means,
            stds,
        });
    }
    Ok(points)
}

/// Renders the sweep summary (rates vs lava weight, error bars over seeds).
pub fn plot_sweep_summary(agg_path: &Path, out: &Path) -> Result<(), PlotError> {
    let points = parse_agg(agg_path)?;
    if points.is_empty() {
        return Err(PlotError::NoData(agg_path.display().to_string()));
    }
    let mut lava_values: Vec<f64> = points.iter().map(|p| p.lava_weight).collect();
    lava_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    lava_values.dedup();
    let mut battery_values: Vec<f64> = points.iter().map(|p| p.battery_weight).collect();
    battery_values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    battery_values.dedup();
    let x_index = |w: f64| lava_values.iter().position(|&v| v == w).unwrap() as f64;

    let root = SVGBackend::new(out, (900, 1000)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let panels = root.split_evenly((3, 1));
    let titles = [
        "final goal rate vs lava weight",
        "final lava rate per step vs lava weight",
        "final battery rate per step vs lava weight",
    ];

    for (metric, title) in titles.iter().enumerate() {
        let mut y_max = f64::MIN;
        for p in &points {
            y_max = y_max.max(p.means[metric] + p.stds[metric]);
        }
        let y_max = if y_max.is_finite() { y_max * 1.1 + 1e-6 } else { 1.0 };
        let labels = lava_values.clone();
        let mut chart = ChartBuilder::on(&panels[metric])
            .caption(*title, ("sans-serif", 18))
            .margin(10)
            .x_label_area_size(32)
            .y_label_area_size(55)
            .build_cartesian_2d(-0.5..(lava_values.len() as f64 - 0.5), 0.0..y_max)
            .map_err(render_err)?;
        chart
            .configure_mesh()
            .x_desc("lava weight")
            .x_labels(lava_values.len())
            .x_label_formatter(&move |x| {
                let i = x.round() as i64;
                if i >= 0 && (i as usize) < labels.len() && (x - i as f64).abs() < 0.26 {
                    format!("{}", labels[i as usize])
                } else {
                    String::new()
                }
            })
            .light_line_style(RGBColor(235, 235, 235))
            .draw()
            .map_err(render_err)?;

        for (si, &bw) in battery_values.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let mut series: Vec<&AggPoint> = points
                .iter()
                .filter(|p| p.battery_weight == bw)
                .collect();
            series.sort_by(|a, b| a.lava_weight.partial_cmp(&b.lava_weight).unwrap());
            chart
                .draw_series(LineSeries::new(
                    series.iter().map(|p| (x_index(p.lava_weight), p.means[metric])),
                    &color,
                ))
                .map_err(render_err)?
                .label(format!("battery_weight = {bw}"))
                .legend(move |(x, y)| {
                    PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2))
                });
            chart
                .draw_series(series.iter().map(|p| {
                    ErrorBar::new_vertical(
                        x_index(p.lava_weight),
                        p.means[metric] - p.stds[metric],
                        p.means[metric],
                        p.means[metric] + p.stds[metric],
                        color.filled(),
                        6,
                    )
                }))
                .map_err(render_err)?;
        }
        chart
            .configure_series_labels()
            .border_style(RGBColor(200, 200, 200))
            .background_style(WHITE.mix(0.85))
            .position(SeriesLabelPosition::UpperRight)
            .draw()
            .map_err(render_err)?;
    }
    root.present().map_err(render_err)?;
    Ok(())
}

/// Plots everything found in a run directory (an experiment dir with cell
/// subdirectories, or a single run dir holding `metrics.csv`). Returns the
/// files written.
pub fn plot_run_dir(dir: &Path, out_dir: Option<&Path>) -> Result<Vec<PathBuf>, PlotError> {
    let out_root = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join("plots"));
    fs::create_dir_all(&out_root).map_err(|source| PlotError::Io {
        path: out_root.display().to_string(),
        source,
    })?;
    let mut written = Vec::new();

    let agg = dir.join("summary_agg.csv");
    if agg.exists() {
        let out = out_root.join("sweep_summary.svg");
        match plot_sweep_summary(&agg, &out) {
            Ok(()) => written.push(out),
            Err(PlotError::NoData(_)) => {} // constrained-only experiment
            Err(e) => return Err(e),
        }
    }

    if dir.join("metrics.csv").exists() {
        let rows = read_metrics(&dir.join("metrics.csv"))?;
        let out = out_root.join("curves.svg");
        plot_run_curves(&rows, &out)?;
        written.push(out);
    }

    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| PlotError::Io {
            path: dir.display().to_string(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("metrics.csv").exists())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let rows = read_metrics(&sub.join("metrics.csv"))?;
        let name = sub.file_name().unwrap_or_default().to_string_lossy();
        let out = out_root.join(format!("curves_{name}.svg"));
        plot_run_curves(&rows, &out)?;
        written.push(out);
    }

    if written.is_empty() {
        return Err(PlotError::NoData(dir.display().to_string()));
    }
    Ok(written)
}
