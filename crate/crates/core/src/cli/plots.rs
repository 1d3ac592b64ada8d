//! Static SVG figures.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{InitnoError, Result};
use crate::pipeline::{OptimizationTrace, PartitionReport};

fn plot_err(e: impl std::fmt::Display) -> InitnoError {
    InitnoError::Format(format!("plot: {e}"))
}

/// Score curves over all evaluated steps, with the thresholds dashed.
pub fn score_trajectories(path: &Path, trace: &OptimizationTrace, tau_c: f64, tau_s: f64) -> Result<()> {
    let steps: Vec<_> = trace.rounds.iter().flat_map(|r| r.steps.iter()).collect();
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = steps.len().max(2);
    let ymax = steps
        .iter()
        .map(|s| s.total())
        .filter(|v| v.is_finite())
        .fold(1.0_f64, f64::max);
    let mut chart = ChartBuilder::on(&root)
        .caption("Scores per step", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(1usize..n, 0.0..ymax * 1.05)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("evaluation")
        .y_desc("score")
        .draw()
        .map_err(plot_err)?;
    let series = [
        ("S_cross", RED, steps.iter().map(|s| s.cross_score).collect::<Vec<_>>()),
        ("S_self", BLUE, steps.iter().map(|s| s.self_score).collect()),
        ("sum", BLACK, steps.iter().map(|s| s.total()).collect()),
    ];
    for (name, color, ys) in series {
        chart
            .draw_series(LineSeries::new(
                ys.into_iter()
                    .enumerate()
                    .filter(|(_, y)| y.is_finite())
                    .map(|(i, y)| (i + 1, y)),
                color,
            ))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    for (tau, color) in [(tau_c, RED), (tau_s, BLUE)] {
        chart
            .draw_series(DashedLineSeries::new(
                vec![(1, tau), (n, tau)],
                6,
                4,
                color.mix(0.6).into(),
            ))
            .map_err(plot_err)?;
    }
    let mut first = 1;
    for r in &trace.rounds {
        first += r.steps.len();
        if first <= n && first > 1 {
            chart
                .draw_series(LineSeries::new(
                    vec![(first, 0.0), (first, ymax * 1.05)],
                    BLACK.mix(0.15),
                ))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Density histogram of noise elements against the standard normal density.
pub fn noise_histogram(path: &Path, values: &[f64]) -> Result<()> {
    let (lo, hi, bins) = (-4.0_f64, 4.0_f64, 40usize);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values.iter().filter(|v| v.is_finite()) {
        let b = ((v - lo) / width).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[b] += 1;
    }
    let total = values.len().max(1) as f64;
    let density: Vec<f64> = counts.iter().map(|&c| c as f64 / (total * width)).collect();
    let ymax = density.iter().cloned().fold(0.45_f64, f64::max) * 1.1;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Optimized noise elements vs N(0, 1)", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(lo..hi, 0.0..ymax)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("value")
        .y_desc("density")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(density.iter().enumerate().map(|(i, &d)| {
            let x0 = lo + i as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width, d)], BLUE.mix(0.4).filled())
        }))
        .map_err(plot_err)?;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    chart
        .draw_series(LineSeries::new(
            (0..=400).map(|i| {
                let x = lo + (hi - lo) * i as f64 / 400.0;
                (x, pdf(x))
            }),
            RED.stroke_width(2),
        ))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// `S_cross` against `S_self` per seed, raw and (if present) optimized.
pub fn partition_scatter(path: &Path, report: &PartitionReport) -> Result<()> {
    let root = SVGBackend::new(path, (640, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Initial noise partition", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(0.0..1.0_f64, 0.0..1.0_f64)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("S_cross")
        .y_desc("S_self")
        .draw()
        .map_err(plot_err)?;
    let raw = report
        .records
        .iter()
        .map(|r| (r.raw.cross_score, r.raw.self_score, r.raw.valid));
    chart
        .draw_series(raw.filter(|p| p.0.is_finite() && p.1.is_finite()).map(|(x, y, valid)| {
            let color = if valid { GREEN } else { RED };
            Circle::new((x, y), 3, color.filled())
        }))
        .map_err(plot_err)?
        .label("raw")
        .legend(|(x, y)| Circle::new((x + 8, y), 3, BLACK.filled()));
    let opt: Vec<_> = report
        .records
        .iter()
        .filter_map(|r| r.optimized.as_ref())
        .map(|o| (o.scores.cross_score, o.scores.self_score))
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .collect();
    if !opt.is_empty() {
        chart
            .draw_series(opt.into_iter().map(|p| Cross::new(p, 4, BLUE)))
            .map_err(plot_err)?
            .label("optimized")
            .legend(|(x, y)| Cross::new((x + 8, y), 4, BLUE));
    }
    let t = report.thresholds;
    chart
        .draw_series(DashedLineSeries::new(
            vec![(t.tau_c, 0.0), (t.tau_c, 1.0)],
            6,
            4,
            BLACK.into(),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(DashedLineSeries::new(
            vec![(0.0, t.tau_s), (1.0, t.tau_s)],
            6,
            4,
            BLACK.into(),
        ))
        .map_err(plot_err)?;
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
