//! Static SVG plots drawn from run outputs.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::sim::SimOutcome;

const SIZE: (u32, u32) = (900, 500);
const COLORS: [RGBColor; 6] = [BLUE, RED, GREEN, MAGENTA, CYAN, BLACK];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Config(format!("plot: {e}"))
}

/// Line chart of named series over a shared x axis.
pub fn line_chart(path: &Path, title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(plot_err)?;
    for (i, (name, s)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()), &color))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// `reward.svg` and `training.svg` for one run.
pub fn run_plots(dir: &Path, out: &SimOutcome) -> Result<()> {
    let per_step = |f: fn(&crate::sim::StepSummary) -> f64| out.steps.iter().map(|s| (s.step as f64, f(s))).collect::<Vec<_>>();
    line_chart(
        &dir.join("reward.svg"),
        "Rollout rewards",
        "step",
        &[("task reward".into(), per_step(|s| s.mean_task_reward)), ("length penalty".into(), per_step(|s| s.mean_length_penalty))],
    )?;
    let micro = |f: fn(&swarm_core::trainer::TrainMetrics) -> f64| out.metrics.iter().enumerate().map(|(i, m)| (i as f64, f(m))).collect::<Vec<_>>();
    line_chart(
        &dir.join("training.svg"),
        "Optimizer",
        "micro-step",
        &[("grad norm".into(), micro(|m| m.grad_norm)), ("clip fraction".into(), micro(|m| m.clip_fraction))],
    )
}

/// Task reward per step, one line per asynchrony level.
pub fn ablation_plot(path: &Path, levels: &[(u64, SimOutcome)]) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = levels
        .iter()
        .map(|(k, o)| (format!("k = {k}"), o.steps.iter().map(|s| (s.step as f64, s.mean_task_reward)).collect()))
        .collect();
    line_chart(path, "Task reward by asynchrony level", "step", &series)
}
