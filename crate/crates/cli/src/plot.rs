//! PNG rendering: lanes grey, observed path blue, ground truth green,
//! predicted modes red (opacity by probability).
//!
//! No text is drawn: the build carries no font backend, so the scene id
//! lives in the file name only.

use std::path::Path;

use dfrnn::model::{PredictionSet, PreparedScene};
use dfrnn::scene::Point;
use plotters::prelude::*;

use crate::run::CliError;

const SIZE: u32 = 640;

fn draw_err<E: std::fmt::Display>(path: &Path, e: E) -> CliError {
    CliError::Core(dfrnn::Error::io(path, std::io::Error::other(e.to_string())))
}

pub fn render_scene(scene: &PreparedScene, pred: &PredictionSet, path: &Path) -> Result<(), CliError> {
    let a = scene.anchor;
    let n_obs = scene.scene.n_obs;
    let observed: Vec<Point> = scene.scene.agents[a].positions[..n_obs].to_vec();
    let gt: Vec<Point> = scene.future[a].iter().flatten().copied().collect();
    let modes = pred.discrete(a);

    let pts = observed.iter().chain(&gt).chain(modes.trajectories.iter().flatten());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = ((hi[0] - lo[0]).max(hi[1] - lo[1]) / 2.0 + 5.0).max(10.0);
    let (x0, x1, y0, y1) = (c[0] - half, c[0] + half, c[1] - half, c[1] + half);

    let root = BitMapBackend::new(path, (SIZE, SIZE)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(10)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| draw_err(path, e))?;
    let xy = |v: &[Point]| v.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>();

    let lane = RGBColor(190, 190, 190);
    for l in &scene.scene.polylines {
        chart.draw_series(LineSeries::new(xy(&l.points), lane.stroke_width(1))).map_err(|e| draw_err(path, e))?;
    }
    for (_, t) in scene.scene.agents.iter().enumerate().filter(|(i, _)| *i != a) {
        let obs: Vec<Point> = t.positions[..n_obs.min(t.positions.len())].to_vec();
        chart
            .draw_series(LineSeries::new(xy(&obs), RGBColor(140, 160, 220).stroke_width(2)))
            .map_err(|e| draw_err(path, e))?;
    }
    let pmax = modes.probabilities.iter().copied().fold(0.0, f64::max).max(1e-12);
    for (m, prob) in modes.trajectories.iter().zip(&modes.probabilities) {
        let mut line = vec![*observed.last().unwrap()];
        line.extend_from_slice(m);
        let alpha = 0.25 + 0.75 * prob / pmax;
        chart
            .draw_series(LineSeries::new(xy(&line), RED.mix(alpha).stroke_width(2)))
            .map_err(|e| draw_err(path, e))?;
    }
    if !gt.is_empty() {
        let mut line = vec![*observed.last().unwrap()];
        line.extend_from_slice(&gt);
        chart.draw_series(LineSeries::new(xy(&line), GREEN.stroke_width(3))).map_err(|e| draw_err(path, e))?;
    }
    chart.draw_series(LineSeries::new(xy(&observed), BLUE.stroke_width(3))).map_err(|e| draw_err(path, e))?;
    root.present().map_err(|e| draw_err(path, e))?;
    Ok(())
}
