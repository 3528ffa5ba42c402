//! Static SVG figures for reports.

use std::path::Path;

use plotters::prelude::*;

use crate::counterfactual::{CounterfactualPair, RankingResult};
use crate::error::{DaliError, Result};
use crate::evaluation::GeneralizationReport;
use crate::probes::DecayCurve;

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn color(i: usize) -> RGBColor {
    PALETTE[i % PALETTE.len()]
}

fn plot_err<E: std::fmt::Debug>(e: E) -> DaliError {
    DaliError::Plot(format!("{e:?}"))
}

/// IQM per method with bootstrap-interval whiskers, one panel per regime.
pub fn iqm_bars(path: &Path, report: &GeneralizationReport) -> Result<()> {
    let n = report.sections.len().max(1);
    let root = SVGBackend::new(path, (360 * n as u32, 320)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, n));
    for (sec, area) in report.sections.iter().zip(panels.iter()) {
        let m = sec.methods.len();
        let top = sec.methods.iter().map(|s| s.ci.hi.max(s.iqm)).fold(0.0f64, f64::max).max(1e-3) * 1.15;
        let mut chart = ChartBuilder::on(area)
            .caption(sec.regime.as_str(), ("sans-serif", 18))
            .margin(8)
            .x_label_area_size(40)
            .y_label_area_size(48)
            .build_cartesian_2d(-0.5f64..(m as f64 - 0.5), 0.0f64..top)
            .map_err(plot_err)?;
        let names: Vec<String> = sec.methods.iter().map(|s| s.method.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(m.max(1))
            .x_label_formatter(&|x| {
                let i = x.round();
                if (x - i).abs() < 1e-6 && i >= 0.0 {
                    names.get(i as usize).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("IQM normalised return")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(sec.methods.iter().enumerate().map(|(i, s)| {
                let x = i as f64;
                Rectangle::new([(x - 0.3, 0.0), (x + 0.3, s.iqm)], color(i).mix(0.8).filled())
            }))
            .map_err(plot_err)?;
        chart
            .draw_series(sec.methods.iter().enumerate().map(|(i, s)| {
                ErrorBar::new_vertical(i as f64, s.ci.lo, s.iqm, s.ci.hi, BLACK.stroke_width(1), 8)
            }))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Probability-of-improvement matrices, one heat map per regime; cell
/// `(row, column)` is P(row beats column).
pub fn poi_panels(path: &Path, report: &GeneralizationReport) -> Result<()> {
    let n = report.sections.len().max(1);
    let root = SVGBackend::new(path, (340 * n as u32, 340)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, n));
    for (sec, area) in report.sections.iter().zip(panels.iter()) {
        let m = sec.methods.len();
        let names: Vec<String> = sec.methods.iter().map(|s| s.method.clone()).collect();
        let mut chart = ChartBuilder::on(area)
            .caption(format!("P(row > column), {}", sec.regime.as_str()), ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(0f64..m as f64, 0f64..m as f64)
            .map_err(plot_err)?;
        let label = |x: &f64| {
            let i = x.floor() as usize;
            if (x - x.floor() - 0.5).abs() < 1e-6 {
                names.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        };
        chart
            .configure_mesh()
            .disable_mesh()
            .x_labels(2 * m + 1)
            .y_labels(2 * m + 1)
            .x_label_formatter(&label)
            .y_label_formatter(&|y: &f64| label(&(m as f64 - y)))
            .draw()
            .map_err(plot_err)?;
        for (i, row) in sec.poi.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                let (x, y) = (j as f64, (m - 1 - i) as f64);
                let shade = RGBColor((255.0 * (1.0 - p)) as u8, (255.0 * (1.0 - (p - 0.5).abs())) as u8, (255.0 * p) as u8);
                chart.draw_series(std::iter::once(Rectangle::new([(x, y), (x + 1.0, y + 1.0)], shade.mix(0.6).filled()))).map_err(plot_err)?;
                chart
                    .draw_series(std::iter::once(Text::new(format!("{p:.2}"), (x + 0.35, y + 0.6), ("sans-serif", 13))))
                    .map_err(plot_err)?;
            }
        }
    }
    root.present().map_err(plot_err)
}

/// Counterfactual AUC per dimension (1-based) with bootstrap whiskers and
/// the chance line.
pub fn auc_bars(path: &Path, result: &RankingResult) -> Result<()> {
    let root = SVGBackend::new(path, (520, 340)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = result.scores.len();
    let lo = result.scores.iter().map(|s| s.ci.lo.min(s.auc)).fold(0.5f64, f64::min);
    let mut chart = ChartBuilder::on(&root)
        .caption("Counterfactual AUC by embedding dimension", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(-0.5f64..(n as f64 - 0.5), (lo - 0.05).max(0.0)..1.0f64)
        .map_err(plot_err)?;
    let dims: Vec<usize> = result.scores.iter().map(|s| s.dim + 1).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 {
                dims.get(i as usize).map(|d| d.to_string()).unwrap_or_default()
            } else {
                String::new()
            }
        })
        .x_desc("dimension")
        .y_desc("AUC")
        .draw()
        .map_err(plot_err)?;
    let top = result.top();
    chart
        .draw_series(result.scores.iter().enumerate().map(|(i, s)| {
            let c = if s.dim == top { color(3) } else { color(0) };
            Rectangle::new([(i as f64 - 0.3, 0.0), (i as f64 + 0.3, s.auc)], c.mix(0.8).filled())
        }))
        .map_err(plot_err)?;
    chart
        .draw_series(
            result
                .scores
                .iter()
                .enumerate()
                .map(|(i, s)| ErrorBar::new_vertical(i as f64, s.ci.lo, s.auc, s.ci.hi, BLACK.stroke_width(1), 8)),
        )
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new([(-0.5, 0.5), (n as f64 - 0.5, 0.5)], BLACK.mix(0.5).stroke_width(1)))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Baseline against perturbed decoded trajectories, one panel per
/// observation coordinate.
pub fn trajectory_overlay(path: &Path, pair: &CounterfactualPair, coord_names: &[String]) -> Result<()> {
    let d = pair.baseline.first().map_or(0, |o| o.len());
    if d == 0 {
        return Err(DaliError::Invalid("empty trajectory".into()));
    }
    let root = SVGBackend::new(path, (900, 200 * d as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((d, 1));
    let steps = pair.baseline.len();
    for (c, area) in panels.iter().enumerate() {
        let series = |tr: &[Vec<f64>]| tr.iter().enumerate().map(|(t, o)| (t as f64, o[c])).collect::<Vec<_>>();
        let (b, p) = (series(&pair.baseline), series(&pair.perturbed));
        let (mut lo, mut hi) = b.iter().chain(&p).fold((f64::MAX, f64::MIN), |(l, h), &(_, v)| (l.min(v), h.max(v)));
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        let name = coord_names.get(c).cloned().unwrap_or_else(|| format!("o[{c}]"));
        let mut chart = ChartBuilder::on(area)
            .caption(
                if c == 0 { format!("{name}: dimension {} shifted by {:.3}", pair.dim + 1, pair.delta) } else { name },
                ("sans-serif", 14),
            )
            .margin(6)
            .x_label_area_size(24)
            .y_label_area_size(48)
            .build_cartesian_2d(0f64..(steps.max(2) - 1) as f64, (lo - pad)..(hi + pad))
            .map_err(plot_err)?;
        chart.configure_mesh().draw().map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(b, color(0).stroke_width(2)))
            .map_err(plot_err)?
            .label("baseline")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], color(0)));
        chart
            .draw_series(LineSeries::new(p, color(3).stroke_width(2)))
            .map_err(plot_err)?
            .label("perturbed")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], color(3)));
        if c == 0 {
            chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
        }
    }
    root.present().map_err(plot_err)
}

/// Held-out decoding error against window length, one line per curve, with
/// each curve's chance level dashed.
pub fn decay_curves(path: &Path, curves: &[(String, DecayCurve)]) -> Result<()> {
    let root = SVGBackend::new(path, (560, 360)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let kmax = curves.iter().flat_map(|(_, c)| c.points.iter().map(|p| p.k)).max().unwrap_or(1) as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption("Context decoding error against window length", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((0.8f64..kmax * 1.25).log_scale(), 0.0f64..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("window length K").y_desc("held-out error").draw().map_err(plot_err)?;
    for (i, (name, curve)) in curves.iter().enumerate() {
        let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.k as f64, p.error)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color(i).stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color(i)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color(i).filled()))).map_err(plot_err)?;
        chart
            .draw_series(DashedLineSeries::new(
                [(0.8, curve.chance), (kmax * 1.25, curve.chance)],
                4,
                4,
                color(i).mix(0.5).stroke_width(1),
            ))
            .map_err(plot_err)?;
    }
    if curves.len() <= 10 {
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counterfactual::{ActionMode, DimensionScore};
    use crate::envs::Regime;
    use crate::evaluation::{Interval, MethodSummary, RegimeSection};
    use crate::probes::DecayPoint;

    fn ci(lo: f64, hi: f64) -> Interval {
        Interval { lo, hi, degenerate: false }
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let summary = |m: &str, v: f64| MethodSummary { method: m.into(), iqm: v, ci: ci(v - 0.05, v + 0.05), seeds: 3, contexts: 4, episodes: 2 };
        let report = GeneralizationReport {
            sections: [Regime::Interpolate, Regime::Extrapolate]
                .into_iter()
                .map(|regime| RegimeSection {
                    regime,
                    methods: vec![summary("dali_s", 0.4), summary("dreamer_dr", 0.3)],
                    poi: vec![vec![0.5, 0.7], vec![0.3, 0.5]],
                })
                .collect(),
            archive_sha256: None,
        };
        iqm_bars(&dir.path().join("iqm.svg"), &report).unwrap();
        poi_panels(&dir.path().join("poi.svg"), &report).unwrap();
        let ranking = RankingResult {
            scores: (0..8).map(|d| DimensionScore { dim: d, delta: 0.1, auc: 0.5 + d as f64 * 0.05, ci: ci(0.45, 0.9), samples: 10 }).collect(),
            ranking: (0..8).rev().collect(),
            significance: vec![],
            bootstrap: 10,
            permutations: 10,
        };
        auc_bars(&dir.path().join("auc.svg"), &ranking).unwrap();
        let pair = CounterfactualPair {
            baseline: (0..11).map(|t| vec![(t as f64).sin(), 0.0]).collect(),
            perturbed: (0..11).map(|t| vec![(t as f64 * 1.1).sin(), 0.0]).collect(),
            dim: 2,
            delta: 0.2,
            mode: ActionMode::Zero,
        };
        trajectory_overlay(&dir.path().join("traj.svg"), &pair, &["x".into(), "y".into()]).unwrap();
        let curve = DecayCurve {
            points: [1, 2, 4].iter().map(|&k| DecayPoint { k, error: 0.6 / k as f64 }).collect(),
            chance: 0.75,
            lambda: Some(0.1),
            log_c: None,
        };
        decay_curves(&dir.path().join("decay.svg"), &[("seed 0".into(), curve)]).unwrap();
        for f in ["iqm", "poi", "auc", "traj", "decay"] {
            let text = std::fs::read_to_string(dir.path().join(format!("{f}.svg"))).unwrap();
            assert!(text.starts_with("<svg") && text.len() > 500, "{f}");
        }
    }
}
