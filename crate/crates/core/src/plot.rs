//! SVG line charts of training history and threshold sweeps.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::EpochRecord;
use crate::wss::ThresholdSweep;

const SIZE: (u32, u32) = (720, 420);
const COLORS: [RGBColor; 6] = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::InvalidInput(format!("plotting failed: {e}"))
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn line_chart(path: &Path, title: &str, x_label: &str, series: &[Series]) -> Result<()> {
    let all = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).draw().map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Training loss, validation NMI and Recall@1 against epoch, with `K` on a
/// second chart written next to it as `<stem>-K.svg`.
pub fn history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let col = |f: fn(&EpochRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    line_chart(
        path,
        "training",
        "epoch",
        &[
            Series { name: "train loss".into(), points: col(|r| r.train_loss) },
            Series { name: "val NMI".into(), points: col(|r| r.val_nmi) },
            Series { name: "val R@1".into(), points: col(|r| r.val_r1) },
        ],
    )?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("history");
    line_chart(
        &path.with_file_name(format!("{stem}-K.svg")),
        "learners",
        "epoch",
        &[Series { name: "K".into(), points: col(|r| r.k as f64) }],
    )
}

/// Mean loss of every learner against epoch.
pub fn learners(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let k = records.iter().map(|r| r.learner_losses.len()).max().unwrap_or(0);
    let series: Vec<Series> = (0..k)
        .map(|j| Series {
            name: format!("learner {j}"),
            points: records
                .iter()
                .filter_map(|r| r.learner_losses.get(j).copied().flatten().map(|l| (r.epoch as f64, l)))
                .collect(),
        })
        .collect();
    line_chart(path, "per-learner loss", "epoch", &series)
}

/// Mean Dice against binarization threshold.
pub fn threshold_curve(path: &Path, sweep: &ThresholdSweep) -> Result<()> {
    let points = sweep.grid.iter().copied().zip(sweep.mean_dice.iter().copied()).collect();
    line_chart(path, "Dice vs threshold", "threshold", &[Series { name: "mean Dice".into(), points }])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<EpochRecord> = (1..=4)
            .map(|e| EpochRecord {
                epoch: e,
                k: 1 + e / 3,
                slice_sizes: vec![4],
                train_loss: 1.0 / e as f64,
                learner_losses: vec![Some(0.5), if e > 2 { Some(0.2) } else { None }],
                val_nmi: 0.1 * e as f64,
                val_r1: f64::NAN,
                event: None,
                reclustered: false,
            })
            .collect();
        history(&dir.path().join("h.svg"), &recs).unwrap();
        learners(&dir.path().join("l.svg"), &recs).unwrap();
        let sweep = ThresholdSweep { grid: vec![0.3, 0.5], mean_dice: vec![0.4, 0.6], best: 0.5, best_dice: 0.6 };
        threshold_curve(&dir.path().join("t.svg"), &sweep).unwrap();
        for f in ["h.svg", "h-K.svg", "l.svg", "t.svg"] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.starts_with("<svg"), "{f}");
        }
    }
}
