//! SVG figures: retention curves, ROC curves and per-epoch loss monitors.

use std::path::Path;

use bea_core::detector::History;
use bea_core::metrics::RetentionCurve;
use plotters::prelude::*;

use crate::error::{HarnessError, Result};

const SIZE: (u32, u32) = (720, 480);

fn plot_err(path: &Path) -> impl Fn(String) -> HarnessError + '_ {
    move |message| HarnessError::Plot {
        path: path.to_path_buf(),
        message,
    }
}

fn color(i: usize) -> RGBColor {
    const PALETTE: [RGBColor; 6] = [
        RGBColor(31, 119, 180),
        RGBColor(255, 127, 14),
        RGBColor(44, 160, 44),
        RGBColor(214, 39, 40),
        RGBColor(148, 103, 189),
        RGBColor(140, 86, 75),
    ];
    PALETTE[i % PALETTE.len()]
}

/// Line chart of several labelled series on shared axes.
fn line_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    x_range: (f64, f64),
    y_range: (f64, f64),
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let err = plot_err(path);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x_range.0..x_range.1, y_range.0..y_range.1)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))
            .map_err(|e| err(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| err(e.to_string()))?;
    root.present().map_err(|e| err(e.to_string()))
}

fn padded(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
            (l.min(v), h.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

pub fn plot_retention(path: &Path, curves: &[(String, &RetentionCurve)]) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|(label, c)| {
            let pts = c
                .fractions
                .iter()
                .copied()
                .zip(c.ap50_values.iter().copied())
                .collect();
            (format!("{label} (AUC {:.3})", c.auc), pts)
        })
        .collect();
    line_chart(
        path,
        "AP50 retention",
        "fraction of detections retained (most certain first)",
        "AP50",
        (0.0, 1.0),
        (0.0, 1.0),
        &series,
    )
}

pub fn plot_roc(path: &Path, title: &str, curves: &[(String, &[(f64, f64)])]) -> Result<()> {
    let mut series: Vec<(String, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|(l, pts)| (l.clone(), pts.to_vec()))
        .collect();
    series.push(("chance".into(), vec![(0.0, 0.0), (1.0, 1.0)]));
    line_chart(
        path,
        title,
        "false positive rate",
        "true positive rate",
        (0.0, 1.0),
        (0.0, 1.0),
        &series,
    )
}

/// One figure per monitor: `L_ta_conf`, `L_tq_conf` and the α/β MSE, each
/// overlaid across runs. Returns the files written.
pub fn plot_monitors(
    dir: &Path,
    prefix: &str,
    runs: &[(String, &History)],
) -> Result<Vec<std::path::PathBuf>> {
    type Pick = fn(&bea_core::detector::EpochRecord) -> Option<f64>;
    let panels: [(&str, &str, Pick); 3] = [
        ("ta_conf", "L_ta on confidence", |r| r.l_ta_conf),
        ("tq_conf", "L_tq on confidence", |r| r.l_tq_conf),
        ("mse", "MSE between alpha and beta", |r| r.mse_alpha_beta),
    ];
    let mut written = Vec::new();
    for (file, title, pick) in panels {
        let series: Vec<(String, Vec<(f64, f64)>)> = runs
            .iter()
            .map(|(label, h)| {
                let pts = h
                    .epochs
                    .iter()
                    .filter_map(|r| pick(r).map(|v| (r.epoch as f64, v)))
                    .collect();
                (label.clone(), pts)
            })
            .filter(|(_, pts): &(String, Vec<(f64, f64)>)| !pts.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        let max_epoch = series
            .iter()
            .flat_map(|(_, p)| p.iter().map(|q| q.0))
            .fold(1.0f64, f64::max);
        let y = padded(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
        let path = dir.join(format!("{prefix}monitor_{file}.svg"));
        line_chart(&path, title, "epoch", title, (0.0, max_epoch), y, &series)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bea_core::detector::EpochRecord;

    #[test]
    fn writes_svg_files() {
        let dir = tempfile::tempdir().unwrap();
        let curve = RetentionCurve {
            fractions: vec![0.5, 1.0],
            ap50_values: vec![0.4, 0.6],
            auc: 0.5,
        };
        let p = dir.path().join("r.svg");
        plot_retention(&p, &[("a".into(), &curve)]).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("<svg"));

        let roc = [(0.0, 0.0), (0.2, 0.7), (1.0, 1.0)];
        plot_roc(
            &dir.path().join("roc.svg"),
            "far",
            &[("a".into(), &roc[..])],
        )
        .unwrap();

        let rec = |epoch, v| EpochRecord {
            epoch,
            l_ta_conf: Some(v),
            l_tq_conf: Some(10.0 * v),
            mse_alpha_beta: None,
            l_conv: 1.0,
            l_tandem: Some(v),
            l_div: 0.0,
            l_total: 1.0,
            dropped_gt: 0,
            learning_rate: 0.01,
        };
        let h = History {
            epochs: vec![rec(0, 1.0), rec(1, 0.5)],
        };
        let files = plot_monitors(dir.path(), "", &[("a".into(), &h)]).unwrap();
        assert_eq!(files.len(), 2);
    }
}
