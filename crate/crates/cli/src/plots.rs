//! Static figures for `eval --plots`: per-sample overlays and a metrics chart.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};
use plotters::prelude::*;

use avtopo::data::FundusSample;
use avtopo::metrics::MetricsReport;
use avtopo::Tensor;

const ARTERY: [u8; 3] = [220, 40, 40];
const VEIN: [u8; 3] = [40, 90, 230];
const BOTH: [u8; 3] = [200, 60, 220];
const BACKGROUND: [u8; 3] = [12, 12, 12];

fn label_colour(artery: bool, vein: bool) -> [u8; 3] {
    match (artery, vein) {
        (true, true) => BOTH,
        (true, false) => ARTERY,
        (false, true) => VEIN,
        (false, false) => BACKGROUND,
    }
}

/// Three panels side by side: input image, ground truth, prediction.
/// Arteries are red, veins blue, pixels labelled both are magenta.
pub fn overlay(path: &Path, s: &FundusSample, probs: &Tensor, threshold: f64) -> Result<()> {
    let (h, w) = s.dims();
    let scale = (256 / h.max(w)).max(1);
    let pw = w * scale;
    let mut out = RgbImage::new((3 * pw + 8) as u32, (h * scale) as u32);
    let p = probs.data();
    let rgb = s.image.to_rgb8();
    for r in 0..h * scale {
        for c in 0..w * scale {
            let (y, x) = (r / scale, c / scale);
            let k = (y * w + x) * 3;
            let img = [rgb[k], rgb[k + 1], rgb[k + 2]];
            let gt = label_colour(s.artery.get(y, x), s.vein.get(y, x));
            let pred = label_colour(p[y * w + x] >= threshold, p[h * w + y * w + x] >= threshold);
            for (panel, px) in [img, gt, pred].into_iter().enumerate() {
                out.put_pixel((panel * (pw + 4) + c) as u32, r as u32, Rgb(px));
            }
        }
    }
    out.save(path).with_context(|| format!("writing {}", path.display()))
}

const CHART_FIELDS: [&str; 5] = ["dice", "iou", "cldice", "skeleton_f1", "junction_f1"];

/// Grouped bars of the bounded metrics for each scope of an aggregate report.
pub fn bar_chart(path: &Path, report: &MetricsReport) -> Result<()> {
    let root = SVGBackend::new(path, (760, 420)).into_drawing_area();
    root.fill(&WHITE)?;
    let n = CHART_FIELDS.len();
    let mut chart = ChartBuilder::on(&root)
        .caption("Mean metrics", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(0f64..n as f64, 0f64..1.05f64)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < n {
                CHART_FIELDS[i].to_string()
            } else {
                String::new()
            }
        })
        .draw()?;
    let colours = [RGBColor(220, 40, 40), RGBColor(40, 90, 230), RGBColor(90, 90, 90)];
    let names: Vec<&str> = avtopo::metrics::ScopeMetrics::FIELDS.to_vec();
    for (si, ((scope, m), colour)) in report.scopes().into_iter().zip(colours).enumerate() {
        let values = m.values();
        let bars = CHART_FIELDS.iter().enumerate().map(|(fi, f)| {
            let v = values[names.iter().position(|n| n == f).expect("known field")];
            let x0 = fi as f64 + 0.1 + si as f64 * 0.27;
            Rectangle::new([(x0, 0.0), (x0 + 0.25, v.clamp(0.0, 1.05))], colour.filled())
        });
        chart
            .draw_series(bars)?
            .label(scope)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], colour.filled()));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()?;
    root.present()?;
    Ok(())
}
