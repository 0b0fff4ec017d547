//! Accuracy against bits per sample on a log axis, one series per method,
//! each point the mean over seeds at one setting.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use super::SweepRow;
use crate::error::{Error, Result};

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

/// Groups successful rows into `(family, [(bits, accuracy)])`. UQE and RDC
/// rows form one series each across bit widths; NEC series run over λ.
fn series(rows: &[SweepRow]) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<String, BTreeMap<String, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows {
        let Ok(p) = &r.point else { continue };
        let family = r.method.split('-').next().unwrap_or(&r.method).to_string();
        let e = acc
            .entry(family)
            .or_default()
            .entry(format!("{}|{}", r.method, r.setting))
            .or_insert((0.0, 0.0, 0));
        e.0 += p.bits_per_sample;
        e.1 += p.probe_accuracy;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(family, pts)| {
            let mut v: Vec<(f64, f64)> = pts.values().map(|&(b, a, n)| (b / n as f64, a / n as f64)).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (family, v)
        })
        .collect()
}

pub fn plot_svg(rows: &[SweepRow], path: impl AsRef<Path>, title: &str) -> Result<()> {
    let err = |e: Box<dyn std::error::Error>| Error::format("plot", e.to_string());
    let data = series(rows);
    let all: Vec<(f64, f64)> = data.values().flatten().copied().filter(|p| p.0 > 0.0).collect();
    if all.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let lo = all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = all.iter().map(|p| p.0).fold(0.0, f64::max);
    let x_range = (lo / 1.5)..(hi * 1.5);

    let root = SVGBackend::new(path.as_ref(), (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(Box::new(e)))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x_range.log_scale(), 0f64..1.02f64)
        .map_err(|e| err(Box::new(e)))?;
    chart
        .configure_mesh()
        .x_desc("average bits per sample")
        .y_desc("probe accuracy")
        .draw()
        .map_err(|e| err(Box::new(e)))?;
    for (i, (family, pts)) in data.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.0 > 0.0).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(|e| err(Box::new(e)))?
            .label(family.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| err(Box::new(e)))?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(Box::new(e)))?;
    root.present().map_err(|e| err(Box::new(e)))?;
    Ok(())
}
