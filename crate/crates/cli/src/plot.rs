//! Static SVG plots: one observable, two curves with error bands.

use plotters::prelude::*;

pub struct Curve<'a> {
    pub label: &'a str,
    pub t: &'a [f64],
    pub y: &'a [f64],
    pub err: &'a [f64],
}

fn span(curves: &[Curve]) -> ((f64, f64), (f64, f64)) {
    let (mut t0, mut t1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in curves {
        for i in 0..c.t.len() {
            t0 = t0.min(c.t[i]);
            t1 = t1.max(c.t[i]);
            y0 = y0.min(c.y[i] - c.err[i]);
            y1 = y1.max(c.y[i] + c.err[i]);
        }
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    if t1 <= t0 {
        t1 = t0 + 1.0;
    }
    ((t0, t1), (y0 - pad, y1 + pad))
}

pub fn render(title: &str, y_label: &str, curves: &[Curve]) -> Result<String, String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (800, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        let ((t0, t1), (y0, y1)) = span(curves);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 22))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(t0..t1, y0..y1)
            .map_err(|e| e.to_string())?;
        chart.configure_mesh().x_desc("t").y_desc(y_label).draw().map_err(|e| e.to_string())?;
        let palette = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44)];
        for (k, c) in curves.iter().enumerate() {
            let color = palette[k % palette.len()];
            if c.err.iter().any(|&e| e > 0.0) {
                let upper = c.t.iter().zip(c.y).zip(c.err).map(|((&t, &y), &e)| (t, y + e));
                let lower = c.t.iter().zip(c.y).zip(c.err).rev().map(|((&t, &y), &e)| (t, y - e));
                let band: Vec<(f64, f64)> = upper.chain(lower).collect();
                chart.draw_series(std::iter::once(Polygon::new(band, color.mix(0.2)))).map_err(|e| e.to_string())?;
            }
            chart
                .draw_series(LineSeries::new(c.t.iter().copied().zip(c.y.iter().copied()), color.stroke_width(2)))
                .map_err(|e| e.to_string())?
                .label(c.label)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| e.to_string())?;
        root.present().map_err(|e| e.to_string())?;
    }
    Ok(svg)
}
