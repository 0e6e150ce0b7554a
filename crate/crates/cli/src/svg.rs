//! Static SVG of spectrum curves over a transition stick histogram.

use std::fmt::Write;

use odmr13c_core::spectrum::SpectrumCurve;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 50.0;
/// Share of the plot height given to the stick histogram.
const STICK_BAND: f64 = 0.25;

/// Curves share one vertical scale; sticks `(frequency, strength)` outside the
/// frequency range of the first curve are dropped.
pub fn plot(curves: &[(&SpectrumCurve, &str)], sticks: &[(f64, f64)]) -> String {
    let mut doc = String::new();
    let _ = writeln!(
        doc,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(doc, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let Some((first, _)) = curves.first() else {
        doc.push_str("</svg>\n");
        return doc;
    };
    let (f0, f1) = (first.freqs[0], first.freqs[first.len() - 1]);
    let (lo, hi) = curves
        .iter()
        .flat_map(|(c, _)| c.values.iter())
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let curve_h = plot_h * (1.0 - STICK_BAND);
    let x = |f: f64| MARGIN + (f - f0) / (f1 - f0) * plot_w;
    let y = |v: f64| MARGIN + curve_h * (1.0 - (v - lo) / span);

    let _ = writeln!(
        doc,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#444"/>"##
    );
    for (curve, color) in curves {
        let mut points = String::new();
        for (f, v) in curve.freqs.iter().zip(&curve.values) {
            let _ = write!(points, "{:.2},{:.2} ", x(*f), y(*v));
        }
        let _ = writeln!(
            doc,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            points.trim_end()
        );
    }

    let visible: Vec<(f64, f64)> =
        sticks.iter().copied().filter(|(f, s)| *f >= f0 && *f <= f1 && *s > 0.0).collect();
    let top = visible.iter().map(|s| s.1).fold(0.0, f64::max);
    if top > 0.0 {
        let base = HEIGHT - MARGIN;
        let band = plot_h * STICK_BAND * 0.9;
        for (f, s) in visible {
            let _ = writeln!(
                doc,
                r##"<line x1="{0:.2}" y1="{base:.2}" x2="{0:.2}" y2="{1:.2}" stroke="#888" stroke-width="0.6"/>"##,
                x(f),
                base - band * s / top
            );
        }
    }

    for k in 0..=4 {
        let f = f0 + (f1 - f0) * k as f64 / 4.0;
        let _ = writeln!(
            doc,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">{f:.0}</text>"#,
            x(f),
            HEIGHT - MARGIN + 18.0
        );
    }
    let _ = writeln!(
        doc,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">frequency (MHz)</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0
    );
    doc.push_str("</svg>\n");
    doc
}
