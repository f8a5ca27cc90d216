// Minimal SVG line and bar charts. Numbers are printed with fixed precision so
// the output bytes depend only on the data.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    s
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// One polyline per named series of `(x, y)` points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = header(title);
    let (x0, x1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|(x, _)| x)));
    let (y0, y1) = bounds(series.iter().flat_map(|(_, p)| p.iter().map(|(_, y)| y)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(d, "{}{:.2},{:.2}", if d.is_empty() { "" } else { " " }, sx(x), sy(y));
        }
        let _ = writeln!(s, r#"<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{}</text>"#,
            W - PAD - 120.0,
            PAD + 16.0 * (i as f64 + 1.0),
            escape(name)
        );
    }
    axis_labels(&mut s, x_label, y_label, (x0, x1), (y0, y1));
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with value labels.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let top = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = if v.is_finite() { v / top * (H - 2.0 * PAD) } else { 0.0 };
        let x = PAD + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
            H - PAD - h,
            slot * 0.7,
            COLORS[i % COLORS.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{v:.4}</text>"#, H - PAD - h - 4.0);
        let _ = writeln!(s, r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, H - PAD + 16.0, escape(name));
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    s.push_str("</svg>\n");
    s
}

fn axis_labels(s: &mut String, x_label: &str, y_label: &str, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let _ = writeln!(s, r#"<text x="{PAD}" y="{:.2}" text-anchor="middle">{x0:.4}</text>"#, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x1:.4}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y0:.4}</text>"#, PAD - 4.0, H - PAD);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{PAD}" text-anchor="end">{y1:.4}</text>"#, PAD - 4.0);
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_deterministic_and_well_formed() {
        let series = vec![("a<b".to_string(), vec![(1.0, 2.0), (2.0, 1.0), (3.0, f64::NAN)])];
        let a = line_chart("t", "x", "y", &series);
        assert_eq!(a, line_chart("t", "x", "y", &series));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("a&lt;b"));
        assert!(!a.contains("NaN"));
    }

    #[test]
    fn bars_scale_to_max() {
        let s = bar_chart("t", "ms", &[("x".into(), 1.0), ("y".into(), 2.0)]);
        assert!(s.contains(r#"height="300.00""#));
        assert!(s.contains(r#"height="150.00""#));
    }
}
