//! Minimal static SVG line plots with logit-scaled axes.

use std::fmt::Write as _;

pub struct Series {
    pub label: String,
    /// `(sparsity, mean accuracy, std)`
    pub points: Vec<(f64, f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const LIM: f64 = 1e-3;

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LIM, 1.0 - LIM);
    (p / (1.0 - p)).ln()
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo < 1e-6 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Accuracy against sparsity, both on logit axes.
pub fn curve_svg(title: &str, series: &[Series]) -> String {
    let xs = || series.iter().flat_map(|s| s.points.iter().map(|p| logit(p.0)));
    let ys = || series.iter().flat_map(|s| s.points.iter().map(|p| logit(p.1)));
    let (x0, x1) = range(xs());
    let (y0, y1) = range(ys());
    let px = |v: f64| PAD + (logit(v) - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |v: f64| H - PAD - (logit(v) - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for p in [0.01, 0.1, 0.2, 0.5, 0.8, 0.9, 0.95, 0.99, 0.999] {
        let l = logit(p);
        if l >= x0 && l <= x1 {
            let x = px(p);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{p}</text>"#, H - PAD + 16.0);
        }
        if l >= y0 && l <= y1 {
            let y = py(p);
            let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">{p}</text>"#, PAD - 6.0);
        }
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">sparsity (logit scale)</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">test accuracy (logit scale)</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
        for p in &ser.points {
            let (lo, hi) = ((p.1 - p.2).max(LIM), (p.1 + p.2).min(1.0 - LIM));
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" x2="{x:.1}" y1="{:.1}" y2="{:.1}" stroke="{c}"/>"#,
                py(lo),
                py(hi),
                x = px(p.0)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{c}">{}</text>"#,
            W - PAD + 4.0 - 120.0,
            PAD + 14.0 * i as f64,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_is_symmetric_and_clamped() {
        assert_eq!(logit(0.5), 0.0);
        assert!((logit(0.9) + logit(0.1)).abs() < 1e-12);
        assert_eq!(logit(0.0), logit(LIM));
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        let s = curve_svg(
            "a<b",
            &[
                Series { label: "x".into(), points: vec![(0.0, 0.9, 0.01), (0.2, 0.92, 0.0)] },
                Series { label: "y".into(), points: vec![(0.36, 0.5, 0.1)] },
            ],
        );
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.contains("a&lt;b"));
        assert!(s.ends_with("</svg>\n"));
    }
}
