//! Minimal SVG output: scatter plots, heat maps and box plots.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 400.0;
const ML: f64 = 60.0;
const MR: f64 = 20.0;
const MT: f64 = 36.0;
const MB: f64 = 50.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
    w: f64,
    h: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        ML + (x - self.x.0) / (self.x.1 - self.x.0) * (self.w - ML - MR)
    }

    fn py(&self, y: f64) -> f64 {
        self.h - MB - (y - self.y.0) / (self.y.1 - self.y.0) * (self.h - MT - MB)
    }
}

fn header(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        esc(title)
    );
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str, xticks: bool) {
    let (x0, x1, y0, y1) = (ML, f.w - MR, MT, f.h - MB);
    let _ = writeln!(
        out,
        r#"<rect x="{x0}" y="{y0}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let yv = f.y.0 + t * (f.y.1 - f.y.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            f.py(yv) + 4.0,
            tick(yv)
        );
        if xticks {
            let xv = f.x.0 + t * (f.x.1 - f.x.0);
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                f.px(xv),
                y1 + 16.0,
                tick(xv)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        f.h - 12.0,
        esc(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        esc(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Scatter of `(x, y)` points with an optional line `y = a + b·x`.
pub fn scatter(points: &[(f64, f64)], line: Option<(f64, f64)>, title: &str, xlabel: &str, ylabel: &str) -> String {
    scatter_inner(points, line, &[], title, xlabel, ylabel)
}

/// Scatter with a polyline drawn over it.
pub fn scatter_curve(points: &[(f64, f64)], curve: &[(f64, f64)], title: &str, xlabel: &str, ylabel: &str) -> String {
    scatter_inner(points, None, curve, title, xlabel, ylabel)
}

fn scatter_inner(
    points: &[(f64, f64)],
    line: Option<(f64, f64)>,
    curve: &[(f64, f64)],
    title: &str,
    xlabel: &str,
    ylabel: &str,
) -> String {
    let f = Frame {
        x: range(points.iter().map(|p| p.0)),
        y: range(points.iter().map(|p| p.1)),
        w: W,
        h: H,
    };
    let mut out = String::new();
    header(&mut out, W, H, title);
    axes(&mut out, &f, xlabel, ylabel, true);
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let _ = writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#1f77b4" fill-opacity="0.5"/>"##,
            f.px(x),
            f.py(y)
        );
    }
    if let Some((a, b)) = line {
        // clip to the visible x range
        let (xa, xb) = f.x;
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="1.5"/>"##,
            f.px(xa),
            f.py(a + b * xa).clamp(MT, H - MB),
            f.px(xb),
            f.py(a + b * xb).clamp(MT, H - MB)
        );
    }
    let pts: Vec<String> = curve
        .iter()
        .filter(|p| p.0.is_finite() && p.1.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y).clamp(MT, H - MB)))
        .collect();
    if pts.len() > 1 {
        let _ = writeln!(
            out,
            r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Blue-to-red ramp for `t` in [0, 1].
fn color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let stops = [(49.0, 54.0, 149.0), (255.0, 255.0, 191.0), (165.0, 0.0, 38.0)];
    let (a, b, u) = if t < 0.5 {
        (stops[0], stops[1], t * 2.0)
    } else {
        (stops[1], stops[2], t * 2.0 - 1.0)
    };
    let m = |p: f64, q: f64| (p + (q - p) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", m(a.0, b.0), m(a.1, b.1), m(a.2, b.2))
}

/// Heat map of values on a regular grid; `values[j * xs.len() + i]` belongs
/// to `(xs[i], ys[j])`. Missing or non-finite cells are left blank.
pub fn heatmap(xs: &[f64], ys: &[f64], values: &[f64], title: &str, label: &str) -> String {
    assert_eq!(values.len(), xs.len() * ys.len(), "grid size mismatch");
    let half = |v: &[f64]| {
        if v.len() > 1 {
            (v[1] - v[0]).abs() / 2.0
        } else {
            0.5
        }
    };
    let (hx, hy) = (half(xs), half(ys));
    let xr = (xs.iter().copied().fold(f64::INFINITY, f64::min) - hx, xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + hx);
    let yr = (ys.iter().copied().fold(f64::INFINITY, f64::min) - hy, ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) + hy);
    let legend = 70.0;
    let f = Frame {
        x: if xs.is_empty() { (0.0, 1.0) } else { xr },
        y: if ys.is_empty() { (0.0, 1.0) } else { yr },
        w: W,
        h: H,
    };
    let (lo, hi) = range(values.iter().copied());
    let mut out = String::new();
    header(&mut out, W + legend, H, title);
    for (j, &y) in ys.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            let v = values[j * xs.len() + i];
            if !v.is_finite() {
                continue;
            }
            let (x0, x1) = (f.px(x - hx), f.px(x + hx));
            let (y0, y1) = (f.py(y + hy), f.py(y - hy));
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x1 - x0 + 0.3,
                y1 - y0 + 0.3,
                color((v - lo) / (hi - lo))
            );
        }
    }
    axes(&mut out, &f, "x (km)", "y (km)", true);
    let lx = W + 5.0;
    for k in 0..20 {
        let t = k as f64 / 19.0;
        let y = H - MB - t * (H - MT - MB);
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{:.2}" width="14" height="{:.2}" fill="{}"/>"#,
            y - (H - MT - MB) / 20.0,
            (H - MT - MB) / 20.0 + 0.3,
            color(t)
        );
    }
    for (t, v) in [(0.0, lo), (1.0, hi)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            H - MB - t * (H - MT - MB) + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        lx + 20.0,
        MT - 6.0,
        esc(label)
    );
    out.push_str("</svg>\n");
    out
}

fn quartiles(v: &[f64]) -> [f64; 5] {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return [f64::NAN; 5];
    }
    let q = |p: f64| {
        let h = p * (s.len() - 1) as f64;
        let (i, fr) = (h.floor() as usize, h - h.floor());
        if i + 1 < s.len() {
            s[i] + fr * (s[i + 1] - s[i])
        } else {
            s[i]
        }
    };
    [s[0], q(0.25), q(0.5), q(0.75), s[s.len() - 1]]
}

/// One box (min, quartiles, max) per labelled group.
pub fn boxplot(groups: &[(String, Vec<f64>)], title: &str, ylabel: &str) -> String {
    let f = Frame {
        x: (0.0, groups.len().max(1) as f64),
        y: range(groups.iter().flat_map(|g| g.1.iter().copied())),
        w: W,
        h: H,
    };
    let mut out = String::new();
    header(&mut out, W, H, title);
    axes(&mut out, &f, "", ylabel, false);
    let bw = 0.5 * (f.px(1.0) - f.px(0.0));
    for (k, (label, v)) in groups.iter().enumerate() {
        let c = f.px(k as f64 + 0.5);
        let [lo, q1, md, q3, hi] = quartiles(v);
        if md.is_finite() {
            let _ = writeln!(
                out,
                r#"<line x1="{c:.2}" y1="{:.2}" x2="{c:.2}" y2="{:.2}" stroke="black"/>"#,
                f.py(lo),
                f.py(hi)
            );
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="#9ecae1" stroke="black"/>"##,
                c - bw / 2.0,
                f.py(q3),
                f.py(q1) - f.py(q3)
            );
            let _ = writeln!(
                out,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#,
                c - bw / 2.0,
                f.py(md),
                c + bw / 2.0,
                f.py(md)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{c:.2}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - MB + 16.0,
            esc(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_are_well_formed() {
        let s = scatter(&[(1.0, 2.0), (3.0, 5.0)], Some((0.0, 1.5)), "a<b", "x", "y");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<circle").count(), 2);
        let h = heatmap(&[0.0, 1.0], &[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0, f64::NAN, 5.0, 6.0], "t", "v");
        assert_eq!(h.matches("<rect").count(), 1 + 5 + 1 + 20);
        let b = boxplot(&[("M1".into(), vec![1.0, 2.0, 3.0]), ("M2".into(), vec![])], "t", "rmspe");
        assert!(b.contains(">M2<"));
        let c = scatter_curve(&[(1.0, 2.0)], &[(0.0, 1.0), (2.0, 3.0)], "t", "x", "y");
        assert_eq!(c.matches("<polyline").count(), 1);
    }

    #[test]
    fn quartiles_interpolate() {
        assert_eq!(quartiles(&[4.0, 1.0, 3.0, 2.0, 5.0]), [1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn colors_span_the_ramp() {
        assert_eq!(color(0.0), "#313695");
        assert_eq!(color(1.0), "#a50026");
        assert_eq!(color(f64::NAN), color(0.5));
    }
}
