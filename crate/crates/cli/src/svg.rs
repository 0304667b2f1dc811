//! Bare-bones SVG line plots.

use std::fmt::Write;

pub struct Series {
    pub name: String,
    pub color: &'static str,
    /// `(x, y, se)`; bars span `y ± 2 se` when `se > 0`.
    pub points: Vec<(f64, f64, f64)>,
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Draw `y = x` across the plotted range.
    pub diagonal: bool,
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const PAD: f64 = 60.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl Plot {
    pub fn render(&self) -> String {
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (mut x0, mut x1) = range(pts().map(|p| p.0));
        let (mut y0, mut y1) = range(pts().flat_map(|p| [p.1 - 2.0 * p.2, p.1 + 2.0 * p.2]));
        if self.diagonal {
            x0 = x0.min(y0);
            y0 = x0;
            x1 = x1.max(y1);
            y1 = x1;
        }
        let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

        let mut out = String::new();
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(&self.title)).unwrap();
        // axes
        writeln!(
            out,
            r#"<path class="axis" d="M{PAD},{} L{PAD},{} L{},{}" stroke="black" fill="none"/>"#,
            PAD,
            H - PAD,
            W - PAD,
            H - PAD
        )
        .unwrap();
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(xv), H - PAD + 16.0, tick(xv)).unwrap();
            writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, PAD - 6.0, sy(yv) + 4.0, tick(yv)).unwrap();
        }
        writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(&self.x_label)).unwrap();
        writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        )
        .unwrap();
        if self.diagonal {
            writeln!(
                out,
                r#"<line class="reference" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 4"/>"#,
                sx(x0),
                sy(x0),
                sx(x1),
                sy(x1)
            )
            .unwrap();
        }
        for (k, s) in self.series.iter().enumerate() {
            let path: Vec<String> = s
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
                .collect();
            writeln!(
                out,
                r#"<polyline class="curve" points="{}" stroke="{}" fill="none" stroke-width="1.5"/>"#,
                path.join(" "),
                s.color
            )
            .unwrap();
            for p in s.points.iter().filter(|p| p.2 > 0.0 && p.1.is_finite()) {
                writeln!(
                    out,
                    r#"<line class="errorbar" x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{3}"/>"#,
                    sx(p.0),
                    sy(p.1 - 2.0 * p.2),
                    sy(p.1 + 2.0 * p.2),
                    s.color
                )
                .unwrap();
            }
            let ly = PAD + 16.0 * k as f64;
            writeln!(
                out,
                r#"<text x="{}" y="{ly}" fill="{}">{}</text>"#,
                PAD + 10.0,
                s.color,
                escape(&s.name)
            )
            .unwrap();
        }
        out.push_str("</svg>\n");
        out
    }
}

fn tick(v: f64) -> String {
    format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_curves_and_reference() {
        let plot = Plot {
            title: "t < 1".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![
                Series {
                    name: "a".into(),
                    color: "red",
                    points: vec![(0.0, 0.1, 0.01), (1.0, 0.9, 0.0)],
                },
                Series {
                    name: "b".into(),
                    color: "blue",
                    points: vec![(0.0, 0.0, 0.0), (1.0, 1.0, 0.0)],
                },
            ],
            diagonal: true,
        };
        let svg = plot.render();
        assert_eq!(svg.matches("class=\"curve\"").count(), 2);
        assert_eq!(svg.matches("class=\"reference\"").count(), 1);
        assert_eq!(svg.matches("class=\"errorbar\"").count(), 1);
        assert!(svg.contains("t &lt; 1"));
    }
}
