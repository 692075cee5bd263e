//! Minimal deterministic SVG line charts for belief timeseries.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 48.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 32.0;
const BOTTOM: f64 = 40.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stroke {
    Solid,
    Dashed,
    Dotted,
}

impl Stroke {
    fn dasharray(self) -> Option<&'static str> {
        match self {
            Stroke::Solid => None,
            Stroke::Dashed => Some("6 4"),
            Stroke::Dotted => Some("2 3"),
        }
    }
}

/// One polyline. `color` indexes the palette so related lines share a hue.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: usize,
    pub stroke: Stroke,
    /// `(t, value)` with values in `[0, 1]`.
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders `series` on a `t ∈ [1, t_max]`, `y ∈ [0, 1]` grid.
pub fn line_chart(title: &str, t_max: usize, series: &[Series]) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let span = (t_max.max(2) - 1) as f64;
    let x = |t: f64| LEFT + (t - 1.0) / span * plot_w;
    let y = |v: f64| TOP + (1.0 - v.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="20" font-size="13">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for i in 0..=4 {
        let v = f64::from(i) / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{yy:.2}" x2="{LEFT}" y2="{yy:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            yy + 4.0
        );
    }
    let step = t_max.div_ceil(12).max(1);
    for t in (1..=t_max.max(1)).step_by(step) {
        let xx = x(t as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{xx:.2}" y1="{:.2}" x2="{xx:.2}" y2="{:.2}" stroke="black"/><text x="{xx:.2}" y="{:.2}" text-anchor="middle">{t}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 4.0,
            TOP + plot_h + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">t</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 6.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[ser.color % PALETTE.len()];
        let dash = ser
            .stroke
            .dasharray()
            .map_or(String::new(), |d| format!(r#" stroke-dasharray="{d}""#));
        let pts: Vec<String> = ser.points.iter().map(|&(t, v)| format!("{:.2},{:.2}", x(t), y(v))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
            pts.join(" ")
        );
        let ly = TOP + 8.0 + 14.0 * i as f64;
        let lx = WIDTH - RIGHT + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> Vec<Series> {
        vec![Series {
            label: "a<b".into(),
            color: 0,
            stroke: Stroke::Dashed,
            points: vec![(1.0, 0.0), (2.0, 0.5), (3.0, 1.0)],
        }]
    }

    #[test]
    fn renders_polyline_with_scaled_points() {
        let svg = line_chart("story", 3, &series());
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(r#"points="48.00,360.00 309.00,196.00 570.00,32.00""#));
        assert!(svg.contains("stroke-dasharray=\"6 4\""));
        assert!(svg.contains("a&lt;b"));
    }

    #[test]
    fn output_is_reproducible() {
        assert_eq!(line_chart("s", 3, &series()), line_chart("s", 3, &series()));
    }

    #[test]
    fn single_sentence_story_does_not_divide_by_zero() {
        let svg = line_chart("s", 1, &[Series { points: vec![(1.0, 0.5)], ..series()[0].clone() }]);
        assert!(!svg.contains("NaN"));
    }
}
