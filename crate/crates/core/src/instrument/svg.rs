use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
        }
    }
}

/// Minimal polyline chart.
#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

impl LineChart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_y: false,
            series: Vec::new(),
        }
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }

    pub fn with_series(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    fn y(&self, v: f64) -> Option<f64> {
        let v = if self.log_y { v.log10() } else { v };
        v.is_finite().then_some(v)
    }

    pub fn render(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().filter_map(|&(x, y)| self.y(y).map(|y| (x, y))))
            .filter(|p| p.0.is_finite())
            .collect();
        let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        if pts.is_empty() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        let tick = |v: f64| {
            if self.log_y {
                format!("1e{v:.1}")
            } else {
                format!("{v:.4}")
            }
        };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
        let _ = writeln!(
            s,
            r#"<polyline points="{l},{t} {l},{b} {r},{b}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 15.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{l}" y="{}" text-anchor="middle">{}</text>"#,
            b + 16.0,
            format_num(x0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{r}" y="{}" text-anchor="middle">{}</text>"#,
            b + 16.0,
            format_num(x1)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{b}" text-anchor="end">{}</text>"#,
            l - 4.0,
            tick(y0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            l - 4.0,
            t + 4.0,
            tick(y1)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let coords: Vec<String> = series
                .points
                .iter()
                .filter_map(|&(x, y)| {
                    self.y(y)
                        .filter(|_| x.is_finite())
                        .map(|y| format!("{:.2},{:.2}", px(x), py(y)))
                })
                .collect();
            if coords.len() == 1 {
                let (cx, cy) = coords[0].split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            } else if !coords.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    coords.join(" ")
                );
            }
            let ly = t + 14.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#,
                r - 150.0,
                ly - 9.0
            );
            let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, r - 136.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn format_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.3e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_each_series() {
        let svg = LineChart::new("loss <train>", "step", "loss")
            .with_series(Series::new("a", vec![(0.0, 1.0), (1.0, 0.5)]))
            .with_series(Series::new("b", vec![(0.0, 2.0)]))
            .render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("stroke-width").count(), 1);
        assert!(svg.contains("<circle"));
        assert!(svg.contains("loss &lt;train&gt;"));
    }

    #[test]
    fn log_axis_drops_non_positive_points() {
        let svg = LineChart::new("t", "x", "y")
            .log_y()
            .with_series(Series::new("a", vec![(0.0, 0.0), (1.0, 10.0), (2.0, 100.0)]))
            .render();
        assert!(svg.matches(',').count() >= 2);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
