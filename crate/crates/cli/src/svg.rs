//! Minimal SVG plots written as plain markup.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    /// Dashed horizontal reference lines.
    pub hlines: Vec<f64>,
    pub y_range: Option<(f64, f64)>,
    /// Shaded x intervals, e.g. undetectable regions.
    pub shade: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    }
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool, fixed: Option<(f64, f64)>) -> Self {
        if let Some((lo, hi)) = fixed {
            return Self { lo, hi, log };
        }
        let vals: Vec<f64> = values
            .filter(|v| v.is_finite() && (!log || *v > 0.0))
            .collect();
        let (mut lo, mut hi) = vals
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(*v), b.max(*v))
            });
        if !lo.is_finite() {
            (lo, hi) = if log { (1.0, 10.0) } else { (0.0, 1.0) };
        }
        if log {
            if hi / lo < 1.01 {
                lo /= 1.5;
                hi *= 1.5;
            }
            lo /= 1.1;
            hi *= 1.1;
        } else {
            let pad = if hi > lo {
                0.05 * (hi - lo)
            } else {
                0.5 * lo.abs().max(1e-3)
            };
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, log }
    }

    fn t(&self, v: f64) -> f64 {
        if self.log {
            (v.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
        } else {
            (v - self.lo) / (self.hi - self.lo)
        }
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut out = Vec::new();
            let mut d = 10f64.powf(self.lo.log10().floor());
            while d <= self.hi {
                for m in [1.0, 2.0, 5.0] {
                    let v = d * m;
                    if v >= self.lo && v <= self.hi {
                        out.push(v);
                    }
                }
                d *= 10.0;
            }
            out
        } else {
            (0..=5)
                .map(|k| self.lo + (self.hi - self.lo) * k as f64 / 5.0)
                .collect()
        }
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0));
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(self.hlines.iter().copied());
        let xa = Axis::fit(xs, self.log_x, None);
        let ya = Axis::fit(ys, self.log_y, self.y_range);
        let px = |v: f64| LEFT + pw * xa.t(v);
        let py = |v: f64| TOP + ph * (1.0 - ya.t(v));

        let mut s = header(&self.title);
        for (a, b) in &self.shade {
            let (x0, x1) = (px(*a).max(LEFT), px(*b).min(LEFT + pw));
            let _ = writeln!(
                s,
                r##"<rect x="{x0:.1}" y="{TOP}" width="{:.1}" height="{ph}" fill="#f9c5d1" opacity="0.6"/>"##,
                (x1 - x0).max(0.0)
            );
        }
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for v in xa.ticks() {
            let x = px(v);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(v)
            );
        }
        for v in ya.ticks() {
            let y = py(v);
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0,
                tick_label(v)
            );
        }
        for h in &self.hlines {
            let y = py(*h);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#555" stroke-dasharray="6,4"/>"##,
                LEFT + pw
            );
        }
        for (k, ser) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = ser
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
                .map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y)))
                .collect();
            let dash = if ser.dashed {
                r#" stroke-dasharray="5,3""#
            } else {
                ""
            };
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (x, y) = p.split_once(',').unwrap();
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
            }
            let ly = TOP + 10.0 + 18.0 * k as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.1}" y="{:.1}" font-size="12">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&ser.name)
            );
        }
        axis_labels(&mut s, &self.x_label, &self.y_label, pw, ph);
        s.push_str("</svg>\n");
        s
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn axis_labels(s: &mut String, x: &str, y: &str, pw: f64, ph: f64) {
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        H - 12.0,
        escape(x)
    );
    let cy = TOP + ph / 2.0;
    let _ = writeln!(
        s,
        r#"<text x="18" y="{cy:.1}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {cy:.1})">{}</text>"#,
        escape(y)
    );
}

/// Square matrix heatmap on [0, 1]; `None` cells are left grey.
pub fn heatmap(title: &str, labels: &[String], cells: &[Vec<Option<f64>>]) -> String {
    let k = labels.len().max(1) as f64;
    let side = (H - TOP - BOTTOM).min(W - LEFT - RIGHT);
    let c = side / k;
    let x0 = LEFT + 30.0;
    let mut s = header(title);
    for (i, row) in cells.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let (x, y) = (x0 + c * j as f64, TOP + c * i as f64);
            let (fill, text) = match v {
                Some(p) => (blue_red(*p), format!("{p:.2}")),
                None => ("#dddddd".to_string(), String::new()),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{c:.1}" height="{c:.1}" fill="{fill}" stroke="white"/><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{text}</text>"#,
                x + c / 2.0,
                y + c / 2.0 + 4.0
            );
        }
    }
    for (i, l) in labels.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#,
            x0 - 4.0,
            TOP + c * i as f64 + c / 2.0 + 4.0,
            escape(l),
            x0 + c * i as f64 + c / 2.0,
            TOP + side + 16.0,
            escape(l)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="12">row beats column with probability P</text>"#,
        x0,
        TOP + side + 36.0
    );
    s.push_str("</svg>\n");
    s
}

fn blue_red(p: f64) -> String {
    let p = p.clamp(0.0, 1.0);
    let (r, g, b) = if p >= 0.5 {
        let t = (p - 0.5) * 2.0;
        (
            255.0 * (1.0 - t) + 33.0 * t,
            255.0 * (1.0 - t) + 102.0 * t,
            255.0 * (1.0 - t) + 172.0 * t,
        )
    } else {
        let t = (0.5 - p) * 2.0;
        (
            255.0 * (1.0 - t) + 178.0 * t,
            255.0 * (1.0 - t) + 24.0 * t,
            255.0 * (1.0 - t) + 43.0 * t,
        )
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_every_series() {
        let c = LineChart {
            title: "a < b".into(),
            log_x: true,
            log_y: true,
            series: vec![
                Series::new("MCD", vec![(30.0, 0.1), (500.0, 0.01)]),
                Series::new("MAP", vec![(30.0, 0.2), (500.0, 0.05)]).dashed(),
            ],
            hlines: vec![0.05],
            shade: vec![(30.0, 100.0)],
            ..Default::default()
        };
        let svg = c.render();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("#f9c5d1"));
    }

    #[test]
    fn heatmap_has_one_rect_per_cell() {
        let labels = vec!["a".to_string(), "b".to_string()];
        let cells = vec![vec![None, Some(0.9)], vec![Some(0.1), None]];
        let svg = heatmap("t", &labels, &cells);
        // background plus four cells
        assert_eq!(svg.matches("<rect").count(), 5);
        assert!(svg.contains("0.90"));
        assert_eq!(blue_red(0.5), "#ffffff");
    }
}
