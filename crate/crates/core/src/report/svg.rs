//! Minimal SVG bar and line charts.

use std::fmt::Write as _;

use super::{escape, fmt_num};

const W: f64 = 720.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

/// Grouped bar chart: one group per category, one bar per series.
#[derive(Debug, Clone)]
pub struct BarChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub categories: Vec<String>,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone)]
pub struct LineSeries {
    pub name: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<LineSeries>,
}

fn finite_range(vals: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = if include_zero { (0.0, 0.0) } else { (f64::INFINITY, f64::NEG_INFINITY) };
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (if include_zero && lo == 0.0 { 0.0 } else { lo - pad }, hi + pad)
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let n = raw / mag;
    mag * if n < 1.5 {
        1.0
    } else if n < 3.5 {
        2.0
    } else if n < 7.5 {
        5.0
    } else {
        10.0
    }
}

struct Frame {
    lo: f64,
    hi: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        TOP + (H - TOP - BOTTOM) * (self.hi - v) / (self.hi - self.lo)
    }
}

fn open(s: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (LEFT + W - RIGHT) / 2.0,
        escape(title),
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label),
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn y_axis(s: &mut String, f: &Frame) {
    let step = nice_step(f.hi - f.lo);
    let mut t = (f.lo / step).ceil() * step;
    while t <= f.hi + 1e-9 * step {
        let y = f.y(t);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" x2=\"{}\" y1=\"{y:.2}\" y2=\"{y:.2}\" stroke=\"#eee\"/><text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" class=\"tick\">{}</text>",
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0,
            trim_tick(t, step)
        );
        t += step;
    }
    let _ = writeln!(
        s,
        "<line x1=\"{LEFT}\" x2=\"{LEFT}\" y1=\"{TOP}\" y2=\"{}\" stroke=\"#333\"/>",
        H - BOTTOM
    );
    if f.lo < 0.0 && f.hi > 0.0 {
        let y0 = f.y(0.0);
        let _ = writeln!(
            s,
            "<line x1=\"{LEFT}\" x2=\"{}\" y1=\"{y0:.2}\" y2=\"{y0:.2}\" stroke=\"#333\"/>",
            W - RIGHT
        );
    }
}

fn trim_tick(t: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let v = if t.abs() < step * 1e-9 { 0.0 } else { t };
    format!("{v:.decimals$}")
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - RIGHT + 12.0,
            PALETTE[i % PALETTE.len()],
            W - RIGHT + 26.0,
            y + 9.0,
            escape(name)
        );
    }
}

impl BarChart {
    pub fn render(&self) -> String {
        let mut s = String::new();
        open(&mut s, &self.title, &self.x_label, &self.y_label);
        let f = {
            let (lo, hi) = finite_range(self.series.iter().flat_map(|x| x.values.iter().copied()), true);
            Frame { lo, hi }
        };
        y_axis(&mut s, &f);
        let n_cat = self.categories.len().max(1);
        let n_ser = self.series.len().max(1);
        let group_w = (W - LEFT - RIGHT) / n_cat as f64;
        let bar_w = group_w * 0.8 / n_ser as f64;
        let base = f.y(0.0_f64.clamp(f.lo, f.hi));
        for (c, cat) in self.categories.iter().enumerate() {
            let gx = LEFT + group_w * c as f64 + group_w * 0.1;
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
                LEFT + group_w * (c as f64 + 0.5),
                H - BOTTOM + 16.0,
                escape(cat)
            );
            for (k, ser) in self.series.iter().enumerate() {
                let Some(&v) = ser.values.get(c) else { continue };
                let x = gx + bar_w * k as f64;
                let (y, h) = if v.is_finite() {
                    let yv = f.y(v);
                    (yv.min(base), (yv - base).abs())
                } else {
                    (base, 0.0)
                };
                let label_y = if v >= 0.0 { y - 3.0 } else { y + h + 10.0 };
                let _ = writeln!(
                    s,
                    "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bw:.2}\" height=\"{h:.2}\" fill=\"{col}\"/>\
                     <text class=\"value\" data-series=\"{sn}\" data-category=\"{cn}\" x=\"{lx:.2}\" y=\"{label_y:.2}\" text-anchor=\"middle\" font-size=\"8\">{val}</text>",
                    bw = bar_w * 0.95,
                    col = PALETTE[k % PALETTE.len()],
                    sn = escape(&ser.name),
                    cn = escape(cat),
                    lx = x + bar_w * 0.475,
                    val = fmt_num(v)
                );
            }
        }
        let names: Vec<&str> = self.series.iter().map(|x| x.name.as_str()).collect();
        legend(&mut s, &names);
        s.push_str("</svg>\n");
        s
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let mut s = String::new();
        open(&mut s, &self.title, &self.x_label, &self.y_label);
        let f = {
            let (lo, hi) = finite_range(self.series.iter().flat_map(|x| x.ys.iter().copied()), true);
            Frame { lo, hi }
        };
        y_axis(&mut s, &f);
        let (xlo, xhi) = finite_range(self.series.iter().flat_map(|x| x.xs.iter().copied()), false);
        let px = |x: f64| LEFT + (W - LEFT - RIGHT) * (x - xlo) / (xhi - xlo);
        let mut xs: Vec<f64> = self.series.iter().flat_map(|x| x.xs.iter().copied()).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for x in xs.iter().filter(|x| x.is_finite()) {
            let _ = writeln!(
                s,
                "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" class=\"tick\">{}</text>",
                px(*x),
                H - BOTTOM + 16.0,
                trim_float(*x)
            );
        }
        for (k, ser) in self.series.iter().enumerate() {
            let col = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = ser
                .xs
                .iter()
                .zip(&ser.ys)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| format!("{:.2},{:.2}", px(*x), f.y(*y)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{col}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            );
            for (x, y) in ser.xs.iter().zip(&ser.ys) {
                let cy = if y.is_finite() { f.y(*y) } else { f.y(f.lo) };
                let _ = writeln!(
                    s,
                    "<circle cx=\"{:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"{col}\"/>\
                     <text class=\"value\" data-series=\"{}\" data-category=\"{}\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"7\">{}</text>",
                    px(*x),
                    escape(&ser.name),
                    trim_float(*x),
                    px(*x),
                    cy - 5.0,
                    fmt_num(*y)
                );
            }
        }
        let names: Vec<&str> = self.series.iter().map(|x| x.name.as_str()).collect();
        legend(&mut s, &names);
        s.push_str("</svg>\n");
        s
    }
}

fn trim_float(x: f64) -> String {
    let s = format!("{x}");
    if s.len() > 8 {
        format!("{x:.3}")
    } else {
        s
    }
}

/// `(series, category, label)` for every numeric value label in an SVG
/// produced by this module.
pub fn parse_svg_values(svg: &str) -> Vec<(String, String, String)> {
    let attr = |tag: &str, name: &str| -> String {
        let key = format!("{name}=\"");
        tag.find(&key)
            .map(|i| {
                let rest = &tag[i + key.len()..];
                rest[..rest.find('"').unwrap_or(rest.len())].to_string()
            })
            .unwrap_or_default()
    };
    let unescape = |s: String| {
        s.replace("&quot;", "\"")
            .replace("&lt;", "<")
            .replace("&gt;", ">")
            .replace("&amp;", "&")
    };
    let mut out = Vec::new();
    let mut rest = svg;
    while let Some(i) = rest.find("<text class=\"value\"") {
        rest = &rest[i..];
        let close = rest.find('>').unwrap_or(rest.len());
        let tag = &rest[..close];
        let body_end = rest.find("</text>").unwrap_or(rest.len());
        let body = rest[close + 1..body_end].to_string();
        out.push((unescape(attr(tag, "data-series")), unescape(attr(tag, "data-category")), body));
        rest = &rest[body_end..];
    }
    out
}
