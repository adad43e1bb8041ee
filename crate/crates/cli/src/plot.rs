//! Minimal SVG charts. Numbers shown here are always also written to CSV.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height, body: String::new() }
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" text-anchor="{anchor}" font-family="sans-serif">{}</text>"#,
            esc(s)
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64, dash: bool) {
        let d = if dash { r#" stroke-dasharray="4,3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="{stroke}" stroke-width="{width}"{d}/>"#
        );
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="{fill}" fill-opacity="{opacity}"/>"#,
            w.max(0.0),
            h.max(0.0)
        );
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.1}" cy="{y:.1}" r="{r}" fill="{fill}" fill-opacity="{opacity}"/>"#);
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dash: bool) {
        if pts.len() < 2 {
            return;
        }
        let d = if dash { r#" stroke-dasharray="5,3""# } else { "" };
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{d}/>"#,
            p.join(" ")
        );
    }

    pub fn render(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

/// Data-to-pixel mapping for one rectangular plot area.
#[derive(Debug, Clone, Copy)]
pub struct Panel {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
    pub xr: (f64, f64),
    pub yr: (f64, f64),
}

pub fn padded_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.into_iter().filter(|v| v.is_finite()) {
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
    (lo - pad, hi + pad)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * span {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Panel {
    pub fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    pub fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    pub fn axes(&self, svg: &mut Svg, title: &str, xlabel: &str, ylabel: &str) {
        svg.line(self.x0, self.y0 + self.h, self.x0 + self.w, self.y0 + self.h, "#333", 1.0, false);
        svg.line(self.x0, self.y0, self.x0, self.y0 + self.h, "#333", 1.0, false);
        for t in ticks(self.xr.0, self.xr.1) {
            let x = self.px(t);
            svg.line(x, self.y0 + self.h, x, self.y0 + self.h + 4.0, "#333", 1.0, false);
            svg.text(x, self.y0 + self.h + 15.0, 9.0, "middle", &fmt_tick(t));
        }
        for t in ticks(self.yr.0, self.yr.1) {
            let y = self.py(t);
            svg.line(self.x0 - 4.0, y, self.x0, y, "#333", 1.0, false);
            svg.line(self.x0, y, self.x0 + self.w, y, "#eee", 0.5, false);
            svg.text(self.x0 - 6.0, y + 3.0, 9.0, "end", &fmt_tick(t));
        }
        svg.text(self.x0 + self.w / 2.0, self.y0 - 8.0, 11.0, "middle", title);
        svg.text(self.x0 + self.w / 2.0, self.y0 + self.h + 30.0, 10.0, "middle", xlabel);
        let _ = writeln!(
            svg.body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle" font-family="sans-serif" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            self.x0 - 38.0,
            self.y0 + self.h / 2.0,
            self.x0 - 38.0,
            self.y0 + self.h / 2.0,
            esc(ylabel)
        );
    }
}

/// Grid of `cols × rows` panels of equal size.
pub fn grid(cols: usize, rows: usize, cell_w: f64, cell_h: f64) -> (Svg, Vec<(f64, f64)>) {
    let svg = Svg::new(cols as f64 * cell_w, rows as f64 * cell_h);
    let mut origins = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            origins.push((c as f64 * cell_w + 60.0, r as f64 * cell_h + 30.0));
        }
    }
    (svg, origins)
}

/// Histogram panels, one per series.
pub fn histograms(titles: &[String], series: &[Vec<f64>], xlabel: &str, bins: usize) -> Svg {
    let cols = series.len().min(4).max(1);
    let rows = series.len().div_ceil(cols).max(1);
    let (mut svg, origins) = grid(cols, rows, 260.0, 220.0);
    for (i, values) in series.iter().enumerate() {
        let (lo, hi) = padded_range(values.iter().copied());
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in values.iter().filter(|v| v.is_finite()) {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let top = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let (x0, y0) = origins[i];
        let p = Panel { x0, y0, w: 180.0, h: 150.0, xr: (lo, hi), yr: (0.0, top * 1.1) };
        p.axes(&mut svg, &titles[i], xlabel, "count");
        for (b, &c) in counts.iter().enumerate() {
            let xa = p.px(lo + b as f64 * width);
            let xb = p.px(lo + (b + 1) as f64 * width);
            svg.rect(xa, p.py(c as f64), xb - xa - 0.5, p.py(0.0) - p.py(c as f64), color(i), 0.7);
        }
        if lo < 0.0 && hi > 0.0 {
            svg.line(p.px(0.0), p.y0, p.px(0.0), p.y0 + p.h, "#000", 0.8, true);
        }
    }
    svg
}

/// Box summaries (min, quartiles, median, max) per group.
pub fn box_summary(title: &str, labels: &[String], groups: &[Vec<f64>], ylabel: &str, yr: (f64, f64)) -> Svg {
    let mut svg = Svg::new(120.0 + 90.0 * groups.len() as f64, 300.0);
    let p = Panel { x0: 70.0, y0: 30.0, w: 90.0 * groups.len() as f64, h: 220.0, xr: (0.0, groups.len() as f64), yr };
    p.axes(&mut svg, title, "", ylabel);
    for (i, g) in groups.iter().enumerate() {
        let mut v: Vec<f64> = g.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
        let cx = p.px(i as f64 + 0.5);
        svg.line(cx, p.py(q(0.0)), cx, p.py(q(1.0)), "#333", 1.0, false);
        svg.rect(cx - 20.0, p.py(q(0.75)), 40.0, p.py(q(0.25)) - p.py(q(0.75)), color(i), 0.6);
        svg.line(cx - 20.0, p.py(q(0.5)), cx + 20.0, p.py(q(0.5)), "#000", 2.0, false);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        svg.circle(cx, p.py(mean), 3.0, "#000", 1.0);
        svg.text(cx, p.y0 + p.h + 15.0, 10.0, "middle", &labels[i]);
    }
    svg
}

/// Predicted-versus-true scatter panels with the 1:1 line and ±10% bounds.
pub fn scatter_panels(titles: &[String], pairs: &[Vec<(f64, f64)>], unit: &str) -> Svg {
    let cols = pairs.len().min(4).max(1);
    let rows = pairs.len().div_ceil(cols).max(1);
    let (mut svg, origins) = grid(cols, rows, 260.0, 240.0);
    for (i, pts) in pairs.iter().enumerate() {
        let r = padded_range(pts.iter().flat_map(|(a, b)| [*a, *b]));
        let (x0, y0) = origins[i];
        let p = Panel { x0, y0, w: 180.0, h: 170.0, xr: r, yr: r };
        p.axes(&mut svg, &titles[i], &format!("true {unit}"), &format!("predicted {unit}"));
        svg.polyline(&[(p.px(r.0), p.py(r.0)), (p.px(r.1), p.py(r.1))], "#000", 1.0, false);
        for k in [0.9, 1.1] {
            svg.polyline(&[(p.px(r.0), p.py(k * r.0)), (p.px(r.1), p.py(k * r.1))], "#888", 0.8, true);
        }
        for (t, q) in pts {
            if q.is_finite() && *q >= r.0 && *q <= r.1 {
                svg.circle(p.px(*t), p.py(*q), 2.2, color(i), 0.6);
            }
        }
    }
    svg
}

/// Reliability bars: empirical coverage against nominal level, one panel per series.
pub fn reliability(titles: &[String], levels: &[f64], coverages: &[Vec<f64>], eces: &[f64]) -> Svg {
    let cols = coverages.len().min(4).max(1);
    let rows = coverages.len().div_ceil(cols).max(1);
    let (mut svg, origins) = grid(cols, rows, 260.0, 240.0);
    for (i, cov) in coverages.iter().enumerate() {
        let (x0, y0) = origins[i];
        let p = Panel { x0, y0, w: 180.0, h: 170.0, xr: (0.0, 1.0), yr: (0.0, 1.0) };
        p.axes(&mut svg, &titles[i], "nominal level", "empirical coverage");
        svg.polyline(&[(p.px(0.0), p.py(0.0)), (p.px(1.0), p.py(1.0))], "#000", 1.0, true);
        for (l, c) in levels.iter().zip(cov) {
            let w = 0.06;
            svg.rect(p.px(l - w / 2.0), p.py(*c), p.px(w) - p.px(0.0), p.py(0.0) - p.py(*c), color(i), 0.7);
        }
        svg.text(p.x0 + 6.0, p.y0 + 14.0, 10.0, "start", &format!("ECE = {:.3}", eces[i]));
    }
    svg
}

/// Grouped bars per category, one colour per series.
pub fn grouped_bars(title: &str, categories: &[String], series_names: &[String], values: &[Vec<f64>], ylabel: &str) -> Svg {
    let n_cat = categories.len().max(1);
    let mut svg = Svg::new(160.0 + 80.0 * n_cat as f64, 320.0);
    let top = values.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0, f64::max).max(1e-12);
    let p = Panel { x0: 70.0, y0: 30.0, w: 80.0 * n_cat as f64, h: 220.0, xr: (0.0, n_cat as f64), yr: (0.0, top * 1.15) };
    p.axes(&mut svg, title, "", ylabel);
    let n_s = values.len().max(1);
    let bw = 0.8 / n_s as f64;
    for (s, vals) in values.iter().enumerate() {
        for (c, v) in vals.iter().enumerate() {
            let xa = p.px(c as f64 + 0.1 + s as f64 * bw);
            let xb = p.px(c as f64 + 0.1 + (s + 1) as f64 * bw);
            svg.rect(xa, p.py(*v), xb - xa, p.py(0.0) - p.py(*v), color(s), 0.8);
        }
    }
    for (c, name) in categories.iter().enumerate() {
        svg.text(p.px(c as f64 + 0.5), p.y0 + p.h + 15.0, 10.0, "middle", name);
    }
    for (s, name) in series_names.iter().enumerate() {
        let y = 40.0 + 14.0 * s as f64;
        svg.rect(p.x0 + p.w + 10.0, y - 8.0, 10.0, 10.0, color(s), 0.8);
        svg.text(p.x0 + p.w + 24.0, y, 10.0, "start", name);
    }
    svg
}

/// Metric-versus-condition lines, one per model.
pub fn condition_lines(title: &str, conditions: &[String], models: &[String], values: &[Vec<f64>], ylabel: &str) -> Svg {
    let n = conditions.len().max(2);
    let mut svg = Svg::new(180.0 + 60.0 * n as f64, 300.0);
    let r = padded_range(values.iter().flatten().copied());
    let p = Panel { x0: 70.0, y0: 30.0, w: 60.0 * n as f64, h: 200.0, xr: (-0.5, conditions.len() as f64 - 0.5), yr: r };
    p.axes(&mut svg, title, "", ylabel);
    for (m, vals) in values.iter().enumerate() {
        let pts: Vec<(f64, f64)> = vals.iter().enumerate().map(|(c, v)| (p.px(c as f64), p.py(*v))).collect();
        svg.polyline(&pts, color(m), 1.5, false);
        for (x, y) in &pts {
            svg.circle(*x, *y, 3.0, color(m), 1.0);
        }
        let y = 40.0 + 14.0 * m as f64;
        svg.rect(p.x0 + p.w + 10.0, y - 8.0, 10.0, 10.0, color(m), 1.0);
        svg.text(p.x0 + p.w + 24.0, y, 10.0, "start", &models[m]);
    }
    for (c, name) in conditions.iter().enumerate() {
        svg.text(p.px(c as f64), p.y0 + p.h + 28.0, 9.0, "middle", name);
    }
    svg
}

/// Undeformed truss with true and predicted vertical deflections, one panel per mode.
pub fn mode_shapes(coords: &[(f64, f64)], edges: &[[u32; 2]], truth: &[Vec<f64>], pred: &[Vec<f64>], macs: &[f64]) -> Svg {
    let m = truth.len();
    let (mut svg, origins) = grid(m.min(2).max(1), m.div_ceil(2).max(1), 360.0, 220.0);
    let xr = padded_range(coords.iter().map(|c| c.0));
    let span = xr.1 - xr.0;
    for k in 0..m {
        let (x0, y0) = origins[k];
        let yr0 = padded_range(coords.iter().map(|c| c.1));
        let yr = (yr0.0 - 0.25 * span, yr0.1 + 0.25 * span);
        let p = Panel { x0, y0, w: 260.0, h: 150.0, xr, yr };
        svg.text(p.x0 + p.w / 2.0, p.y0 - 8.0, 11.0, "middle", &format!("mode {} (MAC {:.3})", k + 1, macs[k]));
        let amp = 0.15 * span;
        let scale = |v: &[f64]| {
            let mx = v.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-12);
            v.iter().map(|x| x / mx * amp).collect::<Vec<_>>()
        };
        let t = scale(&truth[k]);
        // predicted sign aligned to the truth; MAC is sign-blind
        let dot: f64 = pred[k].iter().zip(&truth[k]).map(|(a, b)| a * b).sum();
        let s = if dot < 0.0 { -1.0 } else { 1.0 };
        let q: Vec<f64> = scale(&pred[k]).iter().map(|v| v * s).collect();
        for e in edges.iter().filter(|e| e[0] < e[1]) {
            let (a, b) = (e[0] as usize, e[1] as usize);
            svg.line(p.px(coords[a].0), p.py(coords[a].1), p.px(coords[b].0), p.py(coords[b].1), "#bbb", 0.8, true);
            svg.line(p.px(coords[a].0), p.py(coords[a].1 + t[a]), p.px(coords[b].0), p.py(coords[b].1 + t[b]), color(0), 1.4, false);
            svg.line(p.px(coords[a].0), p.py(coords[a].1 + q[a]), p.px(coords[b].0), p.py(coords[b].1 + q[b]), color(1), 1.2, true);
        }
    }
    svg.text(10.0, 14.0, 10.0, "start", "grey: undeformed, blue: true, red dashed: predicted");
    svg
}
