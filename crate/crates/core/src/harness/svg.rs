//! Minimal static SVG charts.
//!
//! Every plotted point carries `data-x` / `data-y` attributes holding the
//! exact strings written to the matching CSV, so plots can be checked
//! against tables.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 55.0); // left right top bottom
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Shortest round-trip decimal form, shared by CSV and SVG output.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Lower and upper band edges, drawn as a shaded polygon.
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>, log: bool, px_lo: f64, px_hi: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let pad = 0.04 * (hi - lo);
        Self {
            lo: lo - pad,
            hi: hi + pad,
            log,
            px_lo,
            px_hi,
        }
    }

    fn map(&self, v: f64) -> f64 {
        let v = if self.log { v.max(1e-300).log10() } else { v };
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            let mut t: Vec<f64> = (a..=b).map(|e| 10f64.powi(e)).collect();
            if t.len() < 2 {
                t = vec![10f64.powf(self.lo + 0.04 * (self.hi - self.lo)), 10f64.powf(self.hi)];
            }
            return t;
        }
        let span = self.hi - self.lo;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
        let mut t = Vec::new();
        let mut v = (self.lo / step).ceil() * step;
        while v <= self.hi {
            t.push(if v.abs() < step * 1e-9 { 0.0 } else { v });
            v += step;
        }
        t
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        format!("{}", (v * 1e6).round() / 1e6)
    }
}

fn frame(out: &mut String, title: &str, x_label: &str, y_label: &str, xa: Axis, ya: Axis, ox: f64, oy: f64) {
    let (l, r, t, b) = (xa.px_lo, xa.px_hi, ya.px_hi, ya.px_lo);
    let _ = writeln!(out, r##"<g transform="translate({ox},{oy})">"##);
    let _ = writeln!(out, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, r - l, b - t);
    for v in xa.ticks() {
        let x = xa.map(v);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{}" stroke="#444"/><text x="{x:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"##,
            b + 4.0,
            b + 17.0,
            tick_label(v)
        );
    }
    for v in ya.ticks() {
        let y = ya.map(v);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.2}" x2="{l}" y2="{y:.2}" stroke="#444"/><text x="{}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"##,
            l - 4.0,
            l - 6.0,
            y + 4.0,
            tick_label(v)
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{}" font-size="13" text-anchor="middle">{}</text>"##,
        (l + r) / 2.0,
        t - 10.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{}" font-size="12" text-anchor="middle">{}</text>"##,
        (l + r) / 2.0,
        b + 35.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{:.1}" font-size="12" text-anchor="middle" transform="rotate(-90 {} {:.1})">{}</text>"##,
        l - 50.0,
        (t + b) / 2.0,
        l - 50.0,
        (t + b) / 2.0,
        escape(y_label)
    );
}

impl LineChart {
    pub fn render(&self) -> String {
        let (ml, mr, mt, mb) = MARGIN;
        let xs = self.series.iter().flat_map(|s| s.x.iter().copied());
        let ys = self.series.iter().flat_map(|s| {
            let band = s.band.iter().flat_map(|(a, b)| a.iter().chain(b).copied());
            s.y.iter().copied().chain(band).collect::<Vec<_>>()
        });
        let xa = Axis::new(xs, self.log_x, ml, W - mr - 110.0);
        let ya = Axis::new(ys, false, H - mb, mt);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"##
        );
        let _ = writeln!(out, r##"<rect width="{W}" height="{H}" fill="white"/>"##);
        frame(&mut out, &self.title, &self.x_label, &self.y_label, xa, ya, 0.0, 0.0);
        for (i, s) in self.series.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            if let Some((lo, hi)) = &s.band {
                let mut pts: Vec<String> = s.x.iter().zip(hi).map(|(&x, &y)| format!("{:.2},{:.2}", xa.map(x), ya.map(y))).collect();
                pts.extend(s.x.iter().zip(lo).rev().map(|(&x, &y)| format!("{:.2},{:.2}", xa.map(x), ya.map(y))));
                let _ = writeln!(out, r##"<polygon points="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"##, pts.join(" "));
            }
            let path: Vec<String> = s.x.iter().zip(&s.y).map(|(&x, &y)| format!("{:.2},{:.2}", xa.map(x), ya.map(y))).collect();
            let _ = writeln!(out, r##"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"##, path.join(" "));
            let _ = writeln!(out, r##"<g class="series" data-name="{}">"##, escape(&s.name));
            for (&x, &y) in s.x.iter().zip(&s.y) {
                let _ = writeln!(
                    out,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}" data-x="{}" data-y="{}"/>"##,
                    xa.map(x),
                    ya.map(y),
                    fmt_num(x),
                    fmt_num(y)
                );
            }
            let _ = writeln!(out, "</g>");
            let ly = mt + 10.0 + 18.0 * i as f64;
            let lx = W - mr - 100.0;
            let _ = writeln!(
                out,
                r##"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}" font-size="11">{}</text>"##,
                lx + 18.0,
                lx + 22.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        let _ = writeln!(out, "</g>\n</svg>");
        out
    }
}

/// One scatter panel with several labelled point sets.
#[derive(Clone, Debug)]
pub struct ScatterPanel {
    pub title: String,
    pub sets: Vec<(String, Vec<(f64, f64)>)>,
}

/// Panels laid out row-major in `cols` columns.
pub fn scatter_grid(title: &str, panels: &[ScatterPanel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let (pw, ph) = (300.0, 280.0);
    let (tw, th) = (pw * cols as f64, ph * rows as f64 + 30.0);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{tw}" height="{th}" viewBox="0 0 {tw} {th}" font-family="sans-serif">"##
    );
    let _ = writeln!(out, r##"<rect width="{tw}" height="{th}" fill="white"/>"##);
    let _ = writeln!(
        out,
        r##"<text x="{}" y="20" font-size="14" text-anchor="middle">{}</text>"##,
        tw / 2.0,
        escape(title)
    );
    for (k, p) in panels.iter().enumerate() {
        let (ox, oy) = ((k % cols) as f64 * pw, 30.0 + (k / cols) as f64 * ph);
        let xa = Axis::new(p.sets.iter().flat_map(|(_, v)| v.iter().map(|q| q.0)), false, 55.0, pw - 10.0);
        let ya = Axis::new(p.sets.iter().flat_map(|(_, v)| v.iter().map(|q| q.1)), false, ph - 50.0, 30.0);
        frame(&mut out, &p.title, "", "", xa, ya, ox, oy);
        for (i, (name, pts)) in p.sets.iter().enumerate() {
            let c = COLORS[i % COLORS.len()];
            let _ = writeln!(out, r##"<g class="series" data-name="{}">"##, escape(name));
            for &(x, y) in pts {
                let _ = writeln!(
                    out,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{c}" fill-opacity="0.5"/>"##,
                    xa.map(x),
                    ya.map(y)
                );
            }
            let _ = writeln!(
                out,
                r##"</g><text x="{}" y="{}" font-size="10" fill="{c}">{}</text>"##,
                pw - 90.0,
                45.0 + 12.0 * i as f64,
                escape(name)
            );
        }
        let _ = writeln!(out, "</g>");
    }
    let _ = writeln!(out, "</svg>");
    out
}
