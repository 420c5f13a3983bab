//! Native SVG figures. Every figure is written together with a CSV holding
//! exactly the numbers drawn.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use jrsim_core::fmt_float;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One named curve.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub log_x: bool,
    pub log_y: bool,
}

/// Linear or logarithmic map from data to pixels.
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
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = if log { (1.0, 10.0) } else { (0.0, 1.0) };
        }
        if log {
            (lo, hi) = (lo.log10(), hi.log10());
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Self {
            lo,
            hi,
            log,
            px_lo,
            px_hi,
        }
    }

    fn px(&self, v: f64) -> f64 {
        let t = if self.log { v.log10() } else { v };
        self.px_lo + (t - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    /// Tick values in data units.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let mut out = Vec::new();
            for e in self.lo.floor() as i32..=self.hi.ceil() as i32 {
                for m in [1.0, 2.0, 5.0] {
                    let v = m * 10f64.powi(e);
                    let l = v.log10();
                    if l >= self.lo && l <= self.hi {
                        out.push(v);
                    }
                }
            }
            out
        } else {
            nice_ticks(self.lo, self.hi, 6)
        }
    }
}

/// Round-number ticks covering `[lo, hi]`.
pub fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let raw = (hi - lo) / target.max(1) as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.0e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LinePlot {
    pub fn to_svg(&self) -> String {
        let (w, h) = (640.0, 440.0);
        let (left, right, top, bottom) = (80.0, 150.0, 40.0, 60.0);
        let xa = Axis::new(
            self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)),
            self.log_x,
            left,
            w - right,
        );
        let ya = Axis::new(
            self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)),
            self.log_y,
            h - bottom,
            top,
        );
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            (left + w - right) / 2.0,
            esc(&self.title)
        );
        frame(&mut s, left, top, w - right, h - bottom);
        for t in xa.ticks() {
            let x = xa.px(t);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#888"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                h - bottom,
                h - bottom + 5.0,
                h - bottom + 18.0,
                tick_label(t)
            );
        }
        for t in ya.ticks() {
            let y = ya.px(t);
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{left:.2}" y2="{y:.2}" stroke="#888"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                left - 5.0,
                left - 8.0,
                y + 4.0,
                tick_label(t)
            );
        }
        if !self.log_y && ya.lo < 0.0 && ya.hi > 0.0 {
            let y = ya.px(0.0);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
                w - right
            );
        }
        axis_labels(&mut s, &self.x_label, &self.y_label, left, top, w - right, h - bottom);
        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let pts: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", xa.px(x), ya.px(y)))
                .collect();
            if pts.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    pts.join(" ")
                );
            }
            for p in &pts {
                let (x, y) = p.split_once(',').expect("formatted pair");
                let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
            }
            let ly = top + 10.0 + 18.0 * k as f64;
            let lx = w - right + 15.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 25.0,
                ly + 4.0,
                esc(&series.name)
            );
        }
        s.push_str("</svg>\n");
        s
    }

    /// `series,x,y` rows of every plotted point.
    pub fn to_csv(&self) -> io::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["series", "x", "y"])?;
        for s in &self.series {
            for &(x, y) in &s.points {
                w.write_record([s.name.as_str(), &fmt_float(x), &fmt_float(y)])?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())
    }

    /// Writes `<stem>.svg` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> io::Result<()> {
        std::fs::write(dir.join(format!("{stem}.svg")), self.to_svg())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)
    }
}

fn frame(s: &mut String, x0: f64, y0: f64, x1: f64, y1: f64) {
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        x1 - x0,
        y1 - y0
    );
}

fn axis_labels(s: &mut String, xl: &str, yl: &str, x0: f64, y0: f64, x1: f64, y1: f64) {
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        y1 + 40.0,
        esc(xl)
    );
    let (cx, cy) = (x0 - 55.0, (y0 + y1) / 2.0);
    let _ = writeln!(
        s,
        r#"<text x="{cx}" y="{cy}" text-anchor="middle" transform="rotate(-90 {cx} {cy})">{}</text>"#,
        esc(yl)
    );
}

/// One panel of a heatmap: values on an `x` by `y` grid.
#[derive(Clone, Debug)]
pub struct Panel {
    pub title: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[iy][ix]`; NaN marks a missing cell.
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub value_label: String,
    pub panels: Vec<Panel>,
}

/// Diverging map: blue below zero, light green at zero, red above.
pub fn diverging_color(v: f64, limit: f64) -> String {
    if !v.is_finite() {
        return "#d9d9d9".into();
    }
    let t = if limit > 0.0 { (v / limit).clamp(-1.0, 1.0) } else { 0.0 };
    let zero = [199.0, 233.0, 192.0];
    let end = if t < 0.0 { [33.0, 102.0, 172.0] } else { [178.0, 24.0, 43.0] };
    let a = t.abs();
    let c: Vec<u8> = (0..3).map(|k| (zero[k] + (end[k] - zero[k]) * a).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

impl Heatmap {
    /// Symmetric color limit `max |value|`.
    pub fn limit(&self) -> f64 {
        self.panels
            .iter()
            .flat_map(|p| p.values.iter().flatten())
            .filter(|v| v.is_finite())
            .fold(0.0, |a: f64, v| a.max(v.abs()))
    }

    pub fn to_svg(&self) -> String {
        let (pw, ph) = (260.0, 260.0);
        let (left, gap, top, bottom, bar) = (70.0, 40.0, 50.0, 60.0, 90.0);
        let n = self.panels.len().max(1) as f64;
        let w = left + n * pw + (n - 1.0) * gap + bar;
        let h = top + ph + bottom;
        let limit = self.limit();
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            w / 2.0,
            esc(&self.title)
        );
        for (k, p) in self.panels.iter().enumerate() {
            let x0 = left + k as f64 * (pw + gap);
            let (nx, ny) = (p.xs.len().max(1) as f64, p.ys.len().max(1) as f64);
            let (cw, ch) = (pw / nx, ph / ny);
            for (iy, row) in p.values.iter().enumerate() {
                for (ix, &v) in row.iter().enumerate() {
                    let x = x0 + ix as f64 * cw;
                    let y = top + ph - (iy as f64 + 1.0) * ch;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}</title></rect>"#,
                        cw + 0.3,
                        ch + 0.3,
                        diverging_color(v, limit),
                        fmt_float(v)
                    );
                }
            }
            frame(&mut s, x0, top, x0 + pw, top + ph);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x0 + pw / 2.0,
                top - 8.0,
                esc(&p.title)
            );
            let every = (p.xs.len() / 6).max(1);
            for (ix, &xv) in p.xs.iter().enumerate().step_by(every) {
                let _ = writeln!(
                    s,
                    r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                    x0 + (ix as f64 + 0.5) * cw,
                    top + ph + 16.0,
                    tick_label(xv)
                );
            }
            if k == 0 {
                let every = (p.ys.len() / 6).max(1);
                for (iy, &yv) in p.ys.iter().enumerate().step_by(every) {
                    let _ = writeln!(
                        s,
                        r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                        x0 - 6.0,
                        top + ph - (iy as f64 + 0.5) * ch + 4.0,
                        tick_label(yv)
                    );
                }
            }
            axis_labels(
                &mut s,
                &self.x_label,
                if k == 0 { &self.y_label } else { "" },
                x0,
                top,
                x0 + pw,
                top + ph,
            );
        }
        // Color bar.
        let bx = w - bar + 25.0;
        let steps = 40;
        for i in 0..steps {
            let t = 1.0 - 2.0 * (i as f64 + 0.5) / steps as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{bx}" y="{:.2}" width="16" height="{:.2}" fill="{}"/>"#,
                top + ph * i as f64 / steps as f64,
                ph / steps as f64 + 0.3,
                diverging_color(t * limit, limit)
            );
        }
        frame(&mut s, bx, top, bx + 16.0, top + ph);
        for (t, y) in [(limit, top), (0.0, top + ph / 2.0), (-limit, top + ph)] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.2}">{}</text>"#,
                bx + 20.0,
                y + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            bx + 8.0,
            top - 8.0,
            esc(&self.value_label)
        );
        s.push_str("</svg>\n");
        s
    }

    /// `panel,x,y,value` rows of every drawn cell.
    pub fn to_csv(&self) -> io::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["panel", "x", "y", "value"])?;
        for p in &self.panels {
            for (iy, row) in p.values.iter().enumerate() {
                for (ix, &v) in row.iter().enumerate() {
                    w.write_record([p.title.as_str(), &fmt_float(p.xs[ix]), &fmt_float(p.ys[iy]), &fmt_float(v)])?;
                }
            }
        }
        w.into_inner().map_err(|e| e.into_error())
    }

    pub fn write(&self, dir: &Path, stem: &str) -> io::Result<()> {
        std::fs::write(dir.join(format!("{stem}.svg")), self.to_svg())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round() {
        assert_eq!(nice_ticks(0.0, 1.0, 5), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        let t = nice_ticks(-0.37, 0.81, 6);
        assert!(t.first().unwrap() >= &-0.37 && t.last().unwrap() <= &0.81);
    }

    #[test]
    fn zero_is_light_green() {
        assert_eq!(diverging_color(0.0, 1.0), "#c7e9c0");
        assert_eq!(diverging_color(-1.0, 1.0), "#2166ac");
        assert_eq!(diverging_color(2.0, 1.0), "#b2182b");
    }

    #[test]
    fn csv_holds_plotted_points() {
        let p = LinePlot {
            series: vec![Series {
                name: "a".into(),
                points: vec![(1.0, 2.0), (3.0, -4.0)],
            }],
            ..Default::default()
        };
        let text = String::from_utf8(p.to_csv().unwrap()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(p.to_svg().contains("<polyline"));
    }
}
