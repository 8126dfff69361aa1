//! Line charts with optional shaded bands, written as SVG and PNG.

use std::fmt::Write as _;
use std::path::Path;

use camalkit::{Error, Result};
use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14], [23, 190, 207]];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Lower and upper band edges at each x.
    pub band: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    width: f64,
    height: f64,
    left: f64,
    right: f64,
    top: f64,
    bottom: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * (self.width - self.left - self.right)
    }

    fn py(&self, y: f64) -> f64 {
        self.height - self.bottom - (y - self.y0) / (self.y1 - self.y0) * (self.height - self.top - self.bottom)
    }
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Chart {
    fn frame(&self, width: f64, height: f64) -> Result<Frame> {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys = Vec::new();
        for s in &self.series {
            if s.xs.len() != s.ys.len() || s.xs.is_empty() {
                return Err(Error::Shape(format!("series `{}` has {} x and {} y values", s.label, s.xs.len(), s.ys.len())));
            }
            xs.extend(&s.xs);
            ys.extend(&s.ys);
            if let Some((lo, hi)) = &s.band {
                if lo.len() != s.xs.len() || hi.len() != s.xs.len() {
                    return Err(Error::Shape(format!("band of series `{}` does not match its x values", s.label)));
                }
                ys.extend(lo);
                ys.extend(hi);
            }
        }
        if xs.is_empty() || xs.iter().chain(&ys).any(|v| !v.is_finite()) {
            return Err(Error::Domain("chart needs finite data".into()));
        }
        let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if x1 == x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 == y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        Ok(Frame { x0, x1, y0: y0 - pad, y1: y1 + pad, width, height, left: 64.0, right: 150.0, top: 36.0, bottom: 48.0 })
    }

    pub fn to_svg(&self) -> Result<String> {
        let f = self.frame(640.0, 400.0)?;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#,
            f.width, f.height
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, f.width / 2.0, escape(&self.title));
        for t in nice_ticks(f.x0, f.x1) {
            let x = f.px(t);
            let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##, f.top, f.height - f.bottom);
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.height - f.bottom + 16.0, fmt_tick(t));
        }
        for t in nice_ticks(f.y0, f.y1) {
            let y = f.py(t);
            let _ = writeln!(s, r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, f.left, f.width - f.right);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, f.left - 6.0, y + 4.0, fmt_tick(t));
        }
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            f.left,
            f.top,
            f.width - f.left - f.right,
            f.height - f.top - f.bottom
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            (f.left + f.width - f.right) / 2.0,
            f.height - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            (f.top + f.height - f.bottom) / 2.0,
            escape(&self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let [r, g, b] = PALETTE[i % PALETTE.len()];
            if let Some((lo, hi)) = &series.band {
                let mut pts: Vec<String> = series.xs.iter().zip(hi).map(|(&x, &y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
                pts.extend(series.xs.iter().zip(lo).rev().map(|(&x, &y)| format!("{:.1},{:.1}", f.px(x), f.py(y))));
                let _ = writeln!(s, r#"<polygon points="{}" fill="rgb({r},{g},{b})" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
            }
            let pts: Vec<String> = series.xs.iter().zip(&series.ys).map(|(&x, &y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="rgb({r},{g},{b})" stroke-width="2"/>"#, pts.join(" "));
            let ly = f.top + 16.0 + 18.0 * i as f64;
            let lx = f.width - f.right + 10.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="rgb({r},{g},{b})" stroke-width="2"/>"#,
                lx + 20.0
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    /// Raster version of the chart without text.
    pub fn to_png(&self) -> Result<RgbImage> {
        let f = self.frame(640.0, 400.0)?;
        let mut img = RgbImage::from_pixel(f.width as u32, f.height as u32, Rgb([255, 255, 255]));
        for t in nice_ticks(f.x0, f.x1) {
            let x = f.px(t);
            draw_line(&mut img, (x, f.top), (x, f.height - f.bottom), [221, 221, 221], 1.0);
        }
        for t in nice_ticks(f.y0, f.y1) {
            let y = f.py(t);
            draw_line(&mut img, (f.left, y), (f.width - f.right, y), [221, 221, 221], 1.0);
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            if let Some((lo, hi)) = &series.band {
                for w in 0..series.xs.len().saturating_sub(1) {
                    let (xa, xb) = (f.px(series.xs[w]), f.px(series.xs[w + 1]));
                    let mut px = xa.ceil();
                    while px <= xb {
                        let t = if xb > xa { (px - xa) / (xb - xa) } else { 0.0 };
                        let top = f.py(hi[w] + t * (hi[w + 1] - hi[w]));
                        let bot = f.py(lo[w] + t * (lo[w + 1] - lo[w]));
                        let mut py = top.ceil();
                        while py <= bot {
                            blend(&mut img, px as i64, py as i64, color, 0.2);
                            py += 1.0;
                        }
                        px += 1.0;
                    }
                }
            }
            for w in series.xs.windows(2).zip(series.ys.windows(2)) {
                let (x, y) = w;
                draw_line(&mut img, (f.px(x[0]), f.py(y[0])), (f.px(x[1]), f.py(y[1])), color, 2.0);
            }
            let ly = f.top + 16.0 + 18.0 * i as f64;
            let lx = f.width - f.right + 10.0;
            draw_line(&mut img, (lx, ly), (lx + 20.0, ly), color, 2.0);
        }
        let (l, r, t, b) = (f.left, f.width - f.right, f.top, f.height - f.bottom);
        for (a, c) in [((l, t), (r, t)), ((r, t), (r, b)), ((r, b), (l, b)), ((l, b), (l, t))] {
            draw_line(&mut img, a, c, [0, 0, 0], 1.0);
        }
        Ok(img)
    }

    /// Writes `<stem>.svg` and `<stem>.png` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.svg")), self.to_svg()?)?;
        self.to_png()?.save(dir.join(format!("{stem}.png")))?;
        Ok(())
    }
}

fn blend(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for (v, c) in p.0.iter_mut().zip(color) {
        *v = (*v as f64 * (1.0 - alpha) + c as f64 * alpha).round() as u8;
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3], width: f64) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    let half = (width / 2.0).floor() as i64;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = ((a.0 + t * (b.0 - a.0)).round() as i64, (a.1 + t * (b.1 - a.1)).round() as i64);
        for dx in -half..=half.max(0) {
            for dy in -half..=half.max(0) {
                blend(img, x + dx, y + dy, color, 1.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chart() -> Chart {
        Chart {
            title: "t <1>".into(),
            x_label: "k".into(),
            y_label: "confidence".into(),
            series: vec![Series {
                label: "a".into(),
                xs: vec![0.0, 50.0, 100.0],
                ys: vec![0.9, 0.5, 0.2],
                band: Some((vec![0.8, 0.4, 0.1], vec![1.0, 0.6, 0.3])),
            }],
        }
    }

    #[test]
    fn svg_contains_band_and_escaped_title() {
        let svg = chart().to_svg().unwrap();
        assert!(svg.contains("<polygon") && svg.contains("<polyline") && svg.contains("t &lt;1&gt;"));
    }

    #[test]
    fn png_has_expected_size_and_ink() {
        let img = chart().to_png().unwrap();
        assert_eq!(img.dimensions(), (640, 400));
        assert!(img.pixels().any(|p| p.0 == PALETTE[0]));
    }

    #[test]
    fn mismatched_series_are_rejected() {
        let mut c = chart();
        c.series[0].ys.pop();
        assert!(c.to_svg().is_err());
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 100.0);
        assert_eq!(t.first(), Some(&0.0));
        assert_eq!(t.last(), Some(&100.0));
    }
}
