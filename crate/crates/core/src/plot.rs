//! Static PNG rendering of RD curves: axes, ticks, one colored polyline per
//! curve and a legend, drawn with a 3x5 bitmap font.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::metrics::RdCurve;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

const W: u32 = 640;
const H: u32 = 480;
const MARGIN_L: i64 = 70;
const MARGIN_R: i64 = 20;
const MARGIN_T: i64 = 20;
const MARGIN_B: i64 = 50;

/// Glyph rows, three bits each (MSB left).
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        '%' => [5, 1, 2, 4, 5],
        '(' => [1, 2, 2, 2, 1],
        ')' => [4, 2, 2, 2, 4],
        '/' => [1, 1, 2, 4, 4],
        ':' => [0, 2, 0, 2, 0],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        _ => [0; 5],
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < W && (y as u32) < H {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn square(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for yy in y - r..=y + r {
            for xx in x - r..=x + r {
                self.put(xx, yy, c);
            }
        }
    }

    /// Text at scale 2 with the top-left corner at `(x, y)`.
    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        for (i, ch) in s.chars().enumerate() {
            let g = glyph(ch);
            for (row, bits) in g.iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        let px = x + i as i64 * 8 + col * 2;
                        let py = y + row as i64 * 2;
                        self.square(px, py, 0, c);
                        self.put(px + 1, py, c);
                        self.put(px, py + 1, c);
                        self.put(px + 1, py + 1, c);
                    }
                }
            }
        }
    }
}

fn text_width(s: &str) -> i64 {
    s.chars().count() as i64 * 8
}

/// Roughly five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + step * 1e-9 {
        out.push(v);
        v += step;
    }
    out
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    format!("{v:.decimals$}")
}

/// Renders all curves on shared axes. Curves should share one quality kind.
pub fn render_curves(curves: &[RdCurve], title: &str) -> Result<RgbImage, PlotError> {
    let pts: Vec<(f64, f64)> = curves.iter().flat_map(|c| c.points().iter().map(|p| (p.bpp, p.quality))).collect();
    if pts.is_empty() {
        return Err(PlotError::Empty);
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let pad = |lo: f64, hi: f64| {
        let d = ((hi - lo) * 0.05).max(1e-6);
        (lo - d, hi + d)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    let mut cv = Canvas {
        img: RgbImage::from_pixel(W, H, Rgb([255, 255, 255])),
    };
    let (pl, pr, pt, pb) = (MARGIN_L, W as i64 - MARGIN_R, MARGIN_T, H as i64 - MARGIN_B);
    let sx = |x: f64| pl + ((x - x0) / (x1 - x0) * (pr - pl) as f64).round() as i64;
    let sy = |y: f64| pb - ((y - y0) / (y1 - y0) * (pb - pt) as f64).round() as i64;
    let grid = [225, 225, 225];
    let ink = [40, 40, 40];
    let xt = ticks(x0, x1);
    let xstep = if xt.len() > 1 { xt[1] - xt[0] } else { 1.0 };
    for &t in &xt {
        let x = sx(t);
        cv.line((x, pt), (x, pb), grid);
        let s = fmt_tick(t, xstep);
        cv.text(x - text_width(&s) / 2, pb + 8, &s, ink);
    }
    let yt = ticks(y0, y1);
    let ystep = if yt.len() > 1 { yt[1] - yt[0] } else { 1.0 };
    for &t in &yt {
        let y = sy(t);
        cv.line((pl, y), (pr, y), grid);
        let s = fmt_tick(t, ystep);
        cv.text(pl - 6 - text_width(&s), y - 5, &s, ink);
    }
    cv.line((pl, pb), (pr, pb), ink);
    cv.line((pl, pt), (pl, pb), ink);
    cv.text((pl + pr) / 2 - text_width("BPP") / 2, pb + 28, "BPP", ink);
    if let Some(kind) = curves.first().map(|c| c.kind.to_string()) {
        cv.text(4, pt - 14, &kind, ink);
    }
    cv.text((pl + pr) / 2 - text_width(title) / 2, 4, title, ink);
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let screen: Vec<(i64, i64)> = c.points().iter().map(|p| (sx(p.bpp), sy(p.quality))).collect();
        for w in screen.windows(2) {
            cv.line(w[0], w[1], color);
        }
        for &(x, y) in &screen {
            cv.square(x, y, 3, color);
        }
        let ly = pb - 20 - 16 * i as i64;
        cv.square(pr - 150, ly + 4, 4, color);
        cv.text(pr - 140, ly, &c.label, ink);
    }
    Ok(cv.img)
}

pub fn write_plot(path: &Path, curves: &[RdCurve], title: &str) -> Result<(), PlotError> {
    render_curves(curves, title)?.save(path)?;
    Ok(())
}
