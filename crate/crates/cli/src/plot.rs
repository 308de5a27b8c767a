//! Minimal raster charts: line plots and bar charts written as PNG, with a
//! built-in 3x5 pixel font for titles, tick values and legends.

use std::path::Path;

use image::{Rgb, RgbImage};
use metastyle::{Error, Result};

const WIDTH: u32 = 720;
const HEIGHT: u32 = 440;
const LEFT: i64 = 80;
const RIGHT: i64 = 170;
const TOP: i64 = 40;
const BOTTOM: i64 = 50;
const SCALE: i64 = 2;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const PALETTE: [Rgb<u8>; 8] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
    Rgb([227, 119, 194]),
    Rgb([127, 127, 127]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Rows of a 3x5 glyph, top to bottom, three bits each (MSB = left column).
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
        '.' => [0, 0, 0, 0, 2],
        ',' => [0, 0, 0, 2, 4],
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        '_' => [0, 0, 0, 0, 7],
        ':' => [0, 2, 0, 2, 0],
        '/' => [1, 1, 2, 4, 4],
        '=' => [0, 7, 0, 7, 0],
        '(' => [2, 4, 4, 4, 2],
        ')' => [2, 1, 1, 1, 2],
        _ => [0; 5],
    }
}

struct Canvas {
    img: RgbImage,
}

impl Canvas {
    fn new() -> Self {
        Self {
            img: RgbImage::from_pixel(WIDTH, HEIGHT, WHITE),
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, c);
            }
        }
    }

    /// Bresenham line, two pixels thick.
    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>, thick: bool) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
            if thick {
                self.put(x0 + 1, y0, c);
                self.put(x0, y0 + 1, c);
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: Rgb<u8>) {
        for (i, ch) in s.chars().enumerate() {
            let ox = x + i as i64 * 4 * SCALE;
            for (row, bits) in glyph(ch).iter().enumerate() {
                for col in 0..3 {
                    if bits >> (2 - col) & 1 == 1 {
                        let px = ox + col * SCALE;
                        let py = y + row as i64 * SCALE;
                        self.rect(px, py, px + SCALE - 1, py + SCALE - 1, c);
                    }
                }
            }
        }
    }

    fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * 4 * SCALE
    }

    fn save(self, path: &Path) -> Result<()> {
        self.img
            .save(path)
            .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else if a >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Widens a degenerate range so constant data still gets a visible axis.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    } else {
        let half = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - half, hi + half)
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (WIDTH as i64 - LEFT - RIGHT) as f64;
        let h = (HEIGHT as i64 - TOP - BOTTOM) as f64;
        let fx = (x - self.x.0) / (self.x.1 - self.x.0);
        let fy = (y - self.y.0) / (self.y.1 - self.y.0);
        (LEFT + (fx * w).round() as i64, HEIGHT as i64 - BOTTOM - (fy * h).round() as i64)
    }
}

fn draw_axes(cv: &mut Canvas, frame: &Frame, title: &str, x_ticks: bool) {
    let (x0, y0) = (LEFT, HEIGHT as i64 - BOTTOM);
    let (x1, y1) = (WIDTH as i64 - RIGHT, TOP);
    for k in 0..=4 {
        let v = frame.y.0 + (frame.y.1 - frame.y.0) * k as f64 / 4.0;
        let (_, py) = frame.px(frame.x.0, v);
        cv.line((x0, py), (x1, py), GRID, false);
        let label = tick_label(v);
        cv.text(x0 - 6 - Canvas::text_width(&label), py - 5, &label, BLACK);
    }
    if x_ticks {
        for k in 0..=4 {
            let v = frame.x.0 + (frame.x.1 - frame.x.0) * k as f64 / 4.0;
            let (px, _) = frame.px(v, frame.y.0);
            cv.line((px, y0), (px, y0 + 4), BLACK, false);
            let label = tick_label(v);
            cv.text(px - Canvas::text_width(&label) / 2, y0 + 10, &label, BLACK);
        }
    }
    cv.line((x0, y0), (x1, y0), BLACK, false);
    cv.line((x0, y0), (x0, y1), BLACK, false);
    cv.text(LEFT, 12, title, BLACK);
}

fn draw_legend(cv: &mut Canvas, labels: &[&str]) {
    let x = WIDTH as i64 - RIGHT + 14;
    for (i, label) in labels.iter().enumerate() {
        let y = TOP + i as i64 * 22;
        let c = PALETTE[i % PALETTE.len()];
        cv.rect(x, y, x + 10, y + 10, c);
        let shown: String = label.chars().take(17).collect();
        cv.text(x + 16, y, &shown, BLACK);
    }
}

fn finite_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

/// One polyline per series over a shared frame; non-finite points are skipped.
pub fn line_chart(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    let xs = finite_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = finite_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (Some((xl, xh)), Some((yl, yh))) = (xs, ys) else {
        return Err(Error::Data(format!("{title}: nothing to plot")));
    };
    let x = if xh > xl { (xl, xh) } else { padded(xl, xh) };
    let frame = Frame { x, y: padded(yl, yh) };
    let mut cv = Canvas::new();
    draw_axes(&mut cv, &frame, title, true);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(a, b)| frame.px(a, b))
            .collect();
        if pts.len() == 1 {
            let (px, py) = pts[0];
            cv.rect(px - 2, py - 2, px + 2, py + 2, c);
        }
        for w in pts.windows(2) {
            cv.line(w[0], w[1], c, true);
        }
    }
    draw_legend(&mut cv, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    cv.save(path)
}

/// Vertical bars, one per labeled value, on a zero-based axis.
pub fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    let Some((lo, hi)) = finite_range(bars.iter().map(|b| b.1)) else {
        return Err(Error::Data(format!("{title}: nothing to plot")));
    };
    let y = padded(lo.min(0.0), hi.max(0.0));
    let frame = Frame {
        x: (0.0, bars.len() as f64),
        y: (lo.min(0.0), y.1),
    };
    let mut cv = Canvas::new();
    draw_axes(&mut cv, &frame, title, false);
    for (i, (_, v)) in bars.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        let (xa, y0) = frame.px(i as f64 + 0.15, 0.0);
        let (xb, yv) = frame.px(i as f64 + 0.85, *v);
        cv.rect(xa, y0, xb, yv, PALETTE[i % PALETTE.len()]);
    }
    draw_legend(&mut cv, &bars.iter().map(|b| b.0.as_str()).collect::<Vec<_>>());
    cv.save(path)
}
