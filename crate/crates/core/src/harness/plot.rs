//! Minimal raster plotting on top of `image`: axes with numeric tick labels,
//! points, polylines and bars. Labels use a built-in 3×5 digit font.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub(crate) const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const BLACK: [u8; 3] = [0, 0, 0];
const GRID: [u8; 3] = [225, 225, 225];

/// Rows of a 3×5 glyph, most significant bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
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
        _ => return None,
    })
}

pub(crate) struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(width, height, Rgb([255, 255, 255])),
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        // Bresenham.
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, color);
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

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    pub fn dot(&mut self, x: i64, y: i64, color: [u8; 3]) {
        self.fill_rect(x - 1, y - 1, x + 1, y + 1, color);
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: [u8; 3]) {
        for (k, c) in s.chars().enumerate() {
            if let Some(rows) = glyph(c) {
                for (r, bits) in rows.iter().enumerate() {
                    for b in 0..3 {
                        if bits & (4 >> b) != 0 {
                            self.put(x + 4 * k as i64 + b, y + r as i64, color);
                        }
                    }
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        })
    }
}

/// A rectangular plotting area mapping data coordinates to pixels.
pub(crate) struct Axes {
    pub left: i64,
    pub top: i64,
    pub width: i64,
    pub height: i64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Axes {
    pub fn px(&self, x: f64) -> i64 {
        let (a, b) = self.x_range;
        let t = if b > a { (x - a) / (b - a) } else { 0.5 };
        self.left + (t * self.width as f64).round() as i64
    }

    pub fn py(&self, y: f64) -> i64 {
        let (a, b) = self.y_range;
        let t = if b > a { (y - a) / (b - a) } else { 0.5 };
        self.top + self.height - (t * self.height as f64).round() as i64
    }

    /// Frame, horizontal grid lines and y tick labels.
    pub fn draw_frame(&self, c: &mut Canvas, y_ticks: usize) {
        let (bottom, right) = (self.top + self.height, self.left + self.width);
        for k in 0..=y_ticks {
            let v = self.y_range.0 + (self.y_range.1 - self.y_range.0) * k as f64 / y_ticks.max(1) as f64;
            let y = self.py(v);
            if k > 0 && k < y_ticks {
                c.line((self.left + 1, y), (right - 1, y), GRID);
            }
            c.line((self.left - 3, y), (self.left, y), BLACK);
            let label = format!("{v:.3}");
            c.text(self.left - 6 - 4 * label.len() as i64, y - 2, &label, BLACK);
        }
        c.line((self.left, self.top), (self.left, bottom), BLACK);
        c.line((self.left, bottom), (right, bottom), BLACK);
        c.line((self.left, self.top), (right, self.top), BLACK);
        c.line((right, self.top), (right, bottom), BLACK);
    }

    pub fn x_tick(&self, c: &mut Canvas, x: f64, label: &str) {
        let (px, bottom) = (self.px(x), self.top + self.height);
        c.line((px, bottom), (px, bottom + 3), BLACK);
        c.text(px - 2 * label.len() as i64, bottom + 6, label, BLACK);
    }
}

/// Data range padded by 5% on each side (or ±0.5 for a single value).
pub(crate) fn padded_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_map_range_endpoints_to_frame() {
        let ax = Axes {
            left: 10,
            top: 5,
            width: 100,
            height: 50,
            x_range: (0.0, 1.0),
            y_range: (2.0, 4.0),
        };
        assert_eq!((ax.px(0.0), ax.px(1.0)), (10, 110));
        assert_eq!((ax.py(2.0), ax.py(4.0)), (55, 5));
    }

    #[test]
    fn padded_range_handles_constant_and_empty() {
        assert_eq!(padded_range([1.0, 1.0]), (0.5, 1.5));
        assert_eq!(padded_range(std::iter::empty()), (0.0, 1.0));
        let (a, b) = padded_range([0.0, 10.0]);
        assert!((a + 0.5).abs() < 1e-12 && (b - 10.5).abs() < 1e-12);
    }

    #[test]
    fn text_and_lines_stay_inside_canvas() {
        let mut c = Canvas::new(20, 10);
        c.line((-5, -5), (30, 30), BLACK);
        c.text(15, 8, "0.123", BLACK);
        c.fill_rect(18, 8, 25, 12, PALETTE[0]);
        assert_eq!(c.img.get_pixel(0, 0), &Rgb(BLACK));
    }
}
