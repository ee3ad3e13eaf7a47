//! Minimal raster drawing for report images: line panels and patch grids.

use image::{Rgb, RgbImage};

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(w: u32, h: u32, bg: [u8; 3]) -> Self {
        Self { img: RgbImage::from_pixel(w, h, Rgb(bg)) }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    pub fn rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.put(x, y, c);
            }
        }
    }

    /// Bresenham segment.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.put(x0, y0, c);
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

    /// Draws `(x, y)` points scaled into the box, with a frame and a
    /// dotted zero line when zero lies inside the value range.
    pub fn series(&mut self, bx: (i64, i64, i64, i64), pts: &[(f64, f64)], x_range: (f64, f64), c: [u8; 3]) {
        let (x0, y0, w, h) = bx;
        let frame = [120, 120, 120];
        self.line((x0, y0), (x0 + w, y0), frame);
        self.line((x0, y0 + h), (x0 + w, y0 + h), frame);
        self.line((x0, y0), (x0, y0 + h), frame);
        self.line((x0 + w, y0), (x0 + w, y0 + h), frame);
        let finite: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1.is_finite()).collect();
        if finite.is_empty() {
            return;
        }
        let lo = finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let xs = if x_range.1 > x_range.0 { x_range.1 - x_range.0 } else { 1.0 };
        let map = |(x, y): (f64, f64)| {
            let px = x0 + 2 + (((x - x_range.0) / xs) * (w - 4) as f64).round() as i64;
            let py = y0 + h - 2 - (((y - lo) / span) * (h - 4) as f64).round() as i64;
            (px, py)
        };
        if lo < 0.0 && hi > 0.0 {
            let (_, zy) = map((x_range.0, 0.0));
            for x in (x0..x0 + w).step_by(4) {
                self.put(x, zy, frame);
            }
        }
        let mapped: Vec<(i64, i64)> = finite.into_iter().map(map).collect();
        if mapped.len() == 1 {
            self.rect(mapped[0].0 - 1, mapped[0].1 - 1, 3, 3, c);
        }
        for w in mapped.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    /// Copies an RGB tile with its top-left corner at `(x, y)`.
    pub fn blit(&mut self, x: i64, y: i64, tile: &RgbImage) {
        for (tx, ty, px) in tile.enumerate_pixels() {
            self.put(x + tx as i64, y + ty as i64, px.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_hits_both_ends_and_clips() {
        let mut c = Canvas::new(10, 10, [0, 0, 0]);
        c.line((1, 1), (8, 5), [255, 0, 0]);
        assert_eq!(c.img.get_pixel(1, 1).0, [255, 0, 0]);
        assert_eq!(c.img.get_pixel(8, 5).0, [255, 0, 0]);
        c.line((-5, -5), (20, 20), [0, 255, 0]);
        assert_eq!(c.img.get_pixel(9, 9).0, [0, 255, 0]);
    }
}
