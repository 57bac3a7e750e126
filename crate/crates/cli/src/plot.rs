//! Raster renderings of boundary grids and MI curves.

use image::{Rgb, RgbImage};
use sync_core::evaluation::{BoundaryGrid, CurvePoint};

const RED: Rgb<u8> = Rgb([214, 69, 65]);
const BLUE: Rgb<u8> = Rgb([52, 101, 164]);
const LIGHT_RED: Rgb<u8> = Rgb([246, 196, 194]);
const LIGHT_BLUE: Rgb<u8> = Rgb([190, 210, 236]);
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([200, 200, 200]);
const GREEN: Rgb<u8> = Rgb([40, 150, 60]);

/// One colour block per grid cell, class 1 red and class 0 blue, y growing
/// upwards. Optional points `(x, y, label)` are drawn as solid dots.
pub fn render_grid(grid: &BoundaryGrid, points: &[(f64, f64, usize)], side: u32) -> RgbImage {
    let res = grid.resolution as u32;
    let cell = (side / res).max(1);
    let size = cell * res;
    let mut img = RgbImage::new(size, size);
    for (i, row) in grid.labels.iter().enumerate() {
        let py0 = size - (i as u32 + 1) * cell;
        for (j, &label) in row.iter().enumerate() {
            let colour = if label == 1 { LIGHT_RED } else { LIGHT_BLUE };
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(j as u32 * cell + dx, py0 + dy, colour);
                }
            }
        }
    }
    let b = &grid.bounds;
    for &(x, y, label) in points {
        let u = (x - b.x_min) / (b.x_max - b.x_min);
        let v = (y - b.y_min) / (b.y_max - b.y_min);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            continue;
        }
        let px = (u * (size - 1) as f64).round() as i64;
        let py = ((1.0 - v) * (size - 1) as f64).round() as i64;
        dot(&mut img, px, py, 1, if label == 1 { RED } else { BLUE });
    }
    img
}

fn dot(img: &mut RgbImage, cx: i64, cy: i64, r: i64, colour: Rgb<u8>) {
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, colour);
            }
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), colour: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        dot(img, x, y, 0, colour);
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

/// MI against epoch. The y axis spans `[min(0, lowest), highest]`; grey
/// gridlines mark tenths. Points that did not increase are green, others red.
pub fn render_curve(curve: &[CurvePoint], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let margin = 30i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    if curve.is_empty() || w <= 0 || h <= 0 {
        return img;
    }
    let lo = curve.iter().map(|p| p.mi).fold(0.0f64, f64::min);
    let hi = curve.iter().map(|p| p.mi).fold(f64::MIN, f64::max).max(lo + 1e-12);
    let n = curve.len().max(2) - 1;
    let to_px = |k: usize, mi: f64| {
        let x = margin + (k as f64 / n as f64 * w as f64).round() as i64;
        let y = margin + ((1.0 - (mi - lo) / (hi - lo)) * h as f64).round() as i64;
        (x, y)
    };
    for g in 1..10 {
        let y = margin + h * g / 10;
        line(&mut img, (margin, y), (margin + w, y), GREY);
    }
    line(&mut img, (margin, margin), (margin, margin + h), BLACK);
    line(&mut img, (margin, margin + h), (margin + w, margin + h), BLACK);
    for (k, pair) in curve.windows(2).enumerate() {
        line(&mut img, to_px(k, pair[0].mi), to_px(k + 1, pair[1].mi), BLACK);
    }
    for (k, p) in curve.iter().enumerate() {
        let (x, y) = to_px(k, p.mi);
        dot(&mut img, x, y, 2, if p.non_increasing { GREEN } else { RED });
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use sync_core::evaluation::{ground_truth_grid, Bounds, Oracle};

    #[test]
    fn grid_orientation() {
        // circle domain 1: class 1 above the x axis, so the top row is red
        let g = ground_truth_grid(&Oracle::circle(1, 30), Bounds::new(-1.0, 1.0, -1.0, 1.0).unwrap(), 10, 1).unwrap();
        let img = render_grid(&g, &[], 100);
        assert_eq!(img.dimensions(), (100, 100));
        assert_eq!(*img.get_pixel(50, 2), LIGHT_RED);
        assert_eq!(*img.get_pixel(50, 97), LIGHT_BLUE);
        let with_point = render_grid(&g, &[(0.0, -0.5, 1)], 100);
        assert_eq!(*with_point.get_pixel(50, 75), RED);
    }

    #[test]
    fn curve_draws_points() {
        let pts = [
            CurvePoint {
                epoch: 1,
                mi: 1.0,
                non_increasing: true,
            },
            CurvePoint {
                epoch: 2,
                mi: 0.5,
                non_increasing: true,
            },
        ];
        let img = render_curve(&pts, 200, 100);
        assert_eq!(*img.get_pixel(30, 30), GREEN);
        assert_eq!(*img.get_pixel(170, 50), GREEN);
    }
}
