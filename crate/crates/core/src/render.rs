//! Overlay and plot rasterization, no font or plotting dependencies.

use image::{Rgb, RgbImage};

use crate::segmenter::Instance;

/// Class colors, indexed by `(class_id - 1) % len`.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

pub fn class_color(class_id: u32) -> [u8; 3] {
    PALETTE[(class_id.max(1) as usize - 1) % PALETTE.len()]
}

// 3x5 glyphs for 0-9 and '.', one row per 3-bit nibble
const GLYPHS: [[u8; 5]; 11] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
    [0, 0, 0, 0, 2],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Draws digits and dots at `(x, y)`, each glyph pixel a `scale` square.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let g = match ch {
            '0'..='9' => GLYPHS[ch as usize - '0' as usize],
            '.' => GLYPHS[10],
            _ => {
                cx += 4 * scale;
                continue;
            }
        };
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, cx + col * scale + dx, y + row as i64 * scale + dy, color);
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

pub fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

fn draw_rect(img: &mut RgbImage, b: [f64; 4], c: [u8; 3]) {
    let [x0, y0, x1, y1] = b.map(|v| v.round() as i64);
    let (x1, y1) = (x1 - 1, y1 - 1);
    draw_line(img, (x0, y0), (x1, y0), c);
    draw_line(img, (x1, y0), (x1, y1), c);
    draw_line(img, (x1, y1), (x0, y1), c);
    draw_line(img, (x0, y1), (x0, y0), c);
}

/// Masks blended at 50% in their class color, box outlines, and the
/// confidence printed above each box.
pub fn overlay(image: &RgbImage, instances: &[Instance]) -> RgbImage {
    let mut out = image.clone();
    for inst in instances {
        let c = class_color(inst.class_id);
        for y in 0..inst.mask.height().min(out.height() as usize) {
            for x in 0..inst.mask.width().min(out.width() as usize) {
                if inst.mask.get(x, y) {
                    let p = out.get_pixel_mut(x as u32, y as u32);
                    for k in 0..3 {
                        p.0[k] = ((p.0[k] as u16 + c[k] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    for inst in instances {
        let c = class_color(inst.class_id);
        let b = inst.bbox.coords();
        draw_rect(&mut out, b, c);
        let label = format!("{:.2}", inst.confidence);
        let ty = if b[1] >= 7.0 { b[1] as i64 - 6 } else { b[3] as i64 + 1 };
        draw_text(&mut out, b[0] as i64, ty, &label, 1, c);
    }
    out
}

/// Line plot of several `(x, y)` series on shared axes, white background.
pub fn line_plot(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let pts: Vec<(f64, f64)> = series.iter().flatten().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let margin = 24i64;
    let (w, h) = (width as i64 - 2 * margin, height as i64 - 2 * margin);
    let axis = [0, 0, 0];
    draw_line(&mut img, (margin, margin), (margin, margin + h), axis);
    draw_line(&mut img, (margin, margin + h), (margin + w, margin + h), axis);
    if pts.is_empty() || w <= 1 || h <= 1 {
        return img;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, 0f64, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let map = |(x, y): (f64, f64)| {
        (
            margin + ((x - x0) / (x1 - x0) * w as f64).round() as i64,
            margin + h - ((y - y0) / (y1 - y0) * h as f64).round() as i64,
        )
    };
    draw_text(&mut img, 2, margin - 8, &format!("{y1:.2}"), 1, axis);
    draw_text(&mut img, 2, margin + h - 2, &format!("{y0:.2}"), 1, axis);
    draw_text(&mut img, margin + w - 24, margin + h + 6, &format!("{x1:.0}"), 1, axis);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let s: Vec<_> = s.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        for pair in s.windows(2) {
            draw_line(&mut img, map(pair[0]), map(pair[1]), c);
        }
        if s.len() == 1 {
            let (x, y) = map(s[0]);
            put(&mut img, x, y, c);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, ImageSize};
    use crate::mask::BinaryMask;

    #[test]
    fn overlay_tints_mask_pixels_only() {
        let img = RgbImage::from_pixel(32, 32, Rgb([0, 0, 0]));
        let size = ImageSize::new(32, 32);
        let inst = Instance {
            query: 0,
            class_id: 1,
            confidence: 0.93,
            bbox: BBox::xyxy_abs(10.0, 10.0, 20.0, 20.0, size).unwrap(),
            mask: BinaryMask::from_fn(32, 32, |x, y| (12..18).contains(&x) && (12..18).contains(&y)),
        };
        let out = overlay(&img, &[inst]);
        let c = PALETTE[0];
        assert_eq!(out.get_pixel(14, 14).0, [c[0] / 2, c[1] / 2, c[2] / 2]);
        assert_eq!(out.get_pixel(30, 30).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(10, 15).0, c);
    }

    #[test]
    fn no_instances_leaves_image_unchanged() {
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([x as u8, y as u8, 3]));
        assert_eq!(overlay(&img, &[]), img);
    }

    #[test]
    fn plot_is_deterministic() {
        let s = vec![vec![(0.0, 3.0), (1.0, 2.0), (2.0, 0.5)]];
        assert_eq!(line_plot(&s, 200, 120), line_plot(&s, 200, 120));
        assert_ne!(line_plot(&s, 200, 120), line_plot(&[], 200, 120));
    }
}
