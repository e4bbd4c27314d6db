//! Deterministic synthetic shapes on a textured background.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassCatalog, Dataset, InstanceTarget, SampleRecord};
use crate::error::{ensure, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Rectangle, Self::Ellipse, Self::Triangle, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rectangle => "rectangle",
            Self::Ellipse => "ellipse",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }

    /// Whether pixel `(x, y)` lies in the shape inscribed in box `(x0, y0, w, h)`.
    fn contains(self, x: usize, y: usize, x0: usize, y0: usize, w: usize, h: usize) -> bool {
        if x < x0 || y < y0 || x >= x0 + w || y >= y0 + h {
            return false;
        }
        let (u, v) = ((x - x0) as f64 + 0.5, (y - y0) as f64 + 0.5);
        let (w, h) = (w as f64, h as f64);
        match self {
            Self::Rectangle => true,
            Self::Ellipse => {
                let (dx, dy) = ((u - w / 2.0) / (w / 2.0), (v - h / 2.0) / (h / 2.0));
                dx * dx + dy * dy <= 1.0
            }
            Self::Triangle => (u - w / 2.0).abs() <= v / h * w / 2.0,
            Self::Cross => {
                let t = 3.0;
                (u - w / 2.0).abs() * t <= w / 2.0 || (v - h / 2.0).abs() * t <= h / 2.0
            }
        }
    }
}

/// Base color per shape family; instances jitter around it.
const TINTS: [[u8; 3]; 4] = [[220, 60, 60], [60, 200, 80], [70, 90, 230], [230, 200, 50]];

/// `n_images` square images of side `size` with 1 to 3 separated instances
/// each; instance classes are drawn uniformly from the first `n_classes`
/// shape families.
pub fn synth_shapes(seed: u64, n_images: usize, size: u32, n_classes: usize) -> Result<Dataset> {
    ensure!((1..=4).contains(&n_classes), "synthetic shapes support 1 to 4 classes, got {n_classes}");
    ensure!(size >= 32, "synthetic image size must be at least 32, got {size}");
    let catalog = ClassCatalog::new(ShapeKind::ALL[..n_classes].iter().map(|k| k.name().to_string()).collect())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_images)
        .map(|i| synth_image(&mut rng, i, size as usize, n_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { catalog, samples })
}

fn synth_image(rng: &mut ChaCha8Rng, index: usize, size: usize, n_classes: usize) -> Result<SampleRecord> {
    let bg = [rng.random_range(20..70u8), rng.random_range(20..70u8), rng.random_range(20..70u8)];
    let mut img = RgbImage::from_fn(size as u32, size as u32, |_, _| {
        let n = rng.random_range(0..12u8);
        Rgb([bg[0] + n, bg[1] + n, bg[2] + n])
    });

    let wanted = rng.random_range(1..=3usize);
    let (lo, hi) = (size / 8, size * 3 / 8);
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut instances = Vec::new();
    for _ in 0..wanted {
        let class = rng.random_range(0..n_classes);
        let kind = ShapeKind::ALL[class];
        let mut spot = None;
        for _ in 0..100 {
            let w = rng.random_range(lo..=hi);
            let h = rng.random_range(lo..=hi);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            // keep a 2-pixel gap so instances never touch
            let clear = placed
                .iter()
                .all(|b| x0 + w + 2 <= b[0] || b[0] + b[2] + 2 <= x0 || y0 + h + 2 <= b[1] || b[1] + b[3] + 2 <= y0);
            if clear {
                spot = Some([x0, y0, w, h]);
                break;
            }
        }
        let Some([x0, y0, w, h]) = spot else { break };
        placed.push([x0, y0, w, h]);
        let mask = BinaryMask::from_fn(size, size, |x, y| kind.contains(x, y, x0, y0, w, h));
        let tint = TINTS[class];
        let color = tint.map(|c| c.saturating_add(rng.random_range(0..25)).saturating_sub(rng.random_range(0..25)));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                if mask.get(x, y) {
                    img.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
        instances.push(InstanceTarget {
            class_id: class as u32 + 1,
            mask,
        });
    }
    SampleRecord::new(format!("{index:05}"), img, instances)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let a = synth_shapes(7, 6, 64, 2).unwrap();
        let b = synth_shapes(7, 6, 64, 2).unwrap();
        assert_eq!(a, b);
        let c = synth_shapes(8, 6, 64, 2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn instances_are_valid_and_separate() {
        let d = synth_shapes(3, 40, 128, 4).unwrap();
        for s in &d.samples {
            assert!((1..=3).contains(&s.instances.len()));
            let mut union = BinaryMask::new(128, 128);
            for inst in &s.instances {
                assert!(!inst.mask.is_empty());
                assert_eq!(inst.mask.intersection_area(&union), 0);
                union.union_with(&inst.mask).unwrap();
            }
        }
    }

    #[test]
    fn class_histogram_is_uniform() {
        let d = synth_shapes(11, 1000, 64, 4).unwrap();
        let mut counts = [0usize; 4];
        for s in &d.samples {
            for i in &s.instances {
                counts[i.class_id as usize - 1] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let frac = c as f64 / total as f64;
            assert!((0.20..=0.30).contains(&frac), "{counts:?}");
        }
    }

    #[test]
    fn too_many_classes_rejected() {
        assert!(synth_shapes(0, 1, 64, 5).is_err());
    }
}
