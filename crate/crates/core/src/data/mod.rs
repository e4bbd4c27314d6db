//! Samples, class catalogs, the on-disk sequence layout, a synthetic shapes
//! generator and batch collation.

mod collate;
mod layout;
mod synth;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{BBox, ImageSize};
use crate::mask::BinaryMask;

pub use collate::{collate, Batch, Normalization, SampleMeta, Target};
pub use layout::{check_layout, load_layout, write_layout, DatasetManifest, LayoutReport, SampleRef, SplitSpec};
pub use synth::{synth_shapes, ShapeKind};

/// Class names; ids are 1-based positions, 0 is reserved for no-object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>) -> Result<Self> {
        ensure!(!names.is_empty(), "class catalog is empty");
        for (i, n) in names.iter().enumerate() {
            ensure!(!n.trim().is_empty(), "class {} has an empty name", i + 1);
            ensure!(!names[..i].contains(n), "duplicate class name {n:?}");
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.names.iter().position(|n| n == name).map(|i| i as u32 + 1)
    }

    pub fn name_of(&self, id: u32) -> Option<&str> {
        let i = (id as usize).checked_sub(1)?;
        self.names.get(i).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    /// Catalog id, 1-based.
    pub class_id: u32,
    pub mask: BinaryMask,
}

/// An image with its instance masks and derived tight boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub name: String,
    pub image: RgbImage,
    pub instances: Vec<InstanceTarget>,
    /// `XyxyAbs`, one per instance.
    pub boxes: Vec<BBox>,
}

impl SampleRecord {
    pub fn new(name: impl Into<String>, image: RgbImage, instances: Vec<InstanceTarget>) -> Result<Self> {
        let (w, h) = image.dimensions();
        let mut boxes = Vec::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            ensure!(inst.class_id > 0, "instance {i} has class id 0");
            ensure!(
                inst.mask.width() == w as usize && inst.mask.height() == h as usize,
                "instance {i} mask is {}x{}, image is {w}x{h}",
                inst.mask.width(),
                inst.mask.height()
            );
            boxes.push(boxes_from_mask(&inst.mask)?);
        }
        Ok(Self {
            name: name.into(),
            image,
            instances,
            boxes,
        })
    }

    /// Image without annotations, for inference.
    pub fn unlabeled(name: impl Into<String>, image: RgbImage) -> Self {
        Self {
            name: name.into(),
            image,
            instances: vec![],
            boxes: vec![],
        }
    }

    pub fn size(&self) -> ImageSize {
        let (w, h) = self.image.dimensions();
        ImageSize::new(w, h)
    }

    /// Mirror image and masks left to right.
    pub fn hflip(&self) -> Result<Self> {
        let image = image::imageops::flip_horizontal(&self.image);
        let instances = self
            .instances
            .iter()
            .map(|i| InstanceTarget {
                class_id: i.class_id,
                mask: flip_mask(&i.mask),
            })
            .collect();
        Self::new(self.name.clone(), image, instances)
    }

    /// Image as `3 x H x W` values in [0, 1], channel-major.
    pub fn to_chw(&self) -> Vec<f32> {
        let (w, h) = self.image.dimensions();
        let n = (w * h) as usize;
        let mut out = vec![0f32; 3 * n];
        for (i, p) in self.image.pixels().enumerate() {
            for c in 0..3 {
                out[c * n + i] = p.0[c] as f32 / 255.0;
            }
        }
        out
    }
}

fn flip_mask(m: &BinaryMask) -> BinaryMask {
    let w = m.width();
    BinaryMask::from_fn(w, m.height(), |x, y| m.get(w - 1 - x, y))
}

/// Tight `XyxyAbs` rectangle of the set pixels, exclusive on the max edges.
pub fn boxes_from_mask(mask: &BinaryMask) -> Result<BBox> {
    mask.bounding_box()
}

/// 8-connected components of a mask, ordered by first pixel in raster order.
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (w, h) = (mask.width(), mask.height());
    let mut label = vec![usize::MAX; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = BinaryMask::new(w, h);
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            comp.set(x, y, true);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data()[j] && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Samples held in memory with their catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub(crate) fn image_error(path: &std::path::Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn catalog_ids_start_at_one() {
        let c = ClassCatalog::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(c.id_of("b"), Some(2));
        assert_eq!(c.name_of(1), Some("a"));
        assert_eq!(c.name_of(0), None);
        assert!(ClassCatalog::new(vec!["a".into(), "a".into()]).is_err());
        assert!(ClassCatalog::new(vec![]).is_err());
    }

    #[test]
    fn components_split_blobs() {
        let m = BinaryMask::from_fn(10, 10, |x, y| (x < 3 && y < 3) || (x > 5 && y > 5) || (x == 3 && y == 3));
        let cc = connected_components(&m);
        // the diagonal pixel joins the first blob
        assert_eq!(cc.len(), 2);
        assert_eq!(cc[0].area(), 10);
        assert_eq!(cc[1].area(), 16);
    }

    #[test]
    fn sample_rejects_empty_mask() {
        let img = RgbImage::new(4, 4);
        let inst = InstanceTarget {
            class_id: 1,
            mask: BinaryMask::new(4, 4),
        };
        assert!(SampleRecord::new("x", img, vec![inst]).is_err());
    }

    fn blob() -> impl Strategy<Value = BinaryMask> {
        (4usize..24, 4usize..24, proptest::collection::vec(any::<bool>(), 24 * 24)).prop_filter_map(
            "nonempty",
            |(w, h, bits)| {
                let m = BinaryMask::from_fn(w, h, |x, y| bits[y * 24 + x]);
                (!m.is_empty()).then_some(m)
            },
        )
    }

    proptest! {
        #[test]
        fn box_is_full_scan(m in blob()) {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..m.height() {
                for x in 0..m.width() {
                    if m.get(x, y) {
                        x0 = x0.min(x); y0 = y0.min(y); x1 = x1.max(x + 1); y1 = y1.max(y + 1);
                    }
                }
            }
            let b = boxes_from_mask(&m).unwrap().coords();
            prop_assert_eq!(b, [x0 as f64, y0 as f64, x1 as f64, y1 as f64]);
        }

        #[test]
        fn box_commutes_with_flip(m in blob()) {
            let w = m.width() as f64;
            let b = boxes_from_mask(&m).unwrap().coords();
            let f = boxes_from_mask(&flip_mask(&m)).unwrap().coords();
            prop_assert_eq!(f, [w - b[2], b[1], w - b[0], b[3]]);
        }

        #[test]
        fn box_commutes_with_integer_scale(m in blob(), k in 1usize..4) {
            let s = BinaryMask::from_fn(m.width() * k, m.height() * k, |x, y| m.get(x / k, y / k));
            let b = boxes_from_mask(&m).unwrap().coords();
            let kb = boxes_from_mask(&s).unwrap().coords();
            prop_assert_eq!(kb, b.map(|v| v * k as f64));
        }
    }
}
