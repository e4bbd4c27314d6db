//! Folder layout: `root/seq_<k>/images/<frame>.png` with per-class masks at
//! `root/seq_<k>/masks/<class_name>/<frame>.png` (8-bit, nonzero = object).
//! An optional `root/classes.txt` fixes class ids, one name per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use super::{connected_components, image_error, ClassCatalog, Dataset, InstanceTarget, SampleRecord};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Named subset of sequences; `None` selects every sequence under the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    pub sequences: Option<Vec<u32>>,
}

impl SplitSpec {
    pub fn all(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            sequences: None,
        }
    }

    pub fn sequences(name: impl Into<String>, seqs: &[u32]) -> Self {
        Self {
            name: name.into(),
            sequences: Some(seqs.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRef {
    pub sequence: u32,
    pub frame: String,
    pub image: PathBuf,
    /// `(class id, mask path)`
    pub masks: Vec<(u32, PathBuf)>,
}

impl SampleRef {
    pub fn name(&self) -> String {
        format!("seq_{}/{}", self.sequence, self.frame)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: String,
    pub catalog: ClassCatalog,
    pub samples: Vec<SampleRef>,
}

impl DatasetManifest {
    pub fn sequences(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.samples.iter().map(|r| r.sequence).collect();
        s.dedup();
        s
    }

    /// Decodes one frame; each 8-connected component of a class mask is an
    /// instance.
    pub fn load_sample(&self, r: &SampleRef) -> Result<SampleRecord> {
        let image = image::open(&r.image).map_err(|e| image_error(&r.image, e))?.to_rgb8();
        let (w, h) = image.dimensions();
        let mut instances = Vec::new();
        for (class_id, path) in &r.masks {
            let m = read_mask(path)?;
            if (m.width() as u32, m.height() as u32) != (w, h) {
                return Err(Error::Data(format!(
                    "{} is {}x{}, image is {w}x{h}",
                    path.display(),
                    m.width(),
                    m.height()
                )));
            }
            for comp in connected_components(&m) {
                instances.push(InstanceTarget {
                    class_id: *class_id,
                    mask: comp,
                });
            }
        }
        SampleRecord::new(r.name(), image, instances)
    }

    pub fn load_all(&self) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .map(|r| self.load_sample(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            catalog: self.catalog.clone(),
            samples,
        })
    }
}

fn read_mask(path: &Path) -> Result<BinaryMask> {
    let g = image::open(path).map_err(|e| image_error(path, e))?.to_luma8();
    let (w, h) = g.dimensions();
    BinaryMask::from_vec(w as usize, h as usize, g.pixels().map(|p| p.0[0] != 0).collect())
}

fn read_dir_sorted(path: &Path) -> Result<Vec<PathBuf>> {
    let mut v = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<Vec<_>>>()?;
    v.sort();
    Ok(v)
}

fn sequence_dirs(root: &Path) -> Result<BTreeMap<u32, PathBuf>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut out = BTreeMap::new();
    for p in read_dir_sorted(root)? {
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(k) = name.strip_prefix("seq_").and_then(|k| k.parse::<u32>().ok()) {
            if p.is_dir() {
                out.insert(k, p);
            }
        }
    }
    Ok(out)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Ok(vec![]);
    }
    Ok(read_dir_sorted(dir)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect())
}

fn class_dirs(seq: &Path) -> Result<Vec<(String, PathBuf)>> {
    let masks = seq.join("masks");
    if !masks.is_dir() {
        return Ok(vec![]);
    }
    Ok(read_dir_sorted(&masks)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| Some((p.file_name()?.to_str()?.to_string(), p)))
        .collect())
}

fn catalog_for(root: &Path, seqs: &BTreeMap<u32, PathBuf>) -> Result<ClassCatalog> {
    let listed = root.join("classes.txt");
    if listed.is_file() {
        let text = fs::read_to_string(&listed).map_err(|e| Error::io(&listed, e))?;
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        return ClassCatalog::new(names).map_err(|e| Error::Data(format!("{}: {e}", listed.display())));
    }
    let mut names: Vec<String> = Vec::new();
    for dir in seqs.values() {
        for (n, _) in class_dirs(dir)? {
            if !names.contains(&n) {
                names.push(n);
            }
        }
    }
    names.sort();
    ClassCatalog::new(names).map_err(|_| Error::Data(format!("no mask classes found under {}", root.display())))
}

/// Lists the frames of the requested sequences. Frames lacking a mask in any
/// of their sequence's class folders are skipped with a warning.
pub fn load_layout(root: &Path, split: &SplitSpec) -> Result<DatasetManifest> {
    let seqs = sequence_dirs(root)?;
    if seqs.is_empty() {
        return Err(Error::Data(format!("no seq_<k> directories under {}", root.display())));
    }
    let catalog = catalog_for(root, &seqs)?;
    let wanted: Vec<u32> = match &split.sequences {
        Some(s) => {
            let mut s = s.clone();
            s.sort_unstable();
            s.dedup();
            s
        }
        None => seqs.keys().copied().collect(),
    };
    let mut samples = Vec::new();
    for k in wanted {
        let dir = seqs
            .get(&k)
            .ok_or_else(|| Error::Data(format!("split {} asks for seq_{k}, which is missing", split.name)))?;
        let classes = class_dirs(dir)?;
        let mut masks_for = Vec::new();
        for (name, path) in &classes {
            let id = catalog
                .id_of(name)
                .ok_or_else(|| Error::Data(format!("{}: class {name:?} is not in the catalog", path.display())))?;
            masks_for.push((id, path.clone()));
        }
        for frame in png_stems(&dir.join("images"))? {
            let mut masks = Vec::with_capacity(masks_for.len());
            let mut missing = classes.is_empty();
            for (id, cdir) in &masks_for {
                let p = cdir.join(format!("{frame}.png"));
                if p.is_file() {
                    masks.push((*id, p));
                } else {
                    missing = true;
                }
            }
            if missing {
                log::warn!("seq_{k}/{frame}: missing mask, frame skipped");
                continue;
            }
            samples.push(SampleRef {
                sequence: k,
                frame: frame.clone(),
                image: dir.join("images").join(format!("{frame}.png")),
                masks,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("split {} has no usable frames", split.name)));
    }
    Ok(DatasetManifest {
        split: split.name.clone(),
        catalog,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutReport {
    /// `(sequence, frame count)`
    pub sequences: Vec<(u32, usize)>,
    pub problems: Vec<String>,
}

impl LayoutReport {
    pub fn is_valid(&self) -> bool {
        self.problems.is_empty() && !self.sequences.is_empty()
    }
}

/// Walks every sequence and lists missing folders and mask files.
pub fn check_layout(root: &Path) -> Result<LayoutReport> {
    let seqs = sequence_dirs(root)?;
    let mut report = LayoutReport {
        sequences: vec![],
        problems: vec![],
    };
    if seqs.is_empty() {
        report.problems.push(format!("no seq_<k> directories under {}", root.display()));
        return Ok(report);
    }
    let catalog = match catalog_for(root, &seqs) {
        Ok(c) => Some(c),
        Err(e) => {
            report.problems.push(e.to_string());
            None
        }
    };
    for (k, dir) in &seqs {
        let frames = png_stems(&dir.join("images"))?;
        if frames.is_empty() {
            report.problems.push(format!("seq_{k}: no images"));
        }
        let classes = class_dirs(dir)?;
        if classes.is_empty() {
            report.problems.push(format!("seq_{k}: no mask folders"));
        }
        for (name, cdir) in &classes {
            if let Some(c) = &catalog {
                if c.id_of(name).is_none() {
                    report.problems.push(format!("seq_{k}: class {name:?} is not in the catalog"));
                }
            }
            for f in &frames {
                let p = cdir.join(format!("{f}.png"));
                if !p.is_file() {
                    report.problems.push(format!("missing mask {}", p.display()));
                }
            }
        }
        report.sequences.push((*k, frames.len()));
    }
    Ok(report)
}

/// Writes `dataset` as sequence `sequence` under `root`, one mask file per
/// class per frame (empty where the class is absent).
pub fn write_layout(dataset: &Dataset, root: &Path, sequence: u32) -> Result<()> {
    let seq = root.join(format!("seq_{sequence}"));
    let images = seq.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let classes = root.join("classes.txt");
    let mut text = dataset.catalog.names().join("\n");
    text.push('\n');
    fs::write(&classes, text).map_err(|e| Error::io(&classes, e))?;
    for name in dataset.catalog.names() {
        let d = seq.join("masks").join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in &dataset.samples {
        let p = images.join(format!("{}.png", s.name));
        s.image.save(&p).map_err(|e| image_error(&p, e))?;
        let (w, h) = s.image.dimensions();
        for (ci, name) in dataset.catalog.names().iter().enumerate() {
            let mut g = GrayImage::new(w, h);
            for inst in s.instances.iter().filter(|i| i.class_id as usize == ci + 1) {
                for y in 0..h {
                    for x in 0..w {
                        if inst.mask.get(x as usize, y as usize) {
                            g.put_pixel(x, y, image::Luma([255]));
                        }
                    }
                }
            }
            let p = seq.join("masks").join(name).join(format!("{}.png", s.name));
            g.save(&p).map_err(|e| image_error(&p, e))?;
        }
    }
    Ok(())
}
