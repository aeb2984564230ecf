//! In-memory detection dataset model, manifest/label file I/O and few-shot samplers.
//!
//! On disk a dataset is a JSON manifest listing the class catalog and one
//! entry per image. Each image has an 8-bit RGB raster (PNG or PPM) and a
//! label file with one `class_id cx cy w h` line per object, normalized to
//! `[0, 1]`. In memory every box is kept in pixel XYXY coordinates.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decimal places written for normalized label coordinates.
///
/// A fixed precision makes `save -> load -> save` byte-identical on label files.
pub const LABEL_PRECISION: usize = 8;

/// Slack allowed when checking normalized label extents against `[0, 1]`.
///
/// Rounding the centre and the size to `LABEL_PRECISION` decimals can push an
/// edge past the border by up to 0.75 units in the last place.
const BOUNDS_EPS: f64 = 1e-8;

/// Axis-aligned box in pixel coordinates, `x_min < x_max`, `y_min < y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Validation(format!(
                "box coordinates must be finite and non-negative: {coords:?}"
            )));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Validation(format!("degenerate box: {coords:?}")));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box covering the integer pixel rectangle at `(x, y)` with size `w × h`.
    pub fn from_pixel_rect(x: u32, y: u32, w: u32, h: u32) -> Result<Self> {
        Self::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_max <= width as f64 && self.y_max <= height as f64
    }

    /// Smallest integer pixel rectangle `(x, y, w, h)` covering the box, clipped to the image.
    pub fn pixel_rect(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let x0 = (self.x_min.floor() as u32).min(width.saturating_sub(1));
        let y0 = (self.y_min.floor() as u32).min(height.saturating_sub(1));
        let x1 = (self.x_max.ceil() as u32).clamp(x0 + 1, width.max(x0 + 1));
        let y1 = (self.y_max.ceil() as u32).clamp(y0 + 1, height.max(y0 + 1));
        (x0, y0, x1 - x0, y1 - y0)
    }

    /// Normalized `(cx, cy, w, h)` relative to an image of the given size.
    pub fn to_cxcywh(&self, width: u32, height: u32) -> [f64; 4] {
        let (w, h) = (width as f64, height as f64);
        [
            (self.x_min + self.x_max) / 2.0 / w,
            (self.y_min + self.y_max) / 2.0 / h,
            self.width() / w,
            self.height() / h,
        ]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFlag {
    Original,
    Pasted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetDomain {
    Source,
    Target,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
    pub source: SourceFlag,
}

impl Annotation {
    pub fn original(class_id: usize, bbox: BBox) -> Self {
        Self {
            class_id,
            bbox,
            source: SourceFlag::Original,
        }
    }

    pub fn pasted(class_id: usize, bbox: BBox) -> Self {
        Self {
            class_id,
            bbox,
            source: SourceFlag::Pasted,
        }
    }
}

/// Row-major RGB8 raster.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "raster must be non-empty, got {width}x{height}"
            )));
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(Error::Validation(format!(
                "raster {width}x{height} needs {} bytes, got {}",
                width as usize * height as usize * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `w × h` region at `(x, y)`.
    pub fn crop(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Raster> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Validation(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} raster",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for row in y..y + h {
            let start = self.offset(x, row);
            data.extend_from_slice(&self.data[start..start + w as usize * 3]);
        }
        Raster::new(w, h, data)
    }

    /// Overwrite the region at `(x, y)` with `patch`.
    pub fn blit(&mut self, patch: &Raster, x: u32, y: u32) -> Result<()> {
        if x + patch.width > self.width || y + patch.height > self.height {
            return Err(Error::Validation(format!(
                "patch {}x{} at ({x},{y}) exceeds {}x{} raster",
                patch.width, patch.height, self.width, self.height
            )));
        }
        let row_bytes = patch.width as usize * 3;
        for row in 0..patch.height {
            let dst = self.offset(x, y + row);
            let src = patch.offset(0, row);
            self.data[dst..dst + row_bytes].copy_from_slice(&patch.data[src..src + row_bytes]);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub pixels: Raster,
    pub annotations: Vec<Annotation>,
    pub domain: Domain,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, pixels: Raster, domain: Domain) -> Self {
        Self {
            image_id: image_id.into(),
            pixels,
            annotations: Vec::new(),
            domain,
        }
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }
    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn count_class(&self, class_id: usize) -> usize {
        self.annotations.iter().filter(|a| a.class_id == class_id).count()
    }

    pub fn pasted_count(&self) -> usize {
        self.annotations
            .iter()
            .filter(|a| a.source == SourceFlag::Pasted)
            .count()
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, a) in self.annotations.iter().enumerate() {
            if a.class_id >= num_classes {
                return Err(Error::Validation(format!(
                    "image {} annotation {i}: class_id {} out of range for {num_classes} classes",
                    self.image_id, a.class_id
                )));
            }
            if !a.bbox.within(self.width(), self.height()) {
                return Err(Error::Validation(format!(
                    "image {} annotation {i}: box {:?} outside {}x{}",
                    self.image_id,
                    a.bbox,
                    self.width(),
                    self.height()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset {
    pub classes: Vec<String>,
    pub images: Vec<ImageRecord>,
    pub domain: DatasetDomain,
}

impl DetectionDataset {
    pub fn new(classes: Vec<String>, domain: DatasetDomain) -> Self {
        Self {
            classes,
            images: Vec::new(),
            domain,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.image_id == image_id)
    }

    /// Object count per class over all images.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for a in self.images.iter().flat_map(|im| &im.annotations) {
            if let Some(c) = counts.get_mut(a.class_id) {
                *c += 1;
            }
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Validation("class list is empty".into()));
        }
        let mut seen = HashSet::new();
        for im in &self.images {
            if !seen.insert(im.image_id.as_str()) {
                return Err(Error::Validation(format!("duplicate image_id {}", im.image_id)));
            }
            im.validate(self.num_classes())?;
        }
        Ok(())
    }

    fn subset(&self, keep: &[bool]) -> DetectionDataset {
        DetectionDataset {
            classes: self.classes.clone(),
            images: self
                .images
                .iter()
                .zip(keep)
                .filter(|(_, k)| **k)
                .map(|(im, _)| im.clone())
                .collect(),
            domain: self.domain,
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest and label files
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    classes: Vec<String>,
    #[serde(default = "default_dataset_domain")]
    domain: DatasetDomain,
    images: Vec<ManifestEntry>,
}

fn default_dataset_domain() -> DatasetDomain {
    DatasetDomain::Source
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    image_path: String,
    label_path: String,
    domain: Domain,
    /// Indices of label lines that were produced by pasting.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pasted: Vec<usize>,
}

/// Parse one label line. Blank lines yield `None`.
fn parse_label_line(
    line: &str,
    path: &Path,
    line_no: usize,
    width: u32,
    height: u32,
    num_classes: usize,
) -> Result<Option<Annotation>> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let trimmed = line.trim();
    if trimmed.is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = trimmed.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(parse_err(format!(
            "expected 5 fields `class cx cy w h`, got {}",
            fields.len()
        )));
    }
    let class_id: usize = fields[0]
        .parse()
        .map_err(|_| parse_err(format!("invalid class id '{}'", fields[0])))?;
    let mut vals = [0.0f64; 4];
    for (v, f) in vals.iter_mut().zip(&fields[1..]) {
        *v = f.parse().map_err(|_| parse_err(format!("invalid number '{f}'")))?;
        if !v.is_finite() {
            return Err(parse_err(format!("non-finite value '{f}'")));
        }
    }
    if class_id >= num_classes {
        return Err(Error::Validation(format!(
            "{} line {line_no}: class_id {class_id} out of range for {num_classes} classes",
            path.display()
        )));
    }
    let [cx, cy, w, h] = vals;
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::Validation(format!(
            "{} line {line_no}: degenerate box (w={w}, h={h})",
            path.display()
        )));
    }
    let outside = |c: f64, half: f64| c - half < -BOUNDS_EPS || c + half > 1.0 + BOUNDS_EPS;
    if outside(cx, w / 2.0) || outside(cy, h / 2.0) {
        return Err(Error::Validation(format!(
            "{} line {line_no}: box extends outside the image",
            path.display()
        )));
    }
    let (wf, hf) = (width as f64, height as f64);
    // Label rounding residue is snapped onto the border (anything larger was
    // rejected above) and onto whole pixels, so integer boxes reload exactly.
    let snap = |v: f64, scale: f64| {
        if (v - v.round()).abs() <= BOUNDS_EPS * scale {
            v.round()
        } else {
            v
        }
    };
    let x0 = snap(cx * wf - w * wf / 2.0, wf).max(0.0);
    let x1 = snap(cx * wf + w * wf / 2.0, wf).min(wf);
    let y0 = snap(cy * hf - h * hf / 2.0, hf).max(0.0);
    let y1 = snap(cy * hf + h * hf / 2.0, hf).min(hf);
    let bbox =
        BBox::new(x0, y0, x1, y1).map_err(|e| Error::Validation(format!("{} line {line_no}: {e}", path.display())))?;
    Ok(Some(Annotation::original(class_id, bbox)))
}

fn format_label_line(a: &Annotation, width: u32, height: u32) -> String {
    let [cx, cy, w, h] = a.bbox.to_cxcywh(width, height);
    let p = LABEL_PRECISION;
    format!("{} {cx:.p$} {cy:.p$} {w:.p$} {h:.p$}", a.class_id)
}

/// Label file contents for one image, one newline-terminated line per annotation.
pub fn label_text(image: &ImageRecord) -> String {
    let mut out = String::new();
    for a in &image.annotations {
        let _ = writeln!(out, "{}", format_label_line(a, image.width(), image.height()));
    }
    out
}

fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Raster::new(w, h, rgb.into_raw())
}

fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    image::save_buffer_with_format(
        path,
        raster.data(),
        raster.width(),
        raster.height(),
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn load_entry(base: &Path, entry: &ManifestEntry, num_classes: usize) -> Result<ImageRecord> {
    let image_path = base.join(&entry.image_path);
    let label_path = base.join(&entry.label_path);
    let pixels = read_raster(&image_path)?;
    let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
    let mut annotations = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(a) = parse_label_line(line, &label_path, i + 1, pixels.width(), pixels.height(), num_classes)? {
            annotations.push(a);
        }
    }
    let count = annotations.len();
    for &idx in &entry.pasted {
        let a = annotations.get_mut(idx).ok_or_else(|| {
            Error::Validation(format!(
                "image {}: pasted index {idx} exceeds {count} annotation(s)",
                entry.id
            ))
        })?;
        a.source = SourceFlag::Pasted;
    }
    Ok(ImageRecord {
        image_id: entry.id.clone(),
        pixels,
        annotations,
        domain: entry.domain,
    })
}

/// Load a dataset from its JSON manifest. Relative paths resolve against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<DetectionDataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let num_classes = manifest.classes.len();
    let images = manifest
        .images
        .par_iter()
        .map(|entry| load_entry(&base, entry, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let dataset = DetectionDataset {
        classes: manifest.classes,
        images,
        domain: manifest.domain,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn check_file_stem(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::Validation(format!(
            "image_id '{id}' cannot be used as a file name"
        )));
    }
    Ok(())
}

/// Write `dataset` under `out_dir` as `manifest.json`, `images/<id>.png` and `labels/<id>.txt`.
pub fn save_dataset(dataset: &DetectionDataset, out_dir: &Path) -> Result<PathBuf> {
    dataset.validate()?;
    for im in &dataset.images {
        check_file_stem(&im.image_id)?;
    }
    let images_dir = out_dir.join("images");
    let labels_dir = out_dir.join("labels");
    for dir in [out_dir, images_dir.as_path(), labels_dir.as_path()] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    dataset.images.par_iter().try_for_each(|im| -> Result<()> {
        write_png(&images_dir.join(format!("{}.png", im.image_id)), &im.pixels)?;
        let label_path = labels_dir.join(format!("{}.txt", im.image_id));
        fs::write(&label_path, label_text(im)).map_err(|e| Error::io(&label_path, e))
    })?;

    let manifest = Manifest {
        classes: dataset.classes.clone(),
        domain: dataset.domain,
        images: dataset
            .images
            .iter()
            .map(|im| ManifestEntry {
                id: im.image_id.clone(),
                image_path: format!("images/{}.png", im.image_id),
                label_path: format!("labels/{}.txt", im.image_id),
                domain: im.domain,
                pasted: im
                    .annotations
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.source == SourceFlag::Pasted)
                    .map(|(i, _)| i)
                    .collect(),
            })
            .collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    json.push('\n');
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// Few-shot samplers
// ---------------------------------------------------------------------------

/// Indices of the `k` images drawn for each class, in class order.
pub fn kshot_selection(dataset: &DetectionDataset, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Validation("k must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dataset.num_classes())
        .map(|class| {
            let eligible: Vec<usize> = dataset
                .images
                .iter()
                .enumerate()
                .filter(|(_, im)| im.count_class(class) > 0)
                .map(|(i, _)| i)
                .collect();
            if eligible.len() < k {
                return Err(Error::InsufficientImages {
                    class,
                    name: dataset.classes[class].clone(),
                    available: eligible.len(),
                    requested: k,
                });
            }
            let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), k)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        })
        .collect()
}

/// k-shot subset: `k` images per class, uniform over the images containing that class.
/// An image drawn for several classes appears once; dataset order is preserved.
pub fn sample_kshot(dataset: &DetectionDataset, k: usize, seed: u64) -> Result<DetectionDataset> {
    let selection = kshot_selection(dataset, k, seed)?;
    let mut keep = vec![false; dataset.len()];
    for i in selection.into_iter().flatten() {
        keep[i] = true;
    }
    Ok(dataset.subset(&keep))
}

/// `count` distinct images drawn uniformly without replacement.
pub fn sample_random_images(dataset: &DetectionDataset, count: usize, seed: u64) -> Result<DetectionDataset> {
    if count == 0 {
        return Err(Error::Validation("count must be positive".into()));
    }
    if count > dataset.len() {
        return Err(Error::Validation(format!(
            "cannot sample {count} images from a dataset of {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; dataset.len()];
    for i in index::sample(&mut rng, dataset.len(), count) {
        keep[i] = true;
    }
    Ok(dataset.subset(&keep))
}
