//! Multi-level neck feature maps: dump file format, bilinear upsampling and
//! per-instance average pooling.
//!
//! A dump file starts with the magic bytes `FSDF1\n`. Each record is a single
//! JSON header line followed by the little-endian `f32` payload of every level
//! in declared order (`C * H * W` values, channel-major).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Domain};
use crate::error::{Error, Result};

pub const MAGIC: &[u8] = b"FSDF1\n";
pub const NUM_LEVELS: usize = 3;
pub const DEFAULT_GRID: usize = 64;

/// Dense `channels × height × width` map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::FeatureDump(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if values.len() != channels * height * width {
            return Err(Error::FeatureDump(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::FeatureDump(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::new(channels, height, width, vec![value; channels * height * width]).expect("valid constant map")
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class_id: usize,
    pub bbox: BBox,
    pub domain: Domain,
}

/// Three neck levels for one image plus its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelFeatures {
    pub image_id: String,
    pub image_w: u32,
    pub image_h: u32,
    pub levels: Vec<FeatureMap>,
    pub gt: Vec<GtObject>,
}

impl MultiLevelFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != NUM_LEVELS {
            return Err(Error::FeatureDump(format!(
                "record {}: expected {NUM_LEVELS} levels, got {}",
                self.image_id,
                self.levels.len()
            )));
        }
        if self.image_w == 0 || self.image_h == 0 {
            return Err(Error::FeatureDump(format!(
                "record {}: image size must be positive",
                self.image_id
            )));
        }
        for (i, g) in self.gt.iter().enumerate() {
            if !g.bbox.within(self.image_w, self.image_h) {
                return Err(Error::FeatureDump(format!(
                    "record {}: gt {i} box {:?} outside {}x{}",
                    self.image_id, g.bbox, self.image_w, self.image_h
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelShape {
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordHeader {
    image_id: String,
    image_w: u32,
    image_h: u32,
    levels: Vec<LevelShape>,
    gt: Vec<GtObject>,
}

pub fn encode_feature_dump(records: &[MultiLevelFeatures]) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    for rec in records {
        rec.validate()?;
        let header = RecordHeader {
            image_id: rec.image_id.clone(),
            image_w: rec.image_w,
            image_h: rec.image_h,
            levels: rec
                .levels
                .iter()
                .map(|l| LevelShape {
                    c: l.channels,
                    h: l.height,
                    w: l.width,
                })
                .collect(),
            gt: rec.gt.clone(),
        };
        serde_json::to_writer(&mut out, &header).map_err(|e| Error::FeatureDump(e.to_string()))?;
        out.push(b'\n');
        for level in &rec.levels {
            for v in &level.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_feature_dump(bytes: &[u8]) -> Result<Vec<MultiLevelFeatures>> {
    let mut rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::FeatureDump("bad magic bytes".into()))?;
    let mut records = Vec::new();
    while !rest.is_empty() {
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::FeatureDump(format!("record {}: unterminated header", records.len())))?;
        let header: RecordHeader = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::FeatureDump(format!("record {}: bad header: {e}", records.len())))?;
        rest = &rest[nl + 1..];
        let mut levels = Vec::with_capacity(header.levels.len());
        for shape in &header.levels {
            let n = shape
                .c
                .checked_mul(shape.h)
                .and_then(|v| v.checked_mul(shape.w))
                .ok_or_else(|| Error::FeatureDump("level shape overflows".into()))?;
            let byte_len = n * 4;
            if rest.len() < byte_len {
                return Err(Error::FeatureDump(format!(
                    "record {} ({}): truncated payload",
                    records.len(),
                    header.image_id
                )));
            }
            let values = rest[..byte_len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            rest = &rest[byte_len..];
            levels.push(FeatureMap::new(shape.c, shape.h, shape.w, values)?);
        }
        let rec = MultiLevelFeatures {
            image_id: header.image_id,
            image_w: header.image_w,
            image_h: header.image_h,
            levels,
            gt: header.gt,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_feature_dump(path: &Path, records: &[MultiLevelFeatures]) -> Result<()> {
    let bytes = encode_feature_dump(records)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_dump(path: &Path) -> Result<Vec<MultiLevelFeatures>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_dump(&bytes)
}

/// Source coordinate for output index `i` with corner-aligned sampling.
fn source_coord(i: usize, out: usize, input: usize) -> f64 {
    if out <= 1 || input <= 1 {
        0.0
    } else {
        i as f64 * (input - 1) as f64 / (out - 1) as f64
    }
}

/// Bilinear resize to `size × size` with corners aligned.
pub fn upsample_level(map: &FeatureMap, size: usize) -> FeatureMap {
    assert!(size >= 1, "grid size must be positive");
    let (h, w) = (map.height, map.width);
    let mut values = Vec::with_capacity(map.channels * size * size);
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let s = source_coord(i, out, input);
                let i0 = (s.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(size, h);
    let xs = taps(size, w);
    for c in 0..map.channels {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let v00 = map.at(c, y0, x0) as f64;
                let v01 = map.at(c, y0, x1) as f64;
                let v10 = map.at(c, y1, x0) as f64;
                let v11 = map.at(c, y1, x1) as f64;
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                values.push((top + (bottom - top) * fy) as f32);
            }
        }
    }
    FeatureMap {
        channels: map.channels,
        height: size,
        width: size,
        values,
    }
}

/// Pooled feature of one ground-truth object at one level.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceFeature {
    pub vector: Vec<f32>,
    pub class_id: usize,
    pub domain: Domain,
    pub level_index: usize,
    pub gt_index: usize,
}

/// Grid cells `[start, end)` covered by `[lo, hi)` in image units, rounded
/// outward and at least one cell wide.
pub fn grid_span(lo: f64, hi: f64, image_extent: u32, size: usize) -> (usize, usize) {
    let scale = size as f64 / image_extent as f64;
    let start = ((lo * scale).floor().max(0.0) as usize).min(size - 1);
    let end = ((hi * scale).ceil() as usize).clamp(start + 1, size);
    (start, end)
}

/// Average-pool every ground-truth box on each level after upsampling to
/// `size × size`. Output is level-major: all boxes of level 0, then level 1, ...
pub fn pool_instances(mlf: &MultiLevelFeatures, size: usize) -> Result<Vec<InstanceFeature>> {
    mlf.validate()?;
    if size == 0 {
        return Err(Error::FeatureDump("grid size must be positive".into()));
    }
    let mut out = Vec::with_capacity(NUM_LEVELS * mlf.gt.len());
    for (level_index, level) in mlf.levels.iter().enumerate() {
        let up = upsample_level(level, size);
        for (gt_index, g) in mlf.gt.iter().enumerate() {
            let (x0, x1) = grid_span(g.bbox.x_min(), g.bbox.x_max(), mlf.image_w, size);
            let (y0, y1) = grid_span(g.bbox.y_min(), g.bbox.y_max(), mlf.image_h, size);
            let cells = ((x1 - x0) * (y1 - y0)) as f64;
            let vector = (0..up.channels)
                .map(|c| {
                    let mut acc = 0.0f64;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += up.at(c, y, x) as f64;
                        }
                    }
                    (acc / cells) as f32
                })
                .collect();
            out.push(InstanceFeature {
                vector,
                class_id: g.class_id,
                domain: g.domain,
                level_index,
                gt_index,
            });
        }
    }
    Ok(out)
}
