//! Occupancy masks and zero-overlap slot search.

use rand::Rng;

use crate::dataset::{BBox, ImageRecord};
use crate::error::{Error, Result};

/// Per-pixel occupancy. A pixel is set when its unit square overlaps some box
/// with positive area, so any free integer rectangle has zero intersection
/// with every marked box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn is_set(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn set_rect(&mut self, x: u32, y: u32, w: u32, h: u32) {
        let x1 = (x + w).min(self.width);
        let y1 = (y + h).min(self.height);
        for row in y.min(self.height)..y1 {
            let base = row as usize * self.width as usize;
            self.bits[base + x as usize..base + x1 as usize].fill(true);
        }
    }

    pub fn mark(&mut self, bbox: &BBox) {
        let x0 = (bbox.x_min().floor() as u32).min(self.width);
        let y0 = (bbox.y_min().floor() as u32).min(self.height);
        let x1 = (bbox.x_max().ceil() as u32).min(self.width);
        let y1 = (bbox.y_max().ceil() as u32).min(self.height);
        if x1 > x0 && y1 > y0 {
            self.set_rect(x0, y0, x1 - x0, y1 - y0);
        }
    }

    /// Summed-area table with a zero border row and column.
    fn integral(&self) -> Vec<u32> {
        let (w, h) = (self.width as usize, self.height as usize);
        let mut sat = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0u32;
            for x in 0..w {
                row_sum += self.bits[y * w + x] as u32;
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row_sum;
            }
        }
        sat
    }
}

pub fn build_object_mask(image: &ImageRecord) -> BinaryMask {
    let mut mask = BinaryMask::empty(image.width(), image.height());
    for a in &image.annotations {
        mask.mark(&a.bbox);
    }
    mask
}

fn grid_positions(extent: u32, patch: u32, stride: u32) -> Vec<u32> {
    let last = extent - patch;
    let mut pos: Vec<u32> = (0..=last).step_by(stride as usize).collect();
    if pos.last() != Some(&last) {
        pos.push(last);
    }
    pos
}

/// Pick a free `patch_w × patch_h` slot uniformly among grid positions with the
/// given stride (the far edge is always a candidate). `None` when every
/// candidate touches an occupied pixel.
pub fn find_empty_region<R: Rng + ?Sized>(
    mask: &BinaryMask,
    patch_w: u32,
    patch_h: u32,
    stride: u32,
    rng: &mut R,
) -> Result<Option<BBox>> {
    if patch_w == 0 || patch_h == 0 || stride == 0 {
        return Err(Error::Balance("patch dimensions and stride must be positive".into()));
    }
    if patch_w > mask.width || patch_h > mask.height {
        return Err(Error::Balance(format!(
            "patch {patch_w}x{patch_h} larger than image {}x{}",
            mask.width, mask.height
        )));
    }
    let sat = mask.integral();
    let stride_row = mask.width as usize + 1;
    let occupied = |x: u32, y: u32| {
        let (x0, y0) = (x as usize, y as usize);
        let (x1, y1) = (x0 + patch_w as usize, y0 + patch_h as usize);
        sat[y1 * stride_row + x1] + sat[y0 * stride_row + x0] - sat[y0 * stride_row + x1] - sat[y1 * stride_row + x0]
    };
    let xs = grid_positions(mask.width, patch_w, stride);
    let ys = grid_positions(mask.height, patch_h, stride);
    let candidates: Vec<(u32, u32)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .filter(|&(x, y)| occupied(x, y) == 0)
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let (x, y) = candidates[rng.gen_range(0..candidates.len())];
    BBox::from_pixel_rect(x, y, patch_w, patch_h).map(Some)
}
