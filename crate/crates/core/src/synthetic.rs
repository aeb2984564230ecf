//! Seeded synthetic fixtures: cell-like detection datasets and feature dumps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Annotation, BBox, DatasetDomain, DetectionDataset, Domain, ImageRecord, Raster};
use crate::features::{FeatureMap, GtObject, MultiLevelFeatures, NUM_LEVELS};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    /// Total objects per class.
    pub class_counts: Vec<usize>,
    pub num_images: usize,
    /// Images filled with `dense_objects` objects each (taken from the most frequent class first).
    pub dense_images: usize,
    pub dense_objects: usize,
    /// Most objects placed in any other image.
    pub max_sparse_objects: usize,
    pub width: u32,
    pub height: u32,
    /// Grid cell size; one object per cell.
    pub cell: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Skewed 4-class source set: counts {100, 10, 5, 2} over 200 images.
    pub fn skewed_source() -> Self {
        Self {
            class_counts: vec![100, 10, 5, 2],
            num_images: 200,
            dense_images: 8,
            dense_objects: 7,
            max_sparse_objects: 2,
            width: 96,
            height: 96,
            cell: 16,
            seed: 2024,
        }
    }
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class{i}")).collect()
}

fn class_color(class_id: usize, tint: [i16; 3]) -> [u8; 3] {
    const BASE: [[i16; 3]; 6] = [
        [180, 60, 60],
        [60, 170, 70],
        [70, 80, 190],
        [200, 180, 50],
        [160, 70, 170],
        [60, 170, 170],
    ];
    let c = BASE[class_id % BASE.len()];
    std::array::from_fn(|i| (c[i] + tint[i]).clamp(0, 255) as u8)
}

fn background(width: u32, height: u32, base: u8, rng: &mut impl Rng) -> Raster {
    let data = (0..width as usize * height as usize * 3)
        .map(|_| base.saturating_add(rng.gen_range(0..24)))
        .collect();
    Raster::new(width, height, data).expect("sized buffer")
}

/// Draw an object of `class_id` somewhere inside grid cell `(cx, cy)`.
fn draw_object(
    image: &mut ImageRecord,
    class_id: usize,
    cell_xy: (u32, u32),
    cell: u32,
    tint: [i16; 3],
    rng: &mut impl Rng,
) {
    let w = rng.gen_range(cell / 2..cell);
    let h = rng.gen_range(cell / 2..cell);
    let x = cell_xy.0 * cell + rng.gen_range(0..=cell - w);
    let y = cell_xy.1 * cell + rng.gen_range(0..=cell - h);
    let color = class_color(class_id, tint);
    for py in y..y + h {
        for px in x..x + w {
            let shade = rng.gen_range(0..20u8);
            image.pixels.set(px, py, color.map(|v| v.saturating_sub(shade)));
        }
    }
    image.annotations.push(Annotation::original(
        class_id,
        BBox::from_pixel_rect(x, y, w, h).expect("non-empty object"),
    ));
}

fn free_cells(spec_w: u32, spec_h: u32, cell: u32, rng: &mut impl Rng) -> Vec<(u32, u32)> {
    let mut cells: Vec<(u32, u32)> = (0..spec_h / cell)
        .flat_map(|cy| (0..spec_w / cell).map(move |cx| (cx, cy)))
        .collect();
    cells.shuffle(rng);
    cells
}

/// Source dataset with the requested per-class totals.
///
/// Panics when the objects cannot be fitted into the requested images.
pub fn synthetic_source(spec: &SyntheticSpec) -> DetectionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ds = DetectionDataset::new(class_names(spec.class_counts.len()), DatasetDomain::Source);
    let cells_per_image = ((spec.width / spec.cell) * (spec.height / spec.cell)) as usize;
    assert!(
        spec.dense_objects <= cells_per_image,
        "dense images cannot hold that many objects"
    );

    // Object pool, most frequent class first so dense images take the abundant class.
    let mut by_count: Vec<usize> = (0..spec.class_counts.len()).collect();
    by_count.sort_by_key(|&c| std::cmp::Reverse(spec.class_counts[c]));
    let pool: Vec<usize> = by_count
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, spec.class_counts[c]))
        .collect();
    let dense_total = (spec.dense_images * spec.dense_objects).min(pool.len());
    let (dense_pool, rest) = pool.split_at(dense_total);
    let mut rest = rest.to_vec();
    rest.shuffle(&mut rng);

    let sparse_images = spec.num_images - spec.dense_images;
    assert!(
        rest.len() <= sparse_images * spec.max_sparse_objects,
        "not enough sparse capacity for {} objects",
        rest.len()
    );
    let mut per_image: Vec<Vec<usize>> = vec![Vec::new(); spec.num_images];
    for (i, chunk) in dense_pool.chunks(spec.dense_objects).enumerate() {
        per_image[i] = chunk.to_vec();
    }
    let mut slots: Vec<usize> = (spec.dense_images..spec.num_images)
        .flat_map(|i| std::iter::repeat_n(i, spec.max_sparse_objects))
        .collect();
    slots.shuffle(&mut rng);
    for (class_id, slot) in rest.into_iter().zip(slots) {
        per_image[slot].push(class_id);
    }

    for (i, classes) in per_image.into_iter().enumerate() {
        let mut im = ImageRecord::new(
            format!("src_{i:04}"),
            background(spec.width, spec.height, 40, &mut rng),
            Domain::Source,
        );
        let cells = free_cells(spec.width, spec.height, spec.cell, &mut rng);
        for (class_id, cell_xy) in classes.into_iter().zip(cells) {
            draw_object(&mut im, class_id, cell_xy, spec.cell, [0, 0, 0], &mut rng);
        }
        ds.images.push(im);
    }
    ds
}

/// Target-domain set: darker, blue-tinted images with 1 to 3 cells each.
pub fn synthetic_target(num_classes: usize, num_images: usize, seed: u64) -> DetectionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = DetectionDataset::new(class_names(num_classes), DatasetDomain::Target);
    for i in 0..num_images {
        let mut im = ImageRecord::new(format!("tgt_{i:03}"), background(64, 64, 20, &mut rng), Domain::Target);
        let cells = free_cells(64, 64, 16, &mut rng);
        let n = rng.gen_range(1..=3);
        for &cell_xy in cells.iter().take(n) {
            let class_id = rng.gen_range(0..num_classes);
            draw_object(&mut im, class_id, cell_xy, 16, [-30, -20, 40], &mut rng);
        }
        ds.images.push(im);
    }
    ds
}

/// Random feature records with level sizes 8, 16 and 32 px strides over a
/// `size × size` image and `dims[l]` channels per level. Roughly a quarter of
/// the boxes are target-domain; the first box of the first record always is.
pub fn synthetic_features(
    num_records: usize,
    num_classes: usize,
    dims: [usize; NUM_LEVELS],
    seed: u64,
) -> Vec<MultiLevelFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = 128u32;
    (0..num_records)
        .map(|r| {
            let levels = [16usize, 8, 4]
                .iter()
                .zip(dims)
                .map(|(&hw, c)| {
                    let values = (0..c * hw * hw).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                    FeatureMap::new(c, hw, hw, values).expect("valid map")
                })
                .collect();
            let n_gt = rng.gen_range(1..=5);
            let gt = (0..n_gt)
                .map(|g| {
                    let w = rng.gen_range(4.0..48.0);
                    let h = rng.gen_range(4.0..48.0);
                    let x = rng.gen_range(0.0..image as f64 - w);
                    let y = rng.gen_range(0.0..image as f64 - h);
                    let domain = if (r == 0 && g == 0) || rng.gen_bool(0.25) {
                        Domain::Target
                    } else {
                        Domain::Source
                    };
                    GtObject {
                        class_id: rng.gen_range(0..num_classes),
                        bbox: BBox::new(x, y, x + w, y + h).expect("positive box"),
                        domain,
                    }
                })
                .collect();
            MultiLevelFeatures {
                image_id: format!("feat_{r:03}"),
                image_w: image,
                image_h: image,
                levels,
                gt,
            }
        })
        .collect()
}
