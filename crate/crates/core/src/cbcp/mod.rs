//! Class-balancing cut-paste.
//!
//! Rare-class objects are copied from their source images, augmented and
//! pasted into free slots of sparse images (fewer than `r` objects) until
//! every class reaches `beta` times the largest class count. Each sparse image
//! additionally receives one cell cut from a random target-domain image.
//! Dense images pass through untouched, so the output has as many images as
//! the source.

mod augment;
mod mask;
mod plan;
mod stats;

use std::collections::HashMap;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use augment::{augment_patch, augment_patch_with, scale_and_blur, AugmentParams};
pub use mask::{build_object_mask, find_empty_region, BinaryMask};
pub use plan::{balance_target, compute_increment_plan, Assignment, ClassIncrement, IncrementPlan, PlanConfig};
pub use stats::{compute_stats, ClassStats, InstanceRef};

use crate::dataset::{Annotation, BBox, DatasetDomain, DetectionDataset, ImageRecord, Raster};
use crate::error::{Error, Result};

/// Balancer settings. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub r: usize,
    pub beta: f64,
    pub cap_per_image: usize,
    pub stride: u32,
    pub intensity_scale_range: [f64; 2],
    pub blur_sigma_range: [f64; 2],
    pub seed: u64,
    pub augment_target_cell: bool,
    pub max_tries: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        let aug = AugmentParams::default();
        Self {
            r: 6,
            beta: 0.9,
            cap_per_image: 4,
            stride: 8,
            intensity_scale_range: aug.intensity_scale_range,
            blur_sigma_range: aug.blur_sigma_range,
            seed: 0,
            augment_target_cell: true,
            max_tries: 32,
        }
    }
}

impl BalanceConfig {
    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            intensity_scale_range: self.intensity_scale_range,
            blur_sigma_range: self.blur_sigma_range,
            seed: self.seed,
        }
    }

    fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            beta: self.beta,
            cap_per_image: self.cap_per_image,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.cap_per_image == 0 || self.stride == 0 || self.max_tries == 0 {
            return Err(Error::Config(
                "r, cap_per_image, stride and max_tries must be positive".into(),
            ));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        self.augment_params().validate()
    }
}

/// Options for target-cell injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectOptions {
    pub stride: u32,
    pub max_tries: usize,
    pub augment: bool,
}

impl Default for InjectOptions {
    fn default() -> Self {
        Self {
            stride: 8,
            max_tries: 32,
            augment: true,
        }
    }
}

/// Independent generator for one image, derived from the global seed and the image id.
pub fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(image_id.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Cut the integer pixel rectangle covering `bbox` out of `image`.
pub fn cut_object(image: &ImageRecord, bbox: &BBox) -> Result<Raster> {
    let (x, y, w, h) = bbox.pixel_rect(image.width(), image.height());
    image.pixels.crop(x, y, w, h)
}

fn integral_rect(location: &BBox) -> Option<(u32, u32, u32, u32)> {
    let vals = [location.x_min(), location.y_min(), location.width(), location.height()];
    if vals.iter().any(|v| v.fract() != 0.0) {
        return None;
    }
    Some((vals[0] as u32, vals[1] as u32, vals[2] as u32, vals[3] as u32))
}

/// Replace the pixels under `location` with `patch` and append a pasted annotation.
pub fn paste_object(mut host: ImageRecord, patch: &Raster, location: BBox, class_id: usize) -> Result<ImageRecord> {
    let (x, y, w, h) = integral_rect(&location)
        .ok_or_else(|| Error::Balance(format!("paste location {location:?} is not pixel-aligned")))?;
    if (w, h) != (patch.width(), patch.height()) {
        return Err(Error::Balance(format!(
            "patch is {}x{} but location is {w}x{h}",
            patch.width(),
            patch.height()
        )));
    }
    if !location.within(host.width(), host.height()) {
        return Err(Error::Balance(format!(
            "location {location:?} outside {}x{} image",
            host.width(),
            host.height()
        )));
    }
    host.pixels.blit(patch, x, y)?;
    host.annotations.push(Annotation::pasted(class_id, location));
    Ok(host)
}

/// Paste into a free slot of `host`, keeping `mask` in sync. Returns `false` when no slot exists.
fn paste_into_free_slot<R: Rng + ?Sized>(
    host: &mut ImageRecord,
    mask: &mut BinaryMask,
    patch: &Raster,
    class_id: usize,
    stride: u32,
    rng: &mut R,
) -> Result<bool> {
    if patch.width() > host.width() || patch.height() > host.height() {
        return Ok(false);
    }
    let Some(location) = find_empty_region(mask, patch.width(), patch.height(), stride, rng)? else {
        return Ok(false);
    };
    let (x, y, _, _) = integral_rect(&location).expect("grid slots are pixel-aligned");
    host.pixels.blit(patch, x, y)?;
    host.annotations.push(Annotation::pasted(class_id, location));
    mask.mark(&location);
    Ok(true)
}

/// Annotated cells of the target set as `(image index, annotation index)` grouped by image.
fn target_cells(target: &DetectionDataset) -> Vec<(usize, usize)> {
    target
        .images
        .iter()
        .enumerate()
        .filter(|(_, im)| !im.annotations.is_empty())
        .map(|(i, im)| (i, im.annotations.len()))
        .collect()
}

fn inject_with<R: Rng + ?Sized>(
    host: &mut ImageRecord,
    mask: &mut BinaryMask,
    target: &DetectionDataset,
    annotated: &[(usize, usize)],
    params: &AugmentParams,
    opts: &InjectOptions,
    rng: &mut R,
) -> Result<()> {
    if annotated.is_empty() {
        return Err(Error::Balance("target set has no annotated image".into()));
    }
    for _ in 0..opts.max_tries {
        let (img_idx, n_ann) = annotated[rng.gen_range(0..annotated.len())];
        let donor = &target.images[img_idx];
        let ann = &donor.annotations[rng.gen_range(0..n_ann)];
        let mut patch = cut_object(donor, &ann.bbox)?;
        if opts.augment {
            patch = augment_patch_with(&patch, params, rng);
        }
        if paste_into_free_slot(host, mask, &patch, ann.class_id, opts.stride, rng)? {
            return Ok(());
        }
    }
    Err(Error::NoEmptyRegion {
        image_id: host.image_id.clone(),
        tries: opts.max_tries,
    })
}

/// Paste one randomly chosen target-domain cell into a free slot of `host`.
///
/// The cell is drawn uniformly over annotated target images, then uniformly
/// over that image's annotations. A new cell is drawn when no slot fits, up to
/// `opts.max_tries` times. The host is only returned modified on success.
pub fn inject_target_cell(
    host: &ImageRecord,
    target: &DetectionDataset,
    params: &AugmentParams,
    opts: &InjectOptions,
) -> Result<ImageRecord> {
    params.validate()?;
    let mut out = host.clone();
    let mut mask = build_object_mask(&out);
    let mut rng = image_rng(params.seed, &host.image_id);
    inject_with(
        &mut out,
        &mut mask,
        target,
        &target_cells(target),
        params,
        opts,
        &mut rng,
    )?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    ClassPaste,
    TargetCell,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementFailure {
    pub image_id: String,
    pub kind: FailureKind,
    pub class_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub before: usize,
    pub deficit: usize,
    pub planned: usize,
    pub placed: usize,
    pub after: usize,
}

/// Machine-readable summary of a balancing run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub config: BalanceConfig,
    pub max_count: usize,
    pub target_count: usize,
    pub sparse_images: usize,
    pub dense_images: usize,
    pub per_class: Vec<ClassReport>,
    pub target_cells_injected: usize,
    pub failures: Vec<PlacementFailure>,
    /// True when every class reached `target_count`.
    pub balanced: bool,
    /// Donor cells are pasted at their original pixel size.
    pub paste_scaling: String,
    pub target_cell_augmented: bool,
}

#[derive(Debug, Clone)]
pub struct BalanceOutcome {
    pub dataset: DetectionDataset,
    pub plan: IncrementPlan,
    pub report: BalanceReport,
}

struct PasteJob {
    class_id: usize,
    donor_image: usize,
    donor_annotation: usize,
}

struct ImageResult {
    record: ImageRecord,
    placed: Vec<usize>,
    failures: Vec<PlacementFailure>,
    injected: bool,
}

fn augment_sparse_image(
    host: &ImageRecord,
    jobs: &[PasteJob],
    source: &DetectionDataset,
    target: &DetectionDataset,
    annotated: &[(usize, usize)],
    cfg: &BalanceConfig,
) -> Result<ImageResult> {
    let params = cfg.augment_params();
    let mut rng = image_rng(cfg.seed, &host.image_id);
    let mut record = host.clone();
    let mut mask = build_object_mask(&record);
    let mut placed = vec![0usize; source.num_classes()];
    let mut failures = Vec::new();

    for job in jobs {
        let donor = &source.images[job.donor_image];
        let patch = cut_object(donor, &donor.annotations[job.donor_annotation].bbox)?;
        let patch = augment_patch_with(&patch, &params, &mut rng);
        if paste_into_free_slot(&mut record, &mut mask, &patch, job.class_id, cfg.stride, &mut rng)? {
            placed[job.class_id] += 1;
        } else {
            failures.push(PlacementFailure {
                image_id: host.image_id.clone(),
                kind: FailureKind::ClassPaste,
                class_id: Some(job.class_id),
            });
        }
    }

    let opts = InjectOptions {
        stride: cfg.stride,
        max_tries: cfg.max_tries,
        augment: cfg.augment_target_cell,
    };
    let mut injected = true;
    match inject_with(&mut record, &mut mask, target, annotated, &params, &opts, &mut rng) {
        Ok(()) => {}
        Err(Error::NoEmptyRegion { .. }) => {
            injected = false;
            failures.push(PlacementFailure {
                image_id: host.image_id.clone(),
                kind: FailureKind::TargetCell,
                class_id: None,
            });
        }
        Err(e) => return Err(e),
    }
    Ok(ImageResult {
        record,
        placed,
        failures,
        injected,
    })
}

/// Build the class-balanced dataset from `source` and the few-shot `target` set.
///
/// Output images are sorted by image id. Placement failures are reported, and
/// the run only fails when some class receives less than half of its planned
/// increments.
pub fn balance_dataset(
    source: &DetectionDataset,
    target: &DetectionDataset,
    cfg: &BalanceConfig,
) -> Result<BalanceOutcome> {
    cfg.validate()?;
    source.validate()?;
    target.validate()?;
    if source.classes != target.classes {
        return Err(Error::Balance("source and target class catalogs differ".into()));
    }
    let annotated = target_cells(target);
    if annotated.is_empty() {
        return Err(Error::Balance("target set has no annotated image".into()));
    }

    let stats = compute_stats(source, cfg.r)?;
    let plan = compute_increment_plan(&stats, &cfg.plan_config(), cfg.seed)?;

    let index_of: HashMap<&str, usize> = source
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.image_id.as_str(), i))
        .collect();
    let mut jobs: HashMap<&str, Vec<PasteJob>> = HashMap::new();
    for ci in &plan.classes {
        for a in &ci.assignments {
            let list = jobs.entry(a.receiving_image_id.as_str()).or_default();
            for _ in 0..a.copies {
                list.push(PasteJob {
                    class_id: ci.class_id,
                    donor_image: index_of[a.donor_image_id.as_str()],
                    donor_annotation: a.donor_annotation_index,
                });
            }
        }
    }

    let sparse: Vec<&ImageRecord> = stats
        .sparse_images
        .iter()
        .map(|id| &source.images[index_of[id.as_str()]])
        .collect();
    let results = sparse
        .par_iter()
        .map(|host| {
            let host_jobs = jobs.get(host.image_id.as_str()).map_or(&[][..], Vec::as_slice);
            augment_sparse_image(host, host_jobs, source, target, &annotated, cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut placed = vec![0usize; source.num_classes()];
    let mut failures = Vec::new();
    let mut injected = 0;
    let mut images = Vec::with_capacity(source.len());
    for r in results {
        for (total, p) in placed.iter_mut().zip(&r.placed) {
            *total += p;
        }
        injected += r.injected as usize;
        failures.extend(r.failures);
        images.push(r.record);
    }
    for id in &stats.dense_images {
        images.push(source.images[index_of[id.as_str()]].clone());
    }
    images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if !failures.is_empty() {
        warn!("{} placement(s) failed during balancing", failures.len());
    }

    let dataset = DetectionDataset {
        classes: source.classes.clone(),
        images,
        domain: DatasetDomain::Augmented,
    };
    let after = dataset.class_counts();
    let per_class: Vec<ClassReport> = (0..source.num_classes())
        .map(|c| {
            let planned = plan.class(c);
            ClassReport {
                class_id: c,
                name: source.classes[c].clone(),
                before: stats.per_class_count[c],
                deficit: planned.map_or(0, |p| p.deficit),
                planned: planned.map_or(0, |p| p.total_increments),
                placed: placed[c],
                after: after[c],
            }
        })
        .collect();

    for c in &per_class {
        if c.planned > 0 && 2 * c.placed < c.planned {
            return Err(Error::Balance(format!(
                "class {} ({}) received {} of {} planned increments",
                c.class_id, c.name, c.placed, c.planned
            )));
        }
    }

    let report = BalanceReport {
        config: cfg.clone(),
        max_count: plan.max_count,
        target_count: plan.target_count,
        sparse_images: stats.sparse_images.len(),
        dense_images: stats.dense_images.len(),
        balanced: per_class.iter().all(|c| c.after >= plan.target_count),
        per_class,
        target_cells_injected: injected,
        failures,
        paste_scaling: "original".into(),
        target_cell_augmented: cfg.augment_target_cell,
    };
    Ok(BalanceOutcome { dataset, plan, report })
}
