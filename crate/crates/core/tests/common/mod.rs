#![allow(dead_code)]

pub mod scenes;

use fsda_core::loss::{ClassifierHead, InstanceBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random batch: `classes` classes with 1..=`max_per_class` instances each.
pub fn random_batch(rng: &mut ChaCha8Rng, dim: usize, classes: usize, max_per_class: usize) -> InstanceBatch {
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for c in 0..classes {
        for _ in 0..rng.gen_range(1..=max_per_class) {
            vectors.push((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
            labels.push(c);
        }
    }
    InstanceBatch::new(vectors, labels).unwrap()
}

pub fn random_head(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> ClassifierHead {
    let w = (0..classes * dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let b = (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ClassifierHead::new(classes, dim, w, b).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Instances of each class in ascending class order.
pub fn by_class(batch: &InstanceBatch) -> Vec<(usize, Vec<Vec<f64>>)> {
    let mut classes: Vec<usize> = batch.classes().to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let members = batch
                .vectors()
                .iter()
                .zip(batch.classes())
                .filter(|(_, &k)| k == c)
                .map(|(v, _)| v.clone())
                .collect();
            (c, members)
        })
        .collect()
}

pub fn class_means(batch: &InstanceBatch) -> Vec<Vec<f64>> {
    by_class(batch)
        .into_iter()
        .map(|(_, members)| {
            let n = members.len() as f64;
            let mut mean = vec![0.0; members[0].len()];
            for m in &members {
                for (a, x) in mean.iter_mut().zip(m) {
                    *a += x / n;
                }
            }
            mean
        })
        .collect()
}

/// Direct evaluation of the mean pairwise `1 - cos` per class, summed.
pub fn similarity_oracle(batch: &InstanceBatch) -> f64 {
    by_class(batch)
        .iter()
        .map(|(_, m)| {
            let mut terms = Vec::new();
            for k in 0..m.len() {
                for l in k + 1..m.len() {
                    terms.push(1.0 - cosine(&m[k], &m[l]));
                }
            }
            if terms.is_empty() {
                0.0
            } else {
                terms.iter().sum::<f64>() / terms.len() as f64
            }
        })
        .sum()
}

/// Sum of hinged cosines over every unordered pair of class means.
pub fn dissimilarity_oracle(batch: &InstanceBatch, margin: f64) -> f64 {
    let means = class_means(batch);
    let mut total = 0.0;
    for k in 0..means.len() {
        for l in k + 1..means.len() {
            total += (cosine(&means[k], &means[l]) - margin).max(0.0);
        }
    }
    total
}

/// Per-class mean cross-entropy summed over classes, via naive softmax.
pub fn classification_oracle(batch: &InstanceBatch, head: &ClassifierHead) -> f64 {
    by_class(batch)
        .iter()
        .map(|(c, members)| {
            let losses: Vec<f64> = members
                .iter()
                .map(|v| {
                    let logits: Vec<f64> = (0..head.num_classes())
                        .map(|j| {
                            let row = &head.weights()[j * head.dim()..(j + 1) * head.dim()];
                            row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + head.bias()[j]
                        })
                        .collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    -(logits[*c].exp() / z).ln()
                })
                .collect();
            losses.iter().sum::<f64>() / losses.len() as f64
        })
        .sum()
}

/// Smallest distance between any class-mean cosine and the margin.
pub fn hinge_distance(batch: &InstanceBatch, margin: f64) -> f64 {
    let means = class_means(batch);
    let mut best = f64::INFINITY;
    for k in 0..means.len() {
        for l in k + 1..means.len() {
            best = best.min((cosine(&means[k], &means[l]) - margin).abs());
        }
    }
    best
}

/// Central differences of `f` with respect to every instance coordinate.
pub fn fd_instance_grad(batch: &InstanceBatch, f: impl Fn(&InstanceBatch) -> f64) -> Vec<Vec<f64>> {
    let mut work = batch.clone();
    let mut out = vec![vec![0.0; batch.dim()]; batch.len()];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, g) in row.iter_mut().enumerate() {
            let orig = work.vectors()[i][j];
            work.vectors_mut()[i][j] = orig + FD_STEP;
            let plus = f(&work);
            work.vectors_mut()[i][j] = orig - FD_STEP;
            let minus = f(&work);
            work.vectors_mut()[i][j] = orig;
            *g = (plus - minus) / (2.0 * FD_STEP);
        }
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// Every file under `root` as (relative path, bytes), sorted by path.
pub fn dir_snapshot(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

/// Run the `fsda` binary; returns (exit code, stdout, stderr).
pub fn fsda(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_fsda"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

/// Save a synthetic source and target set under `dir`; returns their manifests.
pub fn write_fixture(
    dir: &std::path::Path,
    spec: &fsda_core::synthetic::SyntheticSpec,
    target_images: usize,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let source = fsda_core::synthetic::synthetic_source(spec);
    let target = fsda_core::synthetic::synthetic_target(source.num_classes(), target_images, spec.seed ^ 0xabc);
    let s = fsda_core::dataset::save_dataset(&source, &dir.join("source")).unwrap();
    let t = fsda_core::dataset::save_dataset(&target, &dir.join("target")).unwrap();
    (s, t)
}

/// Every pixel touched by a pasted box must be touched by exactly one box.
pub fn assert_pasted_boxes_disjoint(im: &fsda_core::dataset::ImageRecord) {
    let (w, h) = (im.width() as usize, im.height() as usize);
    let mut total = vec![0u32; w * h];
    let mut pasted = vec![false; w * h];
    for a in &im.annotations {
        assert!(a.bbox.x_max() <= w as f64 && a.bbox.y_max() <= h as f64);
        // pixel (x, y) overlaps the box when its unit square meets it with positive area
        for y in 0..h {
            for x in 0..w {
                let inside = (x as f64) < a.bbox.x_max()
                    && (x as f64 + 1.0) > a.bbox.x_min()
                    && (y as f64) < a.bbox.y_max()
                    && (y as f64 + 1.0) > a.bbox.y_min();
                if inside {
                    total[y * w + x] += 1;
                    pasted[y * w + x] |= a.source == fsda_core::dataset::SourceFlag::Pasted;
                }
            }
        }
    }
    for i in 0..w * h {
        assert!(!pasted[i] || total[i] == 1, "{}: overlap at pixel {i}", im.image_id);
    }
}

/// Corner-aligned bilinear sample of channel `c` at output cell (y, x).
pub fn bilinear_oracle(map: &fsda_core::features::FeatureMap, c: usize, y: usize, x: usize, size: usize) -> f64 {
    let coord = |i: usize, n: usize| {
        if size == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (size - 1) as f64
        }
    };
    let (fy, fx) = (coord(y, map.height()), coord(x, map.width()));
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(map.height() - 1), (x0 + 1).min(map.width() - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let v = |yy, xx| map.at(c, yy, xx) as f64;
    (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1)) + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1))
}

pub struct GradCase {
    pub batch: InstanceBatch,
    pub classes: usize,
    pub margin: f64,
}

/// Random configurations (dims 8..=128, 2..=5 classes, 1..=6 per class), skipping
/// points within 1e-3 of a hinge kink.
pub fn configs(seed: u64, count: usize) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let dim = r.gen_range(8..=128);
        let classes = r.gen_range(2..=5);
        let batch = random_batch(&mut r, dim, classes, 6);
        let margin = r.gen_range(-0.3..0.3);
        if hinge_distance(&batch, margin) < 1e-3 {
            continue;
        }
        out.push(GradCase { batch, classes, margin });
    }
    out
}

pub fn three_levels(r: &mut ChaCha8Rng, classes: usize) -> (Vec<InstanceBatch>, Vec<ClassifierHead>) {
    // the same instances (same labels) appear on every level with per-level widths
    let per_class: Vec<usize> = (0..classes).map(|_| r.gen_range(1..=6)).collect();
    let labels: Vec<usize> = per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let mut levels = Vec::new();
    let mut heads = Vec::new();
    for _ in 0..3 {
        let dim = r.gen_range(8..=48);
        let vectors = labels
            .iter()
            .map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect())
            .collect();
        levels.push(InstanceBatch::new(vectors, labels.clone()).unwrap());
        heads.push(random_head(r, classes, dim));
    }
    (levels, heads)
}
