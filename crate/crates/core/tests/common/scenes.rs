//! Detection scenes and a threshold-sweep AP oracle.

use fsda_core::dataset::BBox;
use fsda_core::metrics::{Detection, GtBox};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
    BBox::new(x0, y0, x1, y1).unwrap()
}

pub fn det(image: &str, class_id: usize, b: BBox, confidence: f64) -> Detection {
    Detection {
        image_id: image.into(),
        class_id,
        bbox: b,
        confidence,
    }
}

pub fn gt(image: &str, class_id: usize, b: BBox) -> GtBox {
    GtBox {
        image_id: image.into(),
        class_id,
        bbox: b,
    }
}

pub fn area(b: &BBox) -> f64 {
    (b.x_max() - b.x_min()) * (b.y_max() - b.y_min())
}

pub fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let h = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let inter = w * h;
    inter / (area(a) + area(b) - inter)
}

/// AP of one class by sweeping every distinct confidence threshold.
///
/// At each threshold the kept detections are matched greedily in descending
/// confidence (input order within ties), each taking its best unmatched
/// ground truth. Precision/recall points are then integrated with the
/// all-points envelope.
pub fn brute_force_ap(dets: &[Detection], gts: &[GtBox], class_id: usize, thr: f64) -> Option<f64> {
    let d: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    let g: Vec<&GtBox> = gts.iter().filter(|g| g.class_id == class_id).collect();
    if g.is_empty() {
        return if d.is_empty() { None } else { Some(0.0) };
    }
    let mut thresholds: Vec<f64> = d.iter().map(|d| d.confidence).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    let mut points = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<&&Detection> = d.iter().filter(|d| d.confidence >= t).collect();
        kept.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; g.len()];
        let mut tp = 0usize;
        for k in &kept {
            let mut best: Option<(usize, f64)> = None;
            for (j, gg) in g.iter().enumerate() {
                if used[j] || gg.image_id != k.image_id {
                    continue;
                }
                let o = overlap(&k.bbox, &gg.bbox);
                if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / g.len() as f64, tp as f64 / kept.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let p_max = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
        ap += (r - prev_recall) * p_max;
        prev_recall = r;
    }
    Some(ap)
}

pub struct Scene {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtBox>,
}

pub fn random_box(r: &mut ChaCha8Rng) -> BBox {
    let x = r.gen_range(0..12) as f64;
    let y = r.gen_range(0..12) as f64;
    bx(x, y, x + r.gen_range(2..8) as f64, y + r.gen_range(2..8) as f64)
}

/// Up to 6 boxes in total over 1-2 images and 1-2 classes. Confidences come
/// from a coarse grid so ties occur.
pub fn random_scene(r: &mut ChaCha8Rng) -> Scene {
    let images = ["a", "b"];
    let classes = r.gen_range(1..=2);
    let n_gt = r.gen_range(1..=3);
    let n_det = r.gen_range(0..=6 - n_gt);
    let gts: Vec<GtBox> = (0..n_gt)
        .map(|_| gt(images[r.gen_range(0..2)], r.gen_range(0..classes), random_box(r)))
        .collect();
    let dets = (0..n_det)
        .map(|_| {
            // half of the detections jitter a ground-truth box
            let b = if r.gen_bool(0.5) {
                let g = &gts[r.gen_range(0..gts.len())];
                let s = r.gen_range(0..3) as f64;
                bx(g.bbox.x_min() + s, g.bbox.y_min(), g.bbox.x_max() + s, g.bbox.y_max())
            } else {
                random_box(r)
            };
            det(
                images[r.gen_range(0..2)],
                r.gen_range(0..classes),
                b,
                r.gen_range(1..=5) as f64 / 5.0,
            )
        })
        .collect();
    Scene { dets, gts }
}

/// Four classes with hand-computed AP@50 of 1, 5/6, 1/2 and 0.
pub fn four_class_fixture() -> (Vec<Detection>, Vec<GtBox>) {
    let gts = vec![
        gt("i", 0, bx(0.0, 0.0, 10.0, 10.0)),
        gt("i", 1, bx(20.0, 0.0, 30.0, 10.0)),
        gt("i", 1, bx(40.0, 0.0, 50.0, 10.0)),
        gt("i", 2, bx(0.0, 20.0, 10.0, 30.0)),
        gt("i", 2, bx(20.0, 20.0, 30.0, 30.0)),
        gt("i", 3, bx(40.0, 20.0, 50.0, 30.0)),
    ];
    let dets = vec![
        // class 0: one exact hit, AP 1
        det("i", 0, bx(0.0, 0.0, 10.0, 10.0), 0.9),
        // class 1: TP, FP, TP -> 0.5 * 1 + 0.5 * 2/3 = 5/6
        det("i", 1, bx(20.0, 0.0, 30.0, 10.0), 0.9),
        det("i", 1, bx(60.0, 0.0, 70.0, 10.0), 0.8),
        det("i", 1, bx(40.0, 0.0, 50.0, 10.0), 0.7),
        // class 2: one of two found -> 0.5
        det("i", 2, bx(0.0, 20.0, 10.0, 30.0), 0.6),
        // class 3: IoU 1/3 only, a false positive -> 0
        det("i", 3, bx(45.0, 20.0, 55.0, 30.0), 0.95),
    ];
    (dets, gts)
}

/// Class 1 steps recall by 1/2 at precision 1, then by 1/2 at precision 2/3.
pub const FOUR_CLASS_APS: [f64; 4] = [1.0, 0.5 * 1.0 + 0.5 * (2.0 / 3.0), 0.5, 0.0];
