//! IoU, all-points average precision, mAP@50, mAP@50:95 and recall.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, DetectionDataset};
use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x_max().min(b.x_max()) - a.x_min().max(b.x_min());
    let ih = a.y_max().min(b.y_max()) - a.y_min().max(b.y_min());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence.is_finite() && (0.0..=1.0).contains(&self.confidence)) {
            return Err(Error::Validation(format!(
                "detection confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
}

pub fn ground_truth(dataset: &DetectionDataset) -> Vec<GtBox> {
    dataset
        .images
        .iter()
        .flat_map(|im| {
            im.annotations.iter().map(|a| GtBox {
                image_id: im.image_id.clone(),
                class_id: a.class_id,
                bbox: a.bbox,
            })
        })
        .collect()
}

/// Matching result for one class at one IoU threshold, detections in ranked order.
struct ClassMatch {
    confidences: Vec<f64>,
    true_positive: Vec<bool>,
    num_gt: usize,
}

impl ClassMatch {
    fn matched(&self) -> usize {
        self.true_positive.iter().filter(|t| **t).count()
    }
}

/// Greedy one-to-one matching: detections in descending confidence (stable),
/// each takes the unmatched same-image box of highest IoU at or above the threshold.
fn match_class(dets: &[&Detection], gts: &[&GtBox], iou_thresh: f64) -> ClassMatch {
    let mut order: Vec<&Detection> = dets.to_vec();
    order.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let true_positive = order
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for &gi in by_image.get(d.image_id.as_str()).into_iter().flatten() {
                if taken[gi] {
                    continue;
                }
                let o = iou(&d.bbox, &gts[gi].bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    ClassMatch {
        confidences: order.iter().map(|d| d.confidence).collect(),
        true_positive,
        num_gt: gts.len(),
    }
}

/// Area under the precision envelope. PR points are only taken at the end of
/// each run of equal confidences, so tied detections count as one threshold.
fn all_points_ap(m: &ClassMatch) -> Option<f64> {
    if m.num_gt == 0 {
        return if m.confidences.is_empty() { None } else { Some(0.0) };
    }
    let mut points: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &hit) in m.true_positive.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let group_ends = m.confidences.get(i + 1).is_none_or(|next| *next != m.confidences[i]);
        if group_ends {
            points.push((tp as f64 / m.num_gt as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut envelope = 0.0f64;
    let mut area = 0.0;
    for j in (0..points.len()).rev() {
        envelope = envelope.max(points[j].1);
        let prev_recall = if j == 0 { 0.0 } else { points[j - 1].0 };
        area += (points[j].0 - prev_recall) * envelope;
    }
    Some(area)
}

fn split_by_class<'a>(
    dets: &'a [Detection],
    gt: &'a [GtBox],
    num_classes: usize,
) -> (Vec<Vec<&'a Detection>>, Vec<Vec<&'a GtBox>>) {
    let mut d = vec![Vec::new(); num_classes];
    let mut g = vec![Vec::new(); num_classes];
    for det in dets {
        if let Some(v) = d.get_mut(det.class_id) {
            v.push(det);
        }
    }
    for b in gt {
        if let Some(v) = g.get_mut(b.class_id) {
            v.push(b);
        }
    }
    (d, g)
}

/// Per-class AP at one IoU threshold. `None` for classes with neither
/// detections nor ground truth.
pub fn average_precision(dets: &[Detection], gt: &[GtBox], iou_thresh: f64, num_classes: usize) -> Vec<Option<f64>> {
    let (d, g) = split_by_class(dets, gt, num_classes);
    d.iter()
        .zip(&g)
        .map(|(dc, gc)| all_points_ap(&match_class(dc, gc, iou_thresh)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: Option<String>,
    pub num_gt: usize,
    pub num_dets: usize,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(rename = "mAP@50")]
    pub map50: f64,
    #[serde(rename = "mAP@50:95")]
    pub map50_95: f64,
    /// Matched ground truth over all ground truth at IoU 0.5.
    pub recall: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn mean_of_present(values: impl Iterator<Item = Option<f64>>) -> f64 {
    let present: Vec<f64> = values.flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn map_suite(dets: &[Detection], gt: &[GtBox], num_classes: usize) -> MetricReport {
    let (d, g) = split_by_class(dets, gt, num_classes);
    let thresholds = coco_thresholds();
    let mut per_class = Vec::with_capacity(num_classes);
    let (mut matched_total, mut gt_total) = (0usize, 0usize);
    for (class_id, (dc, gc)) in d.iter().zip(&g).enumerate() {
        let at50 = match_class(dc, gc, 0.5);
        matched_total += at50.matched();
        gt_total += gc.len();
        let ap50 = all_points_ap(&at50);
        let ap50_95 = ap50.map(|_| {
            thresholds
                .iter()
                .map(|&t| all_points_ap(&match_class(dc, gc, t)).unwrap_or(0.0))
                .sum::<f64>()
                / thresholds.len() as f64
        });
        per_class.push(ClassMetrics {
            class_id,
            name: None,
            num_gt: gc.len(),
            num_dets: dc.len(),
            ap50,
            ap50_95,
            recall: (!gc.is_empty()).then(|| at50.matched() as f64 / gc.len() as f64),
        });
    }
    MetricReport {
        map50: mean_of_present(per_class.iter().map(|c| c.ap50)),
        map50_95: mean_of_present(per_class.iter().map(|c| c.ap50_95)),
        recall: if gt_total == 0 {
            0.0
        } else {
            matched_total as f64 / gt_total as f64
        },
        per_class,
    }
}

/// Evaluate against a dataset, labelling classes with the catalog names.
pub fn evaluate_dataset(dets: &[Detection], dataset: &DetectionDataset) -> Result<MetricReport> {
    for d in dets {
        d.validate()?;
        if d.class_id >= dataset.num_classes() {
            return Err(Error::Validation(format!(
                "detection class {} outside catalog of {}",
                d.class_id,
                dataset.num_classes()
            )));
        }
    }
    let mut report = map_suite(dets, &ground_truth(dataset), dataset.num_classes());
    for c in &mut report.per_class {
        c.name = Some(dataset.classes[c.class_id].clone());
    }
    Ok(report)
}
