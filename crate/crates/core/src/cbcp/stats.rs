use serde::Serialize;

use crate::dataset::DetectionDataset;
use crate::error::{Error, Result};

/// Location of one existing object: image id and index into its annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstanceRef {
    pub image_id: String,
    pub annotation_index: usize,
}

/// Source-dataset statistics driving the balancer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    /// Object-count threshold separating sparse from dense images.
    pub r: usize,
    /// Total objects per class, indexed by class id.
    pub per_class_count: Vec<usize>,
    /// Images with fewer than `r` objects; the only ones that receive pastes.
    pub sparse_images: Vec<String>,
    /// Images with at least `r` objects; passed through untouched.
    pub dense_images: Vec<String>,
    /// Images containing at least one instance of each class.
    pub class_presence: Vec<Vec<String>>,
    /// Every instance of each class, in dataset order.
    pub instances: Vec<Vec<InstanceRef>>,
}

impl ClassStats {
    pub fn max_count(&self) -> usize {
        self.per_class_count.iter().copied().max().unwrap_or(0)
    }
}

pub fn compute_stats(source: &DetectionDataset, r: usize) -> Result<ClassStats> {
    if r == 0 {
        return Err(Error::Balance("r must be at least 1".into()));
    }
    if source.is_empty() {
        return Err(Error::Balance("source dataset is empty".into()));
    }
    let n = source.num_classes();
    let mut stats = ClassStats {
        r,
        per_class_count: vec![0; n],
        sparse_images: Vec::new(),
        dense_images: Vec::new(),
        class_presence: vec![Vec::new(); n],
        instances: vec![Vec::new(); n],
    };
    for im in &source.images {
        if im.annotations.len() < r {
            stats.sparse_images.push(im.image_id.clone());
        } else {
            stats.dense_images.push(im.image_id.clone());
        }
        for (idx, a) in im.annotations.iter().enumerate() {
            if a.class_id >= n {
                return Err(Error::Validation(format!(
                    "image {}: class_id {} out of range",
                    im.image_id, a.class_id
                )));
            }
            stats.per_class_count[a.class_id] += 1;
            stats.instances[a.class_id].push(InstanceRef {
                image_id: im.image_id.clone(),
                annotation_index: idx,
            });
            let presence = &mut stats.class_presence[a.class_id];
            if presence.last() != Some(&im.image_id) {
                presence.push(im.image_id.clone());
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, BBox, DatasetDomain, Domain, ImageRecord, Raster};

    fn image_with(id: &str, classes: &[usize]) -> ImageRecord {
        let mut im = ImageRecord::new(id, Raster::filled(64, 64, [0; 3]), Domain::Source);
        for (i, &c) in classes.iter().enumerate() {
            let x = (i % 8) as f64 * 8.0;
            let y = (i / 8) as f64 * 8.0;
            im.annotations
                .push(Annotation::original(c, BBox::new(x, y, x + 4.0, y + 4.0).unwrap()));
        }
        im
    }

    #[test]
    fn threshold_partitions_images() {
        let mut ds = DetectionDataset::new(vec!["a".into()], DatasetDomain::Source);
        ds.images.push(image_with("img1", &[0; 2]));
        ds.images.push(image_with("img2", &[0; 5]));
        ds.images.push(image_with("img3", &[0; 9]));
        let s = compute_stats(&ds, 6).unwrap();
        assert_eq!(s.sparse_images, vec!["img1", "img2"]);
        assert_eq!(s.dense_images, vec!["img3"]);
        assert_eq!(s.per_class_count, vec![16]);
    }

    #[test]
    fn absent_class_has_zero_count_and_no_presence() {
        let mut ds = DetectionDataset::new(vec!["a".into(), "b".into()], DatasetDomain::Source);
        ds.images.push(image_with("x", &[0, 0]));
        let s = compute_stats(&ds, 6).unwrap();
        assert_eq!(s.per_class_count[1], 0);
        assert!(s.class_presence[1].is_empty());
        assert_eq!(s.class_presence[0], vec!["x"]);
        assert_eq!(s.instances[0].len(), 2);
    }

    #[test]
    fn rejects_empty_dataset_and_zero_threshold() {
        let ds = DetectionDataset::new(vec!["a".into()], DatasetDomain::Source);
        assert!(compute_stats(&ds, 6).is_err());
        let mut ds = ds;
        ds.images.push(image_with("x", &[0]));
        assert!(compute_stats(&ds, 0).is_err());
    }
}
