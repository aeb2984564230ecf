//! Increment plan: how many copies of which donor object go into which sparse image.
//!
//! For every class below the largest class count the deficit is
//! `ceil(beta * max_count) - count`. Pastes are laid out one at a time: paste
//! `k` goes to receiver `k mod |sparse|` and takes donor `k mod |donors|`, with
//! both lists shuffled per class from the seed. Consecutive rounds over the
//! receivers spread copies evenly, so no image gets more than
//! `ceil(total / |sparse|)` copies of one class, and the total is capped so
//! that bound never exceeds `cap_per_image`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{ClassStats, InstanceRef};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub beta: f64,
    pub cap_per_image: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            cap_per_image: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assignment {
    pub receiving_image_id: String,
    pub donor_image_id: String,
    pub donor_annotation_index: usize,
    pub copies: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassIncrement {
    pub class_id: usize,
    /// Objects needed to reach the balance target.
    pub deficit: usize,
    /// Objects actually scheduled; below `deficit` only when the sparse pool is too small.
    pub total_increments: usize,
    pub assignments: Vec<Assignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IncrementPlan {
    pub max_count: usize,
    pub target_count: usize,
    pub classes: Vec<ClassIncrement>,
}

impl IncrementPlan {
    pub fn is_empty(&self) -> bool {
        self.classes.iter().all(|c| c.total_increments == 0)
    }

    pub fn class(&self, class_id: usize) -> Option<&ClassIncrement> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

/// `ceil(beta * max_count)`, robust to representation error in `beta`.
pub fn balance_target(beta: f64, max_count: usize) -> usize {
    let raw = beta * max_count as f64;
    (raw - 1e-9).ceil().max(0.0) as usize
}

pub fn compute_increment_plan(stats: &ClassStats, config: &PlanConfig, seed: u64) -> Result<IncrementPlan> {
    if !(config.beta > 0.0 && config.beta <= 1.0) {
        return Err(Error::Balance(format!("beta must lie in (0, 1], got {}", config.beta)));
    }
    if config.cap_per_image == 0 {
        return Err(Error::Balance("cap_per_image must be at least 1".into()));
    }
    let max_count = stats.max_count();
    let target_count = balance_target(config.beta, max_count);
    let mut classes = Vec::new();

    for (class_id, &count) in stats.per_class_count.iter().enumerate() {
        if count >= max_count {
            continue;
        }
        let deficit = target_count.saturating_sub(count);
        if deficit == 0 {
            classes.push(ClassIncrement {
                class_id,
                deficit,
                total_increments: 0,
                assignments: Vec::new(),
            });
            continue;
        }
        if stats.instances[class_id].is_empty() {
            return Err(Error::Balance(format!(
                "class {class_id} needs {deficit} increments but has no donor instances"
            )));
        }
        if stats.sparse_images.is_empty() {
            return Err(Error::Balance("no sparse images available to receive pastes".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class_id as u64);
        let mut receivers: Vec<&String> = stats.sparse_images.iter().collect();
        receivers.shuffle(&mut rng);
        let mut donors: Vec<&InstanceRef> = stats.instances[class_id].iter().collect();
        donors.shuffle(&mut rng);

        let total = deficit.min(config.cap_per_image * receivers.len());
        let mut assignments: Vec<Assignment> = Vec::new();
        for k in 0..total {
            let receiver = receivers[k % receivers.len()];
            let donor = donors[k % donors.len()];
            match assignments.iter_mut().find(|a| {
                &a.receiving_image_id == receiver
                    && a.donor_image_id == donor.image_id
                    && a.donor_annotation_index == donor.annotation_index
            }) {
                Some(a) => a.copies += 1,
                None => assignments.push(Assignment {
                    receiving_image_id: receiver.clone(),
                    donor_image_id: donor.image_id.clone(),
                    donor_annotation_index: donor.annotation_index,
                    copies: 1,
                }),
            }
        }
        classes.push(ClassIncrement {
            class_id,
            deficit,
            total_increments: total,
            assignments,
        });
    }

    Ok(IncrementPlan {
        max_count,
        target_count,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    /// Stats with one image per instance for donors and `sparse` empty receivers.
    fn stats_for(counts: &[usize], sparse: usize) -> ClassStats {
        let n = counts.len();
        let mut stats = ClassStats {
            r: 6,
            per_class_count: counts.to_vec(),
            sparse_images: (0..sparse).map(|i| format!("s{i:03}")).collect(),
            dense_images: Vec::new(),
            class_presence: vec![Vec::new(); n],
            instances: vec![Vec::new(); n],
        };
        for (c, &count) in counts.iter().enumerate() {
            for k in 0..count {
                let id = format!("d{c}_{k}");
                stats.class_presence[c].push(id.clone());
                stats.instances[c].push(InstanceRef {
                    image_id: id,
                    annotation_index: 0,
                });
            }
        }
        stats
    }

    #[test]
    fn two_class_deficit() {
        let plan = compute_increment_plan(&stats_for(&[100, 10], 40), &PlanConfig::default(), 1).unwrap();
        assert_eq!(plan.target_count, 90);
        assert!(plan.class(0).is_none());
        assert_eq!(plan.class(1).unwrap().total_increments, 80);
    }

    #[test]
    fn totals_and_cap_recomputed_from_rows() {
        let cfg = PlanConfig::default();
        let plan = compute_increment_plan(&stats_for(&[100, 10, 5], 30), &cfg, 7).unwrap();
        let mut totals: HashMap<usize, usize> = HashMap::new();
        for ci in &plan.classes {
            let mut per_image: HashMap<&str, usize> = HashMap::new();
            for a in &ci.assignments {
                assert!(a.copies >= 1);
                *totals.entry(ci.class_id).or_default() += a.copies;
                *per_image.entry(&a.receiving_image_id).or_default() += a.copies;
                assert!(a.donor_image_id.starts_with(&format!("d{}_", ci.class_id)));
            }
            assert!(per_image.values().all(|&c| c <= cfg.cap_per_image));
            assert_eq!(totals.get(&ci.class_id).copied().unwrap_or(0), ci.total_increments);
        }
        assert_eq!(totals[&1], 80);
        assert_eq!(totals[&2], 85);
    }

    #[test]
    fn balanced_counts_give_empty_plan() {
        let plan = compute_increment_plan(&stats_for(&[10, 10, 10], 5), &PlanConfig::default(), 0).unwrap();
        assert!(plan.is_empty());
        assert!(plan.classes.is_empty());
    }

    #[test]
    fn near_balanced_class_has_zero_increments() {
        let plan = compute_increment_plan(&stats_for(&[100, 95], 5), &PlanConfig::default(), 0).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.class(1).unwrap().total_increments, 0);
    }

    #[test]
    fn missing_donors_is_an_error() {
        let err = compute_increment_plan(&stats_for(&[100, 0], 5), &PlanConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn total_is_capped_by_receiver_capacity() {
        let plan = compute_increment_plan(&stats_for(&[100, 1], 3), &PlanConfig::default(), 0).unwrap();
        let ci = plan.class(1).unwrap();
        assert_eq!(ci.deficit, 89);
        assert_eq!(ci.total_increments, 12);
    }

    #[test]
    fn plan_is_deterministic() {
        let s = stats_for(&[50, 7, 3], 12);
        let a = compute_increment_plan(&s, &PlanConfig::default(), 42).unwrap();
        let b = compute_increment_plan(&s, &PlanConfig::default(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn balance_target_rounds_up() {
        assert_eq!(balance_target(0.9, 100), 90);
        assert_eq!(balance_target(0.9, 101), 91);
        assert_eq!(balance_target(1.0, 7), 7);
    }
}
