//! Combined objective over the three neck levels.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    classification_loss, dissimilarity_loss, similarity_loss, ClassifierHead, HeadGrad, InstanceBatch, SimilarityForm,
};
use crate::dataset::Domain;
use crate::error::{Error, Result};
use crate::features::{pool_instances, MultiLevelFeatures, NUM_LEVELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    pub similarity_form: SimilarityForm,
    /// Fail (rather than warn) when the batch holds no target-domain instance.
    pub require_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.005,
            lambda2: 0.005,
            lambda3: 0.001,
            margin: 0.3,
            similarity_form: SimilarityForm::OneMinusCosine,
            require_target: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got {lambdas:?}"
            )));
        }
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(Error::Config(format!(
                "margin must lie in [-1, 1], got {}",
                self.margin
            )));
        }
        Ok(())
    }

    pub fn combine(&self, sim: f64, dis: f64, cls: f64) -> f64 {
        self.lambda1 * sim + self.lambda2 * dis + self.lambda3 * cls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LevelLosses {
    pub sim: f64,
    pub dis: f64,
    pub cls: f64,
    pub i2da: f64,
}

/// Unweighted per-term gradients of one level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelGradients {
    pub sim: Vec<Vec<f64>>,
    pub dis: Vec<Vec<f64>>,
    pub cls: Vec<Vec<f64>>,
    pub head: HeadGrad,
}

/// Which record and ground-truth box an instance came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceMeta {
    pub image_id: String,
    pub gt_index: usize,
    pub class_id: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub per_level: Vec<LevelLosses>,
    pub l_sim: f64,
    pub l_dis: f64,
    pub l_cls: f64,
    pub l_i2da: f64,
    /// Instance order shared by every level's gradient list.
    pub instances: Vec<InstanceMeta>,
    /// Gradient of the combined loss, per level and instance.
    pub grad_instances: Vec<Vec<Vec<f64>>>,
    /// Gradient of the combined loss w.r.t. each level's classifier.
    pub grad_head: Vec<HeadGrad>,
    pub level_gradients: Vec<LevelGradients>,
}

struct LevelResult {
    losses: LevelLosses,
    grads: LevelGradients,
}

fn evaluate_level(batch: &InstanceBatch, head: &ClassifierHead, cfg: &LossConfig) -> Result<LevelResult> {
    let zeros = batch.zero_grads();
    let (sim, sim_grad) = if batch.is_empty() {
        (0.0, zeros.clone())
    } else {
        let t = similarity_loss(batch, cfg.similarity_form)?;
        (t.value, t.grad)
    };
    let (dis, dis_grad) = if batch.groups().len() < 2 {
        (0.0, zeros)
    } else {
        let t = dissimilarity_loss(batch, cfg.margin)?;
        (t.value, t.grad)
    };
    let cls = classification_loss(batch, head)?;
    Ok(LevelResult {
        losses: LevelLosses {
            sim,
            dis,
            cls: cls.value,
            i2da: cfg.combine(sim, dis, cls.value),
        },
        grads: LevelGradients {
            sim: sim_grad,
            dis: dis_grad,
            cls: cls.grad,
            head: cls.head,
        },
    })
}

/// Combined loss from already pooled instances, one batch per level.
///
/// Each term is averaged over the levels and the averages are weighted by
/// `lambda1..3`. Gradients stop at the instance vectors and head parameters.
pub fn i2da_from_levels(levels: &[InstanceBatch], heads: &[ClassifierHead], cfg: &LossConfig) -> Result<LossReport> {
    cfg.validate()?;
    if levels.len() != NUM_LEVELS || heads.len() != NUM_LEVELS {
        return Err(Error::Loss(format!(
            "expected {NUM_LEVELS} levels and heads, got {} and {}",
            levels.len(),
            heads.len()
        )));
    }
    let results = levels
        .par_iter()
        .zip(heads.par_iter())
        .map(|(batch, head)| evaluate_level(batch, head, cfg))
        .collect::<Result<Vec<_>>>()?;

    let n = NUM_LEVELS as f64;
    let mut sums = [0.0f64; 3];
    for r in &results {
        sums[0] += r.losses.sim;
        sums[1] += r.losses.dis;
        sums[2] += r.losses.cls;
    }
    let (l_sim, l_dis, l_cls) = (sums[0] / n, sums[1] / n, sums[2] / n);

    let grad_instances = results
        .iter()
        .map(|r| {
            r.grads
                .sim
                .iter()
                .zip(&r.grads.dis)
                .zip(&r.grads.cls)
                .map(|((s, d), c)| {
                    s.iter()
                        .zip(d)
                        .zip(c)
                        .map(|((s, d), c)| (cfg.lambda1 * s + cfg.lambda2 * d + cfg.lambda3 * c) / n)
                        .collect()
                })
                .collect()
        })
        .collect();
    let grad_head = results.iter().map(|r| r.grads.head.scaled(cfg.lambda3 / n)).collect();

    Ok(LossReport {
        per_level: results.iter().map(|r| r.losses).collect(),
        l_sim,
        l_dis,
        l_cls,
        l_i2da: cfg.combine(l_sim, l_dis, l_cls),
        instances: Vec::new(),
        grad_instances,
        grad_head,
        level_gradients: results.into_iter().map(|r| r.grads).collect(),
    })
}

/// Pool every record at grid size `size` and evaluate the combined loss.
pub fn i2da_loss(
    batch: &[MultiLevelFeatures],
    heads: &[ClassifierHead],
    cfg: &LossConfig,
    size: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Loss("feature batch is empty".into()));
    }
    let has_target = batch.iter().flat_map(|r| &r.gt).any(|g| g.domain == Domain::Target);
    if !has_target {
        if cfg.require_target {
            return Err(Error::Loss("batch contains no target-domain instance".into()));
        }
        warn!("batch contains no target-domain instance");
    }

    let pooled = batch
        .par_iter()
        .map(|rec| pool_instances(rec, size))
        .collect::<Result<Vec<_>>>()?;
    let levels = (0..NUM_LEVELS)
        .map(|level| InstanceBatch::from_features(pooled.iter().flatten().filter(|f| f.level_index == level)))
        .collect::<Result<Vec<_>>>()?;
    let mut report = i2da_from_levels(&levels, heads, cfg)?;
    report.instances = batch
        .iter()
        .flat_map(|rec| {
            rec.gt.iter().enumerate().map(|(gt_index, g)| InstanceMeta {
                image_id: rec.image_id.clone(),
                gt_index,
                class_id: g.class_id,
                domain: g.domain,
            })
        })
        .collect();
    Ok(report)
}
