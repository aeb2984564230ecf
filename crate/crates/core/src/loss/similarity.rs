use serde::{Deserialize, Serialize};

use super::{axpy, cosine_with_grads, InstanceBatch, LossTerm};
use crate::error::Result;

/// Per-pair term of the intra-class similarity loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityForm {
    /// `1 - cos`: minimizing pulls same-class instances together.
    #[default]
    OneMinusCosine,
    /// Raw `cos`, the literal per-pair term; minimizing pushes them apart.
    Cosine,
}

/// Mean pairwise term over each class, summed over classes. Classes with
/// fewer than two instances contribute nothing.
pub fn similarity_loss(batch: &InstanceBatch, form: SimilarityForm) -> Result<LossTerm> {
    batch.check_nonzero()?;
    let (offset, sign) = match form {
        SimilarityForm::OneMinusCosine => (1.0, -1.0),
        SimilarityForm::Cosine => (0.0, 1.0),
    };
    let v = batch.vectors();
    let mut grad = batch.zero_grads();
    let mut value = 0.0;
    for idx in batch.groups().values() {
        let n = idx.len();
        if n < 2 {
            continue;
        }
        let pairs = (n * (n - 1) / 2) as f64;
        let mut class_sum = 0.0;
        for (p, &k) in idx.iter().enumerate() {
            for &l in &idx[p + 1..] {
                let (cos, gk, gl) = cosine_with_grads(&v[k], &v[l]);
                class_sum += offset + sign * cos;
                axpy(sign / pairs, &gk, &mut grad[k]);
                axpy(sign / pairs, &gl, &mut grad[l]);
            }
        }
        value += class_sum / pairs;
    }
    Ok(LossTerm { value, grad })
}
