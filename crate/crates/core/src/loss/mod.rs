//! Instance-level alignment losses with analytic gradients.
//!
//! All arithmetic is done in `f64`. Instances are grouped by class; classes are
//! visited in ascending id order and the instances of a class in a canonical
//! order (lexicographic on their values), so every sum has a fixed order and
//! the losses are bit-identical under any reordering of the input.

mod classification;
mod dissimilarity;
mod i2da;
mod similarity;

use std::collections::BTreeMap;

pub use classification::{classification_loss, ClassificationTerm, ClassifierHead, HeadGrad};
pub use dissimilarity::dissimilarity_loss;
pub use i2da::{i2da_from_levels, i2da_loss, InstanceMeta, LevelGradients, LevelLosses, LossConfig, LossReport};
pub use similarity::{similarity_loss, SimilarityForm};

use crate::error::{Error, Result};
use crate::features::InstanceFeature;

/// Norm floor used in gradient denominators.
pub const NORM_EPS: f64 = 1e-12;

/// Instance vectors with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBatch {
    vectors: Vec<Vec<f64>>,
    classes: Vec<usize>,
}

impl InstanceBatch {
    pub fn new(vectors: Vec<Vec<f64>>, classes: Vec<usize>) -> Result<Self> {
        if vectors.len() != classes.len() {
            return Err(Error::Loss(format!(
                "{} vectors but {} class labels",
                vectors.len(),
                classes.len()
            )));
        }
        if let Some(first) = vectors.first() {
            let dim = first.len();
            for (i, v) in vectors.iter().enumerate() {
                if v.len() != dim {
                    return Err(Error::Loss(format!(
                        "instance {i} has dimension {}, expected {dim}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Loss(format!("instance {i} has non-finite values")));
                }
            }
        }
        Ok(Self { vectors, classes })
    }

    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a InstanceFeature>) -> Result<Self> {
        let (vectors, classes) = features
            .into_iter()
            .map(|f| (f.vector.iter().map(|&v| v as f64).collect(), f.class_id))
            .unzip();
        Self::new(vectors, classes)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.vectors
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Instance indices per class, each list in canonical order.
    pub(crate) fn groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.classes.iter().enumerate() {
            groups.entry(c).or_default().push(i);
        }
        for idx in groups.values_mut() {
            idx.sort_by(|&a, &b| {
                self.vectors[a]
                    .iter()
                    .zip(&self.vectors[b])
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        groups
    }

    pub(crate) fn check_nonzero(&self) -> Result<()> {
        match self.vectors.iter().position(|v| norm(v) == 0.0) {
            Some(index) => Err(Error::ZeroNorm { index }),
            None => Ok(()),
        }
    }

    pub(crate) fn zero_grads(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.dim()]; self.len()]
    }
}

/// Loss value and its gradient with respect to every instance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity and its gradients with respect to both arguments.
pub(crate) fn cosine_with_grads(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    let cos = dot(a, b) / (na * nb);
    let (na, nb) = (na.max(NORM_EPS), nb.max(NORM_EPS));
    let inv = 1.0 / (na * nb);
    let ga = a.iter().zip(b).map(|(x, y)| y * inv - cos * x / (na * na)).collect();
    let gb = a.iter().zip(b).map(|(x, y)| x * inv - cos * y / (nb * nb)).collect();
    (cos, ga, gb)
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
