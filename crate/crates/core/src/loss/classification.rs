use serde::{Deserialize, Serialize};

use super::{axpy, InstanceBatch};
use crate::error::{Error, Result};

/// Linear softmax classifier over instance vectors (one per neck level).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HeadRepr", into = "HeadRepr")]
pub struct ClassifierHead {
    num_classes: usize,
    dim: usize,
    /// Row-major `num_classes × dim`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<HeadRepr> for ClassifierHead {
    type Error = Error;
    fn try_from(r: HeadRepr) -> Result<Self> {
        let dim = r.weights.first().map_or(0, Vec::len);
        if r.weights.iter().any(|row| row.len() != dim) {
            return Err(Error::Loss("classifier weight rows differ in length".into()));
        }
        Self::new(r.weights.len(), dim, r.weights.concat(), r.bias)
    }
}

impl From<ClassifierHead> for HeadRepr {
    fn from(h: ClassifierHead) -> Self {
        HeadRepr {
            weights: h.weights.chunks(h.dim.max(1)).map(<[f64]>::to_vec).collect(),
            bias: h.bias,
        }
    }
}

impl ClassifierHead {
    pub fn new(num_classes: usize, dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Loss("classifier needs at least one class and one input".into()));
        }
        if weights.len() != num_classes * dim || bias.len() != num_classes {
            return Err(Error::Loss(format!(
                "classifier shape mismatch: {} weights, {} biases for {num_classes}x{dim}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Loss("classifier has non-finite parameters".into()));
        }
        Ok(Self {
            num_classes,
            dim,
            weights,
            bias,
        })
    }

    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self::new(num_classes, dim, vec![0.0; num_classes * dim], vec![0.0; num_classes]).expect("positive shape")
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn logits(&self, v: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadGrad {
    /// Row-major, same layout as the head's weights.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGrad {
    pub fn zeros(head: &ClassifierHead) -> Self {
        Self {
            weights: vec![0.0; head.weights.len()],
            bias: vec![0.0; head.bias.len()],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|v| v * s).collect(),
            bias: self.bias.iter().map(|v| v * s).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTerm {
    pub value: f64,
    pub grad: Vec<Vec<f64>>,
    pub head: HeadGrad,
}

/// Softmax cross-entropy of each instance against its class, averaged within
/// each class and summed over classes.
pub fn classification_loss(batch: &InstanceBatch, head: &ClassifierHead) -> Result<ClassificationTerm> {
    if !batch.is_empty() && batch.dim() != head.dim {
        return Err(Error::Loss(format!(
            "instance dimension {} does not match classifier input {}",
            batch.dim(),
            head.dim
        )));
    }
    if let Some(&c) = batch.classes().iter().find(|&&c| c >= head.num_classes) {
        return Err(Error::Loss(format!(
            "class {c} outside classifier with {} outputs",
            head.num_classes
        )));
    }
    let v = batch.vectors();
    let mut grad = batch.zero_grads();
    let mut head_grad = HeadGrad::zeros(head);
    let mut value = 0.0;
    for (&class, idx) in &batch.groups() {
        let weight = 1.0 / idx.len() as f64;
        let mut class_sum = 0.0;
        for &k in idx {
            let z = head.logits(&v[k]);
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|zi| (zi - zmax).exp()).sum();
            let lse = zmax + denom.ln();
            class_sum += lse - z[class];

            for (j, zj) in z.iter().enumerate() {
                let p = (zj - zmax).exp() / denom;
                let gz = weight * (p - if j == class { 1.0 } else { 0.0 });
                let row = &head.weights[j * head.dim..(j + 1) * head.dim];
                axpy(gz, row, &mut grad[k]);
                axpy(gz, &v[k], &mut head_grad.weights[j * head.dim..(j + 1) * head.dim]);
                head_grad.bias[j] += gz;
            }
        }
        value += class_sum * weight;
    }
    Ok(ClassificationTerm {
        value,
        grad,
        head: head_grad,
    })
}
