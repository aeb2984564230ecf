use super::{axpy, cosine_with_grads, norm, InstanceBatch, LossTerm};
use crate::error::{Error, Result};

/// Hinged cosine between class means: `sum_{k<l} max(0, cos(mean_k, mean_l) - margin)`.
///
/// A pair sitting exactly on the margin is treated as inactive (zero
/// subgradient). Gradients reach each instance through its class mean.
pub fn dissimilarity_loss(batch: &InstanceBatch, margin: f64) -> Result<LossTerm> {
    if !(-1.0..=1.0).contains(&margin) {
        return Err(Error::Loss(format!("margin {margin} outside [-1, 1]")));
    }
    let groups = batch.groups();
    if groups.len() < 2 {
        return Err(Error::Loss(format!(
            "dissimilarity needs at least 2 classes, got {}",
            groups.len()
        )));
    }
    let dim = batch.dim();
    let v = batch.vectors();
    let classes: Vec<(usize, &Vec<usize>)> = groups.iter().map(|(c, idx)| (*c, idx)).collect();
    let mut means = Vec::with_capacity(classes.len());
    for (class, idx) in &classes {
        let mut mean = vec![0.0; dim];
        for &i in idx.iter() {
            axpy(1.0, &v[i], &mut mean);
        }
        let n = idx.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        if norm(&mean) == 0.0 {
            return Err(Error::ZeroNormMean { class: *class });
        }
        means.push(mean);
    }

    let mut mean_grads = vec![vec![0.0; dim]; classes.len()];
    let mut value = 0.0;
    for k in 0..classes.len() {
        for l in k + 1..classes.len() {
            let (cos, gk, gl) = cosine_with_grads(&means[k], &means[l]);
            if cos > margin {
                value += cos - margin;
                axpy(1.0, &gk, &mut mean_grads[k]);
                axpy(1.0, &gl, &mut mean_grads[l]);
            }
        }
    }

    let mut grad = batch.zero_grads();
    for ((_, idx), g) in classes.iter().zip(&mean_grads) {
        let scale = 1.0 / idx.len() as f64;
        for &i in idx.iter() {
            axpy(scale, g, &mut grad[i]);
        }
    }
    Ok(LossTerm { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_means_hit_one_minus_margin() {
        let b = InstanceBatch::new(vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![0.5, 0.5]], vec![0, 1, 1]).unwrap();
        let t = dissimilarity_loss(&b, 0.5).unwrap();
        assert!((t.value - 0.5).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_means_are_inactive() {
        let b = InstanceBatch::new(vec![vec![1.0, 0.0], vec![0.0, 3.0]], vec![0, 1]).unwrap();
        let t = dissimilarity_loss(&b, 0.5).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn pair_on_margin_has_zero_subgradient() {
        // cos((1,0), (3,4)) = 3/5
        let b = InstanceBatch::new(vec![vec![1.0, 0.0], vec![3.0, 4.0]], vec![0, 1]).unwrap();
        let t = dissimilarity_loss(&b, 0.6).unwrap();
        assert_eq!(t.value, 0.0);
        assert!(t.grad.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn needs_two_classes() {
        let b = InstanceBatch::new(vec![vec![1.0, 0.0]], vec![0]).unwrap();
        assert!(dissimilarity_loss(&b, 0.3).is_err());
    }

    #[test]
    fn zero_mean_is_an_error() {
        let b = InstanceBatch::new(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]], vec![2, 2, 5]).unwrap();
        assert!(matches!(
            dissimilarity_loss(&b, 0.3),
            Err(Error::ZeroNormMean { class: 2 })
        ));
    }
}
