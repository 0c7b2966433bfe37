//! Class-balanced instance sampling.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keeps the weight of very large classes away from zero.
pub const CLASS_WEIGHT_EPS: f64 = 0.01;
pub const CLASS_WEIGHT_SCALE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerWeights {
    /// `1000 / (count_c + 0.01)` per class.
    pub class: Vec<f64>,
    /// Sum of the class weights of each instance's labels.
    pub instance: Vec<f64>,
}

impl SamplerWeights {
    pub fn new(labels: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("cannot sample from an empty manifest"));
        }
        let mut counts = vec![0usize; num_classes];
        for (i, ls) in labels.iter().enumerate() {
            if ls.is_empty() {
                return Err(Error::invalid(format!("instance {i} has no labels")));
            }
            for &c in ls {
                *counts
                    .get_mut(c)
                    .ok_or_else(|| Error::invalid(format!("label {c} with {num_classes} classes")))? += 1;
            }
        }
        let class: Vec<f64> = counts
            .iter()
            .map(|&n| CLASS_WEIGHT_SCALE / (n as f64 + CLASS_WEIGHT_EPS))
            .collect();
        let instance = labels.iter().map(|ls| ls.iter().map(|&c| class[c]).sum()).collect();
        Ok(SamplerWeights { class, instance })
    }

    /// Normalized draw probability of every instance.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.instance.iter().sum();
        self.instance.iter().map(|w| w / total).collect()
    }
}

/// `draws` instance indices, with replacement, proportional to instance weight.
pub fn weighted_sample<R: Rng + ?Sized>(
    labels: &[Vec<usize>],
    num_classes: usize,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let w = SamplerWeights::new(labels, num_classes)?;
    let dist = WeightedIndex::new(&w.instance).map_err(|e| Error::invalid(format!("sampler weights: {e}")))?;
    Ok((0..draws).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_class_is_uniform() {
        let labels = vec![vec![0]; 5];
        let w = SamplerWeights::new(&labels, 1).unwrap();
        assert!(w.instance.iter().all(|&x| x == w.instance[0]));
    }

    #[test]
    fn rare_class_ratio() {
        let mut labels = vec![vec![0]];
        labels.extend(std::iter::repeat_n(vec![1], 999));
        let w = SamplerWeights::new(&labels, 2).unwrap();
        let ratio = w.class[0] / w.class[1];
        let expected = (1000.0 / 1.01) / (1000.0 / 999.01);
        assert!((ratio - expected).abs() < 1e-9);
        assert!((ratio - 989.1).abs() / 989.1 < 1e-3);
        assert!(w.instance.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn errors() {
        let mut r = rng::stream(0, &[]);
        assert!(weighted_sample(&[], 2, 10, &mut r).is_err());
        assert!(weighted_sample(&[vec![]], 2, 10, &mut r).is_err());
        assert!(weighted_sample(&[vec![3]], 2, 10, &mut r).is_err());
    }

    #[test]
    fn multilabel_instances_sum_weights() {
        let labels = vec![vec![0, 1], vec![1]];
        let w = SamplerWeights::new(&labels, 2).unwrap();
        assert_eq!(w.instance[0], w.class[0] + w.class[1]);
    }
}
