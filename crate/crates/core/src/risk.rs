use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSplit;
use crate::error::{AcllError, Result};
use crate::net::{predict_labels, Network, WeightMask};
use crate::TaskId;

/// 0-1 risk of a masked network on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskReading {
    pub risk: f64,
    pub misclassified: usize,
    pub n_samples: usize,
    pub task_id: TaskId,
}

impl RiskReading {
    pub fn accuracy(&self) -> f64 {
        (self.n_samples - self.misclassified) as f64 / self.n_samples as f64
    }
}

pub fn zero_one_risk(net: &Network, mask: &WeightMask, task: TaskId, split: &DatasetSplit) -> Result<RiskReading> {
    if split.is_empty() {
        return Err(AcllError::InvalidData("risk of an empty split is undefined".into()));
    }
    let predicted = predict_labels(net, mask, task, &split.inputs)?;
    let misclassified = predicted.iter().zip(&split.labels).filter(|(p, l)| p != l).count();
    Ok(RiskReading {
        risk: misclassified as f64 / split.len() as f64,
        misclassified,
        n_samples: split.len(),
        task_id: task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::SplitTag;
    use crate::net::Matrix;
    use proptest::prelude::*;

    fn split(xs: &[f64], labels: &[usize], classes: usize) -> DatasetSplit {
        let inputs = Matrix::from_vec(xs.len(), 1, xs.to_vec());
        DatasetSplit::new(inputs, labels.to_vec(), classes, SplitTag::Val).unwrap()
    }

    /// relu(x) feeding logits [0.5, h]: predicts class 1 iff x > 0.5.
    fn threshold_net() -> Network {
        let mut net = Network::new(&[1, 1, 2], 0).unwrap();
        net.weights_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.5, 0.0]);
        net
    }

    #[test]
    fn hand_enumerated_three_of_eight() {
        let net = threshold_net();
        let xs = [-1.0, 0.0, 0.25, 0.4, 0.6, 1.0, 2.0, 3.0];
        // predictions:  0    0    0     0    1    1    1    1
        // labels:       0    1    0     0    1    0    1    0
        // wrong:             x                   x         x
        let s = split(&xs, &[0, 1, 0, 0, 1, 0, 1, 0], 2);
        let r = zero_one_risk(&net, &WeightMask::ones(net.len()), 1, &s).unwrap();
        assert_eq!(r.misclassified, 3);
        assert_eq!(r.risk, 0.375);
        assert_eq!(r.n_samples, 8);
    }

    #[test]
    fn memorized_labels_have_zero_risk() {
        let net = Network::new(&[2, 8, 3], 4).unwrap();
        let mask = WeightMask::ones(net.len());
        let inputs = Matrix::from_vec(10, 2, (0..20).map(|i| (i as f64 * 0.37).sin() * 2.0).collect());
        let labels = predict_labels(&net, &mask, 1, &inputs).unwrap();
        let s = DatasetSplit::new(inputs, labels, 3, SplitTag::Val).unwrap();
        assert_eq!(zero_one_risk(&net, &mask, 1, &s).unwrap().risk, 0.0);
    }

    #[test]
    fn constant_predictor_on_balanced_split() {
        for k in [2usize, 4] {
            let mut net = Network::new(&[1, 3, k], 1).unwrap();
            let head = net.head(1).unwrap();
            // Only the head bias is live; class 0 has the largest bias.
            let bias = head.offset + 3 * k;
            net.weights_mut()[bias] = 1.0;
            let mask: WeightMask = (0..net.len()).map(|i| i >= bias).collect();
            let n = 12 * k;
            let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            let r = zero_one_risk(&net, &mask, 1, &split(&xs, &labels, k)).unwrap();
            assert_eq!(r.risk, 1.0 - 1.0 / k as f64);
        }
    }

    #[test]
    fn empty_split_is_rejected() {
        let net = threshold_net();
        let s = split(&[], &[], 2);
        assert!(matches!(
            zero_one_risk(&net, &WeightMask::ones(net.len()), 1, &s),
            Err(AcllError::InvalidData(_))
        ));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_integral(
            xs in prop::collection::vec(-2.0f64..2.0, 1..40),
            seed in any::<u64>(),
        ) {
            let net = threshold_net();
            let labels: Vec<usize> = (0..xs.len()).map(|i| (i * 7 + seed as usize) % 2).collect();
            let mask = WeightMask::ones(net.len());
            let a = zero_one_risk(&net, &mask, 1, &split(&xs, &labels, 2)).unwrap();
            let mut idx: Vec<usize> = (0..xs.len()).collect();
            idx.rotate_left(seed as usize % xs.len());
            idx.reverse();
            let xs2: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
            let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let b = zero_one_risk(&net, &mask, 1, &split(&xs2, &l2, 2)).unwrap();
            prop_assert_eq!(a, b);
            prop_assert_eq!(a.risk, a.misclassified as f64 / a.n_samples as f64);
        }
    }
}
