//! Magnitude pruning as a parametrized compression family.
//!
//! `theta_g` is the fraction of the currently free shared weights of group
//! `g` that gets zeroed. Groups are either the whole trunk (global, d = 1) or
//! one group per trunk layer. Biases and head weights are never pruned.

use serde::{Deserialize, Serialize};

use crate::error::{AcllError, Result};
use crate::net::{Network, WeightKind, WeightMask};
use crate::taskmask::OwnershipMap;
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    Global,
    PerLayer,
}

impl Granularity {
    pub fn dimension(self, net: &Network) -> usize {
        match self {
            Granularity::Global => 1,
            Granularity::PerLayer => net.trunk_layers().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionParams {
    theta: Vec<f64>,
    granularity: Granularity,
}

impl CompressionParams {
    pub fn new(theta: Vec<f64>, granularity: Granularity) -> Result<Self> {
        if theta.is_empty() {
            return Err(AcllError::InvalidSpec("theta must have at least one component".into()));
        }
        if granularity == Granularity::Global && theta.len() != 1 {
            return Err(AcllError::InvalidSpec(format!(
                "global granularity takes one component, got {}",
                theta.len()
            )));
        }
        if let Some(bad) = theta.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(AcllError::InvalidSpec(format!("theta component {bad} outside [0, 1]")));
        }
        Ok(Self { theta, granularity })
    }

    pub fn global(theta: f64) -> Result<Self> {
        Self::new(vec![theta], Granularity::Global)
    }

    /// Same fraction everywhere, shaped for `granularity` on `net`.
    pub fn uniform(theta: f64, granularity: Granularity, net: &Network) -> Result<Self> {
        Self::new(vec![theta; granularity.dimension(net)], granularity)
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    /// Free weights kept by the current task (shared weights that survived
    /// plus free biases). Never marks a weight that already has an owner.
    pub retained: WeightMask,
    pub pruned: usize,
    pub pruned_per_group: Vec<usize>,
}

/// A compression family: maps parameters to a retained set on the newest task.
pub trait CompressionFamily {
    fn dimension(&self, net: &Network) -> usize;

    fn compress(
        &self,
        net: &mut Network,
        ownership: &OwnershipMap,
        task: TaskId,
        params: &CompressionParams,
    ) -> Result<PruneOutcome>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MagnitudePruning {
    pub granularity: Granularity,
}

impl CompressionFamily for MagnitudePruning {
    fn dimension(&self, net: &Network) -> usize {
        self.granularity.dimension(net)
    }

    fn compress(
        &self,
        net: &mut Network,
        ownership: &OwnershipMap,
        task: TaskId,
        params: &CompressionParams,
    ) -> Result<PruneOutcome> {
        prune(net, ownership, task, params)
    }
}

/// Zeroes the `floor(theta_g * n_g)` smallest-magnitude free shared weights
/// of each group (ties broken by lower index) and reports what was kept.
pub fn prune(
    net: &mut Network,
    ownership: &OwnershipMap,
    task: TaskId,
    params: &CompressionParams,
) -> Result<PruneOutcome> {
    if task == 0 || task != ownership.n_tasks() {
        return Err(AcllError::Sequencing(format!(
            "only the newest task ({}) can be pruned, got {task}",
            ownership.n_tasks()
        )));
    }
    if ownership.len() != net.len() {
        return Err(AcllError::Shape(format!(
            "ownership covers {} weights, network has {}",
            ownership.len(),
            net.len()
        )));
    }
    let d = params.granularity().dimension(net);
    if params.dim() != d {
        return Err(AcllError::InvalidSpec(format!(
            "theta has {} components, {:?} pruning on this network needs {d}",
            params.dim(),
            params.granularity()
        )));
    }

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); d];
    for (i, kind) in net.weight_kinds().into_iter().enumerate() {
        if let WeightKind::Trunk { layer } = kind {
            if ownership.owner(i) == 0 {
                let g = match params.granularity() {
                    Granularity::Global => 0,
                    Granularity::PerLayer => layer,
                };
                groups[g].push(i);
            }
        }
    }

    let mut retained: WeightMask =
        (0..net.len()).map(|i| ownership.owner(i) == 0 && ownership.is_bias(i)).collect();
    let mut pruned_per_group = Vec::with_capacity(d);
    let weights = net.weights_mut();
    for (mut group, &theta) in groups.into_iter().zip(params.theta()) {
        let n_prune = prune_count(theta, group.len());
        group.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b)));
        for &i in &group[..n_prune] {
            weights[i] = 0.0;
        }
        for &i in &group[n_prune..] {
            retained.set(i, true);
        }
        pruned_per_group.push(n_prune);
    }
    Ok(PruneOutcome { pruned: pruned_per_group.iter().sum(), retained, pruned_per_group })
}

/// `floor(theta * n)`, clamped to `n`.
pub fn prune_count(theta: f64, n: usize) -> usize {
    ((theta * n as f64).floor() as usize).min(n)
}

/// Newly retained shared weights as a fraction of all shared weights.
pub fn size_of(retained: &WeightMask, ownership: &OwnershipMap) -> f64 {
    let total = ownership.shared_count();
    if total == 0 {
        return 0.0;
    }
    retained_shared_count(retained, ownership) as f64 / total as f64
}

pub fn retained_shared_count(retained: &WeightMask, ownership: &OwnershipMap) -> usize {
    retained.ones_indices().filter(|&i| ownership.is_shared(i)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatasetSplit, SplitTag};
    use crate::net::{Matrix, TrainConfig};
    use proptest::prelude::*;

    fn fresh(dims: &[usize], seed: u64) -> (Network, OwnershipMap) {
        let net = Network::new(dims, seed).unwrap();
        let mut map = OwnershipMap::new(&net);
        map.register_task(&net, 1).unwrap();
        (net, map)
    }

    /// Rank oracle: weight i is pruned iff fewer than k weights precede it in
    /// (|w|, index) order.
    fn oracle_pruned(w: &[f64], group: &[usize], k: usize) -> Vec<usize> {
        group
            .iter()
            .copied()
            .filter(|&i| {
                let rank = group
                    .iter()
                    .filter(|&&j| w[j].abs() < w[i].abs() || (w[j].abs() == w[i].abs() && j < i))
                    .count();
                rank < k
            })
            .collect()
    }

    #[test]
    fn four_weight_example() {
        let (mut net, map) = fresh(&[1, 4, 2], 0);
        net.weights_mut()[..4].copy_from_slice(&[0.5, -0.1, 0.3, -0.7]);
        let before = net.weights().to_vec();
        let out = prune(&mut net, &map, 1, &CompressionParams::global(0.5).unwrap()).unwrap();
        let expected = oracle_pruned(&before, &[0, 1, 2, 3], 2);
        assert_eq!(expected, vec![1, 2]);
        assert_eq!(out.pruned, 2);
        assert_eq!(&net.weights()[..4], &[0.5, 0.0, 0.0, -0.7]);
        assert_eq!(&out.retained.as_slice()[..4], &[true, false, false, true]);
        // Biases are kept, heads are already owned and therefore not retained.
        assert!(out.retained.as_slice()[4..8].iter().all(|&b| b));
        assert!(out.retained.as_slice()[8..].iter().all(|&b| !b));
    }

    #[test]
    fn identity_and_total_pruning() {
        let (mut net, map) = fresh(&[2, 6, 5, 3], 4);
        let before = net.clone();
        let out = prune(&mut net, &map, 1, &CompressionParams::global(0.0).unwrap()).unwrap();
        assert_eq!(out.pruned, 0);
        assert_eq!(net, before);
        assert_eq!(size_of(&out.retained, &map), 1.0);

        let out = prune(&mut net, &map, 1, &CompressionParams::global(1.0).unwrap()).unwrap();
        assert_eq!(out.pruned, map.shared_count());
        assert_eq!(size_of(&out.retained, &map), 0.0);
        for (i, kind) in net.weight_kinds().iter().enumerate() {
            if matches!(kind, WeightKind::Trunk { .. }) {
                assert_eq!(net.weights()[i], 0.0);
            }
        }
    }

    #[test]
    fn quarter_size_on_hundred_weights() {
        let (mut net, map) = fresh(&[10, 10, 2], 1);
        assert_eq!(map.shared_count(), 100);
        let out = prune(&mut net, &map, 1, &CompressionParams::global(0.75).unwrap()).unwrap();
        assert_eq!(out.pruned, 75);
        assert_eq!(retained_shared_count(&out.retained, &map), 25);
        assert_eq!(size_of(&out.retained, &map), 0.25);
    }

    #[test]
    fn per_layer_counts_are_exact() {
        let (mut net, map) = fresh(&[3, 7, 5, 2], 2);
        let params = CompressionParams::new(vec![0.3, 0.9], Granularity::PerLayer).unwrap();
        let out = prune(&mut net, &map, 1, &params).unwrap();
        assert_eq!(out.pruned_per_group, vec![prune_count(0.3, 21), prune_count(0.9, 35)]);
        assert_eq!(out.pruned_per_group, vec![6, 31]);
        let wrong_dim = CompressionParams::new(vec![0.3, 0.3, 0.3], Granularity::PerLayer).unwrap();
        assert!(prune(&mut net, &map, 1, &wrong_dim).is_err());
    }

    #[test]
    fn params_validation() {
        assert!(CompressionParams::global(1.5).is_err());
        assert!(CompressionParams::global(-0.1).is_err());
        assert!(CompressionParams::new(vec![0.1, 0.2], Granularity::Global).is_err());
        assert!(CompressionParams::new(vec![], Granularity::PerLayer).is_err());
    }

    #[test]
    fn only_newest_task_prunes() {
        let (mut net, mut map) = fresh(&[2, 4, 2], 0);
        net.register_head(2, 2).unwrap();
        map.register_task(&net, 2).unwrap();
        let p = CompressionParams::global(0.5).unwrap();
        assert!(matches!(prune(&mut net, &map, 1, &p), Err(AcllError::Sequencing(_))));
    }

    #[test]
    fn pruned_forward_matches_zeroed_forward() {
        let (net, map) = fresh(&[2, 8, 8, 3], 6);
        let mut pruned = net.clone();
        let out = prune(&mut pruned, &map, 1, &CompressionParams::global(0.6).unwrap()).unwrap();
        let view = map.working_view(1).unwrap();
        let x = Matrix::from_rows(&[vec![0.2, 0.4], vec![-1.0, 2.0]]).unwrap();
        let mut zeroed = net.clone();
        for (i, kind) in net.weight_kinds().iter().enumerate() {
            if matches!(kind, WeightKind::Trunk { .. }) && !out.retained.get(i) {
                zeroed.weights_mut()[i] = 0.0;
            }
        }
        assert_eq!(pruned.forward(&view, 1, &x).unwrap(), zeroed.forward_unmasked(1, &x).unwrap());
    }

    #[test]
    fn never_touches_owned_weights() {
        let (mut net, mut map) = fresh(&[2, 6, 2], 3);
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let split = DatasetSplit::new(x, vec![0, 1], 2, SplitTag::Train).unwrap();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        crate::net::sgd_train(&mut net, &map.trainable_mask(1).unwrap(), 1, &split, &cfg).unwrap();
        let out = prune(&mut net, &map, 1, &CompressionParams::global(0.5).unwrap()).unwrap();
        map.assign_retained(&out.retained, 1).unwrap();
        net.register_head(2, 2).unwrap();
        map.register_task(&net, 2).unwrap();
        let before = net.clone();
        prune(&mut net, &map, 2, &CompressionParams::global(1.0).unwrap()).unwrap();
        for i in 0..before.len() {
            if map.owner(i) != 0 {
                assert_eq!(net.weights()[i].to_bits(), before.weights()[i].to_bits());
            }
        }
    }

    proptest! {
        #[test]
        fn size_is_monotone_in_theta(seed in 0u64..500, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (net, map) = fresh(&[2, 9, 7, 2], seed);
            let size = |t: f64| {
                let mut n = net.clone();
                let out = prune(&mut n, &map, 1, &CompressionParams::global(t).unwrap()).unwrap();
                size_of(&out.retained, &map)
            };
            prop_assert!(size(hi) <= size(lo));
        }

        #[test]
        fn pruned_set_matches_rank_oracle(seed in 0u64..500, theta in 0.0f64..=1.0) {
            let (mut net, map) = fresh(&[3, 5, 4, 2], seed);
            // Force some magnitude ties.
            for i in (0..15).step_by(4) {
                net.weights_mut()[i] = 0.25;
            }
            let before = net.weights().to_vec();
            let group: Vec<usize> = net
                .weight_kinds()
                .iter()
                .enumerate()
                .filter(|(_, k)| matches!(k, WeightKind::Trunk { .. }))
                .map(|(i, _)| i)
                .collect();
            let k = prune_count(theta, group.len());
            let out = prune(&mut net, &map, 1, &CompressionParams::global(theta).unwrap()).unwrap();
            prop_assert_eq!(out.pruned, k);
            let expected = oracle_pruned(&before, &group, k);
            let actual: Vec<usize> = group.iter().copied().filter(|&i| !out.retained.get(i)).collect();
            prop_assert_eq!(expected, actual);
        }
    }
}
