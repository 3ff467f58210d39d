//! Per-weight task ownership.
//!
//! Every entry of the weight vector has an owner: `0` while free, `k` once task
//! `k` has claimed it. Ownership is assigned once and never changes. The
//! per-task inference masks are derived from this map on demand.

use serde::{Deserialize, Serialize};

use crate::error::{AcllError, Result};
use crate::net::{Network, WeightKind, WeightMask};
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Shared,
    Bias,
    Head(TaskId),
}

impl From<WeightKind> for Role {
    fn from(kind: WeightKind) -> Self {
        match kind {
            WeightKind::Trunk { .. } => Role::Shared,
            WeightKind::TrunkBias { .. } => Role::Bias,
            WeightKind::Head(t) => Role::Head(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OwnershipMap {
    owner: Vec<TaskId>,
    role: Vec<Role>,
    n_tasks: TaskId,
}

/// Serialized form: the owner vector plus the registered task count. Roles
/// are recovered from the network the map belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipRecord {
    pub n_tasks: TaskId,
    pub owner: Vec<TaskId>,
}

impl OwnershipMap {
    /// Everything free, no tasks registered.
    pub fn new(net: &Network) -> Self {
        let role: Vec<Role> = net.weight_kinds().into_iter().map(Role::from).collect();
        OwnershipMap { owner: vec![0; role.len()], role, n_tasks: 0 }
    }

    /// A map over plain shared weights, without network layout.
    pub fn from_owners(owner: Vec<TaskId>, n_tasks: TaskId) -> Result<Self> {
        if let Some((i, &o)) = owner.iter().enumerate().find(|(_, &o)| o > n_tasks) {
            return Err(AcllError::InvalidSpec(format!(
                "owner[{i}] = {o} exceeds registered task count {n_tasks}"
            )));
        }
        Ok(OwnershipMap { role: vec![Role::Shared; owner.len()], owner, n_tasks })
    }

    pub fn restore(record: OwnershipRecord, net: &Network) -> Result<Self> {
        let mut map = OwnershipMap::new(net);
        if record.owner.len() != map.owner.len() {
            return Err(AcllError::Format(format!(
                "owner vector has {} entries, network has {} weights",
                record.owner.len(),
                map.owner.len()
            )));
        }
        for (i, (&o, &r)) in record.owner.iter().zip(&map.role).enumerate() {
            let head_ok = match r {
                Role::Head(t) => o == 0 || o == t,
                _ => true,
            };
            if o > record.n_tasks || !head_ok {
                return Err(AcllError::Format(format!("owner[{i}] = {o} is inconsistent")));
            }
        }
        map.owner = record.owner;
        map.n_tasks = record.n_tasks;
        Ok(map)
    }

    pub fn record(&self) -> OwnershipRecord {
        OwnershipRecord { n_tasks: self.n_tasks, owner: self.owner.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.owner.len());
        out.extend_from_slice(&self.n_tasks.to_le_bytes());
        out.extend_from_slice(&(self.owner.len() as u64).to_le_bytes());
        for o in &self.owner {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], net: &Network) -> Result<Self> {
        let short = || AcllError::Format("truncated ownership record".into());
        if bytes.len() < 12 {
            return Err(short());
        }
        let n_tasks = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * len {
            return Err(short());
        }
        let owner = bytes[12..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        OwnershipMap::restore(OwnershipRecord { n_tasks, owner }, net)
    }

    pub fn n_tasks(&self) -> TaskId {
        self.n_tasks
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn owners(&self) -> &[TaskId] {
        &self.owner
    }

    pub fn owner(&self, i: usize) -> TaskId {
        self.owner[i]
    }

    /// Shared trunk connection weight (prunable, counted by size).
    pub fn is_shared(&self, i: usize) -> bool {
        self.role[i] == Role::Shared
    }

    pub fn is_bias(&self, i: usize) -> bool {
        self.role[i] == Role::Bias
    }

    pub fn head_task(&self, i: usize) -> Option<TaskId> {
        match self.role[i] {
            Role::Head(t) => Some(t),
            _ => None,
        }
    }

    pub fn shared_count(&self) -> usize {
        self.role.iter().filter(|&&r| r == Role::Shared).count()
    }

    pub fn free_shared_count(&self) -> usize {
        self.role.iter().zip(&self.owner).filter(|(&r, &o)| r == Role::Shared && o == 0).count()
    }

    pub fn owned_shared_count(&self) -> usize {
        self.shared_count() - self.free_shared_count()
    }

    /// Number of entries owned by `task`.
    pub fn owned_by(&self, task: TaskId) -> usize {
        self.owner.iter().filter(|&&o| o == task).count()
    }

    /// Registers the next task: `task` must be `n_tasks + 1` and `net` must
    /// already carry its head. The head slice is owned by `task` from here on.
    pub fn register_task(&mut self, net: &Network, task: TaskId) -> Result<()> {
        if task != self.n_tasks + 1 {
            return Err(AcllError::Sequencing(format!(
                "expected task {}, got {task}",
                self.n_tasks + 1
            )));
        }
        let head = net.head(task).ok_or(AcllError::InvalidTask { task, registered: self.n_tasks })?;
        if net.len() < self.owner.len() {
            return Err(AcllError::Shape("network shrank since the map was built".into()));
        }
        let kinds = net.weight_kinds();
        for kind in &kinds[self.owner.len()..] {
            self.role.push(Role::from(*kind));
            self.owner.push(0);
        }
        let head_len = (net.feature_dim() + 1) * head.class_count;
        for o in &mut self.owner[head.offset..head.offset + head_len] {
            *o = task;
        }
        self.n_tasks = task;
        Ok(())
    }

    fn check_task(&self, task: TaskId) -> Result<()> {
        if task == 0 || task > self.n_tasks {
            return Err(AcllError::InvalidTask { task, registered: self.n_tasks });
        }
        Ok(())
    }

    fn other_head(&self, i: usize, task: TaskId) -> bool {
        matches!(self.role[i], Role::Head(t) if t != task)
    }

    /// Inference mask for `task`: weights owned by tasks `1..=task`, minus the
    /// heads of other tasks.
    pub fn view_for_task(&self, task: TaskId) -> Result<WeightMask> {
        self.check_task(task)?;
        Ok((0..self.owner.len())
            .map(|i| (1..=task).contains(&self.owner[i]) && !self.other_head(i, task))
            .collect())
    }

    /// The view of `task` plus every free non-head weight. This is what the
    /// newest task computes with before its retained set is assigned.
    pub fn working_view(&self, task: TaskId) -> Result<WeightMask> {
        self.check_task(task)?;
        Ok((0..self.owner.len())
            .map(|i| {
                let o = self.owner[i];
                !self.other_head(i, task) && (o == 0 || o <= task)
            })
            .collect())
    }

    /// Weights the newest task may update: everything free plus its own head.
    pub fn trainable_mask(&self, task: TaskId) -> Result<WeightMask> {
        self.check_task(task)?;
        if task != self.n_tasks {
            return Err(AcllError::Sequencing(format!(
                "only the newest task ({}) can train, got {task}",
                self.n_tasks
            )));
        }
        Ok((0..self.owner.len())
            .map(|i| {
                let own_head = self.head_task(i) == Some(task);
                own_head || (self.owner[i] == 0 && !self.other_head(i, task))
            })
            .collect())
    }

    /// Hands every weight marked in `retained` to `task`. Either every entry
    /// is assigned or, on error, none is.
    pub fn assign_retained(&mut self, retained: &WeightMask, task: TaskId) -> Result<()> {
        self.check_task(task)?;
        if retained.len() != self.owner.len() {
            return Err(AcllError::Shape(format!(
                "retained mask has {} entries, map has {}",
                retained.len(),
                self.owner.len()
            )));
        }
        if let Some(i) = retained.ones_indices().find(|&i| self.owner[i] != 0) {
            return Err(AcllError::OwnershipViolation { index: i, owner: self.owner[i] });
        }
        for i in retained.ones_indices() {
            self.owner[i] = task;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> WeightMask {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn view_examples() {
        let map = OwnershipMap::from_owners(vec![1, 0, 2, 1], 2).unwrap();
        assert_eq!(map.view_for_task(1).unwrap(), mask(&[1, 0, 0, 1]));
        assert_eq!(map.view_for_task(2).unwrap(), mask(&[1, 0, 1, 1]));
        let last: WeightMask = map.owners().iter().map(|&o| o != 0).collect();
        assert_eq!(map.view_for_task(map.n_tasks()).unwrap(), last);
        assert!(matches!(map.view_for_task(3), Err(AcllError::InvalidTask { .. })));
        assert!(matches!(map.view_for_task(0), Err(AcllError::InvalidTask { .. })));
    }

    #[test]
    fn trainable_examples() {
        let mut net = Network::new(&[1, 2, 2], 0).unwrap();
        let mut map = OwnershipMap::new(&net);
        map.register_task(&net, 1).unwrap();
        assert_eq!(map.trainable_mask(1).unwrap(), WeightMask::ones(net.len()));

        // Claim shared weights 0 and 2 for task 1, leave 1 and 3 free.
        let mut retained = WeightMask::zeros(net.len());
        retained.set(0, true);
        map.assign_retained(&retained, 1).unwrap();
        net.register_head(2, 3).unwrap();
        map.register_task(&net, 2).unwrap();
        let mut retained = WeightMask::zeros(net.len());
        retained.set(2, true);
        map.assign_retained(&retained, 2).unwrap();
        net.register_head(3, 2).unwrap();
        map.register_task(&net, 3).unwrap();
        assert_eq!(&map.owners()[..4], &[1, 0, 2, 0]);

        let trainable = map.trainable_mask(3).unwrap();
        assert_eq!(&trainable.as_slice()[..4], &[false, true, false, true]);
        let h3 = net.head(3).unwrap();
        for i in 0..net.len() {
            if i >= 4 {
                assert_eq!(trainable.get(i), i >= h3.offset, "index {i}");
            }
        }
        assert!(matches!(map.trainable_mask(2), Err(AcllError::Sequencing(_))));
    }

    #[test]
    fn exhausted_capacity_trains_only_head() {
        let mut net = Network::new(&[2, 3, 2], 0).unwrap();
        let mut map = OwnershipMap::new(&net);
        map.register_task(&net, 1).unwrap();
        let all_free: WeightMask = (0..net.len()).map(|i| map.owner(i) == 0).collect();
        map.assign_retained(&all_free, 1).unwrap();
        net.register_head(2, 2).unwrap();
        map.register_task(&net, 2).unwrap();
        let trainable = map.trainable_mask(2).unwrap();
        let h2 = net.head(2).unwrap();
        let expected: WeightMask = (0..net.len()).map(|i| i >= h2.offset).collect();
        assert_eq!(trainable, expected);
    }

    #[test]
    fn assign_examples() {
        let mut map = OwnershipMap::from_owners(vec![1, 0, 0], 2).unwrap();
        map.assign_retained(&mask(&[0, 1, 0]), 2).unwrap();
        assert_eq!(map.owners(), &[1, 2, 0]);

        let before = map.clone();
        map.assign_retained(&mask(&[0, 0, 0]), 2).unwrap();
        assert_eq!(map, before);

        let mut map = OwnershipMap::from_owners(vec![1, 0, 0], 1).unwrap();
        let err = map.assign_retained(&mask(&[1, 0, 0]), 1).unwrap_err();
        assert!(matches!(err, AcllError::OwnershipViolation { index: 0, owner: 1 }));
        // Partial overlap leaves the map untouched.
        let mut map = OwnershipMap::from_owners(vec![0, 1, 0], 1).unwrap();
        assert!(map.assign_retained(&mask(&[1, 1, 0]), 1).is_err());
        assert_eq!(map.owners(), &[0, 1, 0]);
    }

    #[test]
    fn registration_is_sequential_and_owns_heads() {
        let mut net = Network::new(&[2, 3, 2], 0).unwrap();
        let mut map = OwnershipMap::new(&net);
        assert!(matches!(map.register_task(&net, 2), Err(AcllError::Sequencing(_))));
        map.register_task(&net, 1).unwrap();
        net.register_head(2, 4).unwrap();
        map.register_task(&net, 2).unwrap();
        let h2 = net.head(2).unwrap();
        assert_eq!(map.owned_by(2), 4 * 4);
        assert_eq!(map.owner(h2.offset), 2);
        // Task 2 does not see task 1's head, and vice versa.
        let v2 = map.view_for_task(2).unwrap();
        let h1 = net.head(1).unwrap();
        assert!(!v2.get(h1.offset));
        assert!(v2.get(h2.offset));
        assert!(!map.view_for_task(1).unwrap().get(h2.offset));
    }

    #[test]
    fn record_round_trip() {
        let mut net = Network::new(&[2, 3, 2], 0).unwrap();
        let mut map = OwnershipMap::new(&net);
        map.register_task(&net, 1).unwrap();
        let mut retained = WeightMask::zeros(net.len());
        retained.set(1, true);
        retained.set(4, true);
        map.assign_retained(&retained, 1).unwrap();
        net.register_head(2, 3).unwrap();
        map.register_task(&net, 2).unwrap();

        let back = OwnershipMap::from_bytes(&map.to_bytes(), &net).unwrap();
        assert_eq!(back, map);
        let json = serde_json::to_string(&map.record()).unwrap();
        let rec: OwnershipRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(OwnershipMap::restore(rec, &net).unwrap(), map);
        assert!(OwnershipMap::from_bytes(&map.to_bytes()[..10], &net).is_err());
    }

    proptest! {
        #[test]
        fn views_nest_on_shared_weights(owner in prop::collection::vec(0u32..5, 1..64)) {
            let map = OwnershipMap::from_owners(owner, 4).unwrap();
            for j in 1..=4 {
                for k in j..=4 {
                    let vj = map.view_for_task(j).unwrap();
                    let vk = map.view_for_task(k).unwrap();
                    for i in 0..map.len() {
                        prop_assert!(!vj.get(i) || vk.get(i));
                    }
                }
            }
        }

        #[test]
        fn assignment_is_monotone(
            owner in prop::collection::vec(0u32..3, 1..64),
            retain in prop::collection::vec(any::<bool>(), 64),
        ) {
            let mut map = OwnershipMap::from_owners(owner.clone(), 3).unwrap();
            let retained: WeightMask = (0..owner.len()).map(|i| retain[i] && owner[i] == 0).collect();
            map.assign_retained(&retained, 3).unwrap();
            for (i, &o) in owner.iter().enumerate() {
                if o != 0 {
                    prop_assert_eq!(map.owner(i), o);
                } else {
                    prop_assert_eq!(map.owner(i), if retained.get(i) { 3 } else { 0 });
                }
            }
        }
    }
}
