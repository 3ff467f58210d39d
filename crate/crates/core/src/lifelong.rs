//! Sequential task controller.
//!
//! For every task: register its head, train the free weights, measure the
//! reference validation risk, choose a pruning rate (strategy dependent),
//! prune, fine-tune the survivors, then freeze them under the task's
//! ownership. Later tasks only ever write to weights that are still free, and
//! evaluation of task `j` masks out everything claimed after `j`.

use serde::{Deserialize, Serialize};

use crate::boopt::{EvalCache, Evaluation};
use crate::compressor::{prune, retained_shared_count, size_of, CompressionParams, Granularity};
use crate::datagen::{Dataset, DatasetSplit};
use crate::dual::{acll_select, DualSearchConfig, RoundRecord};
use crate::error::{AcllError, Result};
use crate::net::{predict_labels, sgd_train, Network, TrainConfig, WeightMask};
use crate::risk::zero_one_risk;
use crate::taskmask::OwnershipMap;
use crate::TaskId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum Strategy {
    /// Adaptive rate: smallest retained set within `epsilon` of the reference risk.
    Acll { epsilon: f64 },
    /// Fixed fraction of the free weights pruned after every task.
    Fixed { rate: f64 },
    /// One shared network, no pruning, no freezing.
    Finetune,
    /// A fresh network per task.
    Independent,
}

impl Strategy {
    /// Directory-safe name, e.g. `acll_eps0.02` or `fixed_0.5`.
    pub fn label(&self) -> String {
        match self {
            Strategy::Acll { epsilon } => format!("acll_eps{epsilon}"),
            Strategy::Fixed { rate } => format!("fixed_{rate}"),
            Strategy::Finetune => "finetune".into(),
            Strategy::Independent => "independent".into(),
        }
    }

    pub fn uses_masks(&self) -> bool {
        matches!(self, Strategy::Acll { .. } | Strategy::Fixed { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::Acll { epsilon } if !(epsilon.is_finite() && epsilon >= 0.0) => {
                Err(AcllError::InvalidSpec(format!("epsilon must be non-negative, got {epsilon}")))
            }
            Strategy::Fixed { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(AcllError::InvalidSpec(format!("fixed rate must lie in [0, 1], got {rate}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub dataset: Dataset,
    pub train_cfg: TrainConfig,
    pub finetune_cfg: TrainConfig,
}

impl TaskSpec {
    pub fn class_count(&self) -> usize {
        self.dataset.class_count()
    }
}

/// Settings shared by every task of a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LifelongConfig {
    pub hidden: Vec<usize>,
    pub granularity: Granularity,
    /// Search settings; `epsilon` is replaced by the strategy's own value.
    pub dual: DualSearchConfig,
    /// Epochs of the fine-tune inside each candidate evaluation. `None`
    /// means the same epochs as the real post-prune fine-tune.
    pub inner_finetune_epochs: Option<usize>,
}

impl Default for LifelongConfig {
    fn default() -> Self {
        LifelongConfig {
            hidden: vec![64, 64],
            granularity: Granularity::Global,
            dual: DualSearchConfig::default(),
            inner_finetune_epochs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub index: usize,
    pub name: String,
    pub theta: Vec<f64>,
    /// Fraction of all shared weights newly claimed by this task.
    pub size: f64,
    pub retained_weights: usize,
    pub reference_risk: f64,
    /// Validation risk after the post-prune fine-tune.
    pub val_risk: f64,
    /// Validation risk recorded for the chosen theta during selection.
    pub selection_risk: Option<f64>,
    pub infeasible: bool,
    pub lambda_final: Option<f64>,
    pub dual_rounds: Option<usize>,
    pub dual_converged: Option<bool>,
    pub risk_evaluations: usize,
    pub train_loss: f64,
    pub test_acc_post_task: f64,
    pub test_acc_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub strategy: Strategy,
    pub label: String,
    pub seed: u64,
    pub shared_weights: usize,
    pub tasks: Vec<TaskRecord>,
    /// Owned shared weights after each task, as a count and as a fraction.
    pub owned_weights_after_task: Vec<usize>,
    pub owned_fraction_after_task: Vec<f64>,
    pub total_risk_evaluations: usize,
}

impl SequenceReport {
    pub fn average_end_accuracy(&self) -> f64 {
        self.tasks.iter().map(|t| t.test_acc_end).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Audit material for one task: every candidate evaluation and the
/// multiplier trail.
#[derive(Debug, Clone, Default)]
pub struct TaskAudit {
    pub cache: EvalCache,
    pub trail: Vec<RoundRecord>,
}

#[derive(Debug, Clone)]
pub struct SequenceRun {
    pub report: SequenceReport,
    pub audits: Vec<TaskAudit>,
    /// Test-split predictions of task j right after task j was finished.
    pub predictions_post_task: Vec<Vec<usize>>,
    /// Test-split predictions of every task at the end of the sequence.
    pub predictions_end: Vec<Vec<usize>>,
}

/// Deterministic seed for a (task, phase) pair.
pub fn derive_seed(master: u64, task_index: usize, phase: u64) -> u64 {
    let mut z = master
        ^ (task_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ phase.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const PHASE_NET: u64 = 1;
const PHASE_TRAIN: u64 = 2;
const PHASE_FINETUNE: u64 = 3;
const PHASE_REINIT: u64 = 5;

fn seeded(cfg: &TrainConfig, master: u64, task_index: usize, phase: u64) -> TrainConfig {
    TrainConfig { seed: derive_seed(master ^ cfg.seed, task_index, phase), ..*cfg }
}

fn accuracy(predicted: &[usize], split: &DatasetSplit) -> f64 {
    let correct = predicted.iter().zip(&split.labels).filter(|(p, l)| p == l).count();
    correct as f64 / split.len() as f64
}

/// The network of a fresh single-task learner for task `index` (1-based).
fn fresh_network(hidden: &[usize], task: &TaskSpec, seed: u64, index: usize) -> Result<Network> {
    let mut dims = vec![task.dataset.train.inputs.cols()];
    dims.extend_from_slice(hidden);
    dims.push(task.class_count());
    Network::new(&dims, derive_seed(seed, index, PHASE_NET))
}

/// Plain single-task training of task `index` on its own network.
pub fn single_task_baseline(cfg: &LifelongConfig, task: &TaskSpec, seed: u64, index: usize) -> Result<(Network, f64)> {
    let mut net = fresh_network(&cfg.hidden, task, seed, index)?;
    let trainable = WeightMask::ones(net.len());
    let report = sgd_train(&mut net, &trainable, 1, &task.dataset.train, &seeded(&task.train_cfg, seed, index, PHASE_TRAIN))?;
    Ok((net, report.final_loss))
}

/// One learner working through a task sequence.
#[derive(Debug, Clone)]
pub struct LifelongLearner {
    strategy: Strategy,
    cfg: LifelongConfig,
    seed: u64,
    /// One network for shared strategies, one per task for `Independent`.
    nets: Vec<Network>,
    ownership: Option<OwnershipMap>,
    tasks_done: usize,
    owned_after: Vec<usize>,
}

impl LifelongLearner {
    pub fn new(strategy: Strategy, cfg: LifelongConfig, seed: u64) -> Result<Self> {
        strategy.validate()?;
        if cfg.hidden.contains(&0) {
            return Err(AcllError::InvalidSpec("hidden layer widths must be positive".into()));
        }
        Ok(LifelongLearner { strategy, cfg, seed, nets: Vec::new(), ownership: None, tasks_done: 0, owned_after: Vec::new() })
    }

    pub fn network(&self) -> Option<&Network> {
        self.nets.last()
    }

    pub fn ownership(&self) -> Option<&OwnershipMap> {
        self.ownership.as_ref()
    }

    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    /// Network, inference mask and head id used to evaluate task `index`.
    fn eval_target(&self, index: usize) -> Result<(&Network, WeightMask, TaskId)> {
        if index == 0 || index > self.tasks_done {
            return Err(AcllError::InvalidTask { task: index as TaskId, registered: self.tasks_done as TaskId });
        }
        match self.strategy {
            Strategy::Independent => {
                let net = &self.nets[index - 1];
                Ok((net, WeightMask::ones(net.len()), 1))
            }
            Strategy::Finetune => {
                let net = &self.nets[0];
                Ok((net, WeightMask::ones(net.len()), index as TaskId))
            }
            Strategy::Acll { .. } | Strategy::Fixed { .. } => {
                let map = self.ownership.as_ref().expect("mask strategies keep an ownership map");
                Ok((&self.nets[0], map.view_for_task(index as TaskId)?, index as TaskId))
            }
        }
    }

    /// Test-split predictions of the already trained task `index`.
    pub fn predict_test(&self, index: usize, task: &TaskSpec) -> Result<Vec<usize>> {
        let (net, mask, id) = self.eval_target(index)?;
        predict_labels(net, &mask, id, &task.dataset.test.inputs)
    }

    /// Test accuracy of every trained task under its own mask.
    pub fn evaluate_all(&self, tasks: &[TaskSpec]) -> Result<Vec<f64>> {
        tasks
            .iter()
            .take(self.tasks_done)
            .enumerate()
            .map(|(i, t)| Ok(accuracy(&self.predict_test(i + 1, t)?, &t.dataset.test)))
            .collect()
    }

    pub fn train_task(&mut self, task: &TaskSpec) -> Result<(TaskRecord, TaskAudit)> {
        let index = self.tasks_done + 1;
        let (record, audit) = match self.strategy {
            Strategy::Independent => self.train_unmasked(task, index, true)?,
            Strategy::Finetune => self.train_unmasked(task, index, false)?,
            Strategy::Acll { .. } | Strategy::Fixed { .. } => self.train_masked(task, index)?,
        };
        self.tasks_done = index;
        self.owned_after.push(self.ownership.as_ref().map_or(0, OwnershipMap::owned_shared_count));
        Ok((record, audit))
    }

    fn train_unmasked(&mut self, task: &TaskSpec, index: usize, fresh: bool) -> Result<(TaskRecord, TaskAudit)> {
        let id: TaskId;
        let train_loss;
        if fresh {
            let (net, loss) = single_task_baseline(&self.cfg, task, self.seed, index)?;
            self.nets.push(net);
            id = 1;
            train_loss = loss;
        } else {
            if self.nets.is_empty() {
                self.nets.push(fresh_network(&self.cfg.hidden, task, self.seed, 1)?);
            }
            id = index as TaskId;
            let net = &mut self.nets[0];
            net.register_head(id, task.class_count())?;
            let kinds = net.weight_kinds();
            let trainable: WeightMask = kinds
                .iter()
                .map(|k| !matches!(k, crate::net::WeightKind::Head(t) if *t != id))
                .collect();
            let cfg = seeded(&task.train_cfg, self.seed, index, PHASE_TRAIN);
            train_loss = sgd_train(net, &trainable, id, &task.dataset.train, &cfg)?.final_loss;
        }
        let net = self.nets.last().expect("network was just trained");
        let mask = WeightMask::ones(net.len());
        let val = zero_one_risk(net, &mask, id, &task.dataset.val)?;
        let test_acc = zero_one_risk(net, &mask, id, &task.dataset.test)?.accuracy();
        let record = TaskRecord {
            index,
            name: task.name.clone(),
            theta: vec![0.0; self.cfg.granularity.dimension(net)],
            size: 0.0,
            retained_weights: 0,
            reference_risk: val.risk,
            val_risk: val.risk,
            selection_risk: None,
            infeasible: false,
            lambda_final: None,
            dual_rounds: None,
            dual_converged: None,
            risk_evaluations: 0,
            train_loss,
            test_acc_post_task: test_acc,
            test_acc_end: test_acc,
        };
        Ok((record, TaskAudit::default()))
    }

    fn train_masked(&mut self, task: &TaskSpec, index: usize) -> Result<(TaskRecord, TaskAudit)> {
        let id = index as TaskId;
        if self.nets.is_empty() {
            let net = fresh_network(&self.cfg.hidden, task, self.seed, 1)?;
            self.ownership = Some(OwnershipMap::new(&net));
            self.nets.push(net);
        }
        let net = &mut self.nets[0];
        let ownership = self.ownership.as_mut().expect("mask strategies keep an ownership map");

        // (1) head registration, (2) training of free weights.
        net.register_head(id, task.class_count())?;
        ownership.register_task(net, id)?;
        if index > 1 {
            // Pruned weights sit at exactly zero; units fed only by zeros get
            // no gradient through the rectifier, so free weights restart from
            // the initial distribution.
            let free: WeightMask = (0..net.len()).map(|i| ownership.owner(i) == 0).collect();
            net.reinitialize(&free, derive_seed(self.seed, index, PHASE_REINIT))?;
        }
        let trainable = ownership.trainable_mask(id)?;
        let train_cfg = seeded(&task.train_cfg, self.seed, index, PHASE_TRAIN);
        let train_loss = sgd_train(net, &trainable, id, &task.dataset.train, &train_cfg)?.final_loss;

        // (3) reference risk of the uncompressed network.
        let reference = zero_one_risk(net, &ownership.working_view(id)?, id, &task.dataset.val)?;

        // (4) choice of theta.
        let finetune_cfg = seeded(&task.finetune_cfg, self.seed, index, PHASE_FINETUNE);
        let inner_cfg = TrainConfig {
            epochs: self.cfg.inner_finetune_epochs.unwrap_or(finetune_cfg.epochs),
            ..finetune_cfg
        };
        let granularity = self.cfg.granularity;
        let dim = granularity.dimension(net);
        let mut audit = TaskAudit::default();
        let base: &Network = net;
        let owners: &OwnershipMap = ownership;
        let mut evaluate = |theta: &[f64]| -> Result<Evaluation> {
            let params = CompressionParams::new(theta.to_vec(), granularity)?;
            let (candidate, retained) = compress_and_finetune(base, owners, id, &params, &task.dataset.train, &inner_cfg)?;
            let view = post_prune_view(owners, &retained, id)?;
            let risk = zero_one_risk(&candidate, &view, id, &task.dataset.val)?;
            Ok(Evaluation { size: size_of(&retained, owners), risk: risk.risk })
        };

        let mut lambda_final = None;
        let mut dual_rounds = None;
        let mut dual_converged = None;
        let mut infeasible = false;
        let (params, risk_evaluations) = match self.strategy {
            Strategy::Acll { epsilon } => {
                let dual_cfg = DualSearchConfig { epsilon, ..self.cfg.dual };
                let sel = acll_select(&mut evaluate, reference.risk, &dual_cfg, &mut audit.cache, dim)?;
                lambda_final = Some(sel.lambda_final);
                dual_rounds = Some(sel.state.trail.len());
                dual_converged = Some(sel.state.converged);
                infeasible = sel.infeasible;
                audit.trail = sel.state.trail;
                (CompressionParams::new(sel.theta, granularity)?, sel.evaluations)
            }
            Strategy::Fixed { rate } => {
                let params = CompressionParams::new(vec![rate; dim], granularity)?;
                let eval = evaluate(params.theta())?;
                audit.cache.insert(params.theta().to_vec(), eval);
                (params, 1)
            }
            Strategy::Finetune | Strategy::Independent => unreachable!("unmasked strategies"),
        };
        let selection_risk = audit.cache.get(params.theta()).map(|e| e.risk);

        // (5) prune and (6) fine-tune the real network, (7) freeze survivors.
        let (tuned, retained) = compress_and_finetune(net, ownership, id, &params, &task.dataset.train, &finetune_cfg)?;
        *net = tuned;
        let view = post_prune_view(ownership, &retained, id)?;
        let val_risk = zero_one_risk(net, &view, id, &task.dataset.val)?.risk;
        let size = size_of(&retained, ownership);
        let retained_weights = retained_shared_count(&retained, ownership);
        ownership.assign_retained(&retained, id)?;

        let test_acc = zero_one_risk(net, &ownership.view_for_task(id)?, id, &task.dataset.test)?.accuracy();
        let record = TaskRecord {
            index,
            name: task.name.clone(),
            theta: params.theta().to_vec(),
            size,
            retained_weights,
            reference_risk: reference.risk,
            val_risk,
            selection_risk,
            infeasible,
            lambda_final,
            dual_rounds,
            dual_converged,
            risk_evaluations,
            train_loss,
            test_acc_post_task: test_acc,
            test_acc_end: test_acc,
        };
        Ok((record, audit))
    }
}

/// Prunes a copy of `net` and fine-tunes only the survivors and the head.
fn compress_and_finetune(
    net: &Network,
    ownership: &OwnershipMap,
    task: TaskId,
    params: &CompressionParams,
    train: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(Network, WeightMask)> {
    let mut candidate = net.clone();
    let outcome = prune(&mut candidate, ownership, task, params)?;
    let trainable: WeightMask = (0..candidate.len())
        .map(|i| outcome.retained.get(i) || ownership.head_task(i) == Some(task))
        .collect();
    sgd_train(&mut candidate, &trainable, task, train, cfg)?;
    Ok((candidate, outcome.retained))
}

/// What `task` will see once `retained` is assigned to it.
fn post_prune_view(ownership: &OwnershipMap, retained: &WeightMask, task: TaskId) -> Result<WeightMask> {
    let view = ownership.view_for_task(task)?;
    Ok((0..view.len()).map(|i| view.get(i) || retained.get(i)).collect())
}

/// Runs every task in order and reports per-task and end-of-sequence metrics.
pub fn run_sequence(tasks: &[TaskSpec], strategy: Strategy, cfg: &LifelongConfig, seed: u64) -> Result<SequenceRun> {
    if tasks.is_empty() {
        return Err(AcllError::InvalidSpec("a sequence needs at least one task".into()));
    }
    let mut learner = LifelongLearner::new(strategy, cfg.clone(), seed)?;
    let mut records = Vec::with_capacity(tasks.len());
    let mut audits = Vec::with_capacity(tasks.len());
    let mut predictions_post_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (record, audit) = learner.train_task(task).map_err(|e| e.within(format!("task {}", task.name)))?;
        predictions_post_task.push(learner.predict_test(record.index, task)?);
        records.push(record);
        audits.push(audit);
    }
    let predictions_end = (1..=tasks.len())
        .map(|i| learner.predict_test(i, &tasks[i - 1]))
        .collect::<Result<Vec<_>>>()?;
    for ((record, preds), task) in records.iter_mut().zip(&predictions_end).zip(tasks) {
        record.test_acc_end = accuracy(preds, &task.dataset.test);
    }

    let shared_weights = learner.ownership.as_ref().map_or(0, OwnershipMap::shared_count);
    let owned_fraction_after_task = learner
        .owned_after
        .iter()
        .map(|&o| if shared_weights == 0 { 0.0 } else { o as f64 / shared_weights as f64 })
        .collect();
    let report = SequenceReport {
        strategy,
        label: strategy.label(),
        seed,
        shared_weights,
        total_risk_evaluations: records.iter().map(|r| r.risk_evaluations).sum(),
        tasks: records,
        owned_weights_after_task: learner.owned_after.clone(),
        owned_fraction_after_task,
    };
    Ok(SequenceRun { report, audits, predictions_post_task, predictions_end })
}
