//! Dense feedforward classifier with a shared rectifier trunk and one private
//! output head per task.
//!
//! All parameters live in a single flat `Vec<f64>`. Each trunk layer occupies
//! `fan_out * fan_in` weights (row-major, one row per output unit) followed by
//! `fan_out` biases; head slices use the same layout and are appended in
//! registration order. Masks are aligned with this vector.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datagen::DatasetSplit;
use crate::error::{AcllError, Result};
use crate::TaskId;

/// Row-major real matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AcllError::Shape("ragged rows".into()));
        }
        Ok(Self::from_vec(rows.len(), cols, rows.concat()))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Copies the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }
}

/// Binary mask aligned with a network's flat weight vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightMask(Vec<bool>);

impl WeightMask {
    pub fn ones(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }

    pub fn ones_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

impl From<Vec<bool>> for WeightMask {
    fn from(v: Vec<bool>) -> Self {
        Self(v)
    }
}

impl FromIterator<bool> for WeightMask {
    fn from_iter<I: IntoIterator<Item = bool>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerSlice {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn is_empty(&self) -> bool {
        self.fan_out == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSlice {
    pub offset: usize,
    pub class_count: usize,
}

/// Role of a single entry in the flat weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    /// Shared trunk connection weight in trunk layer `layer`.
    Trunk { layer: usize },
    TrunkBias { layer: usize },
    /// Any weight or bias of a task's private head.
    Head(TaskId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    PlainSgd,
    MomentumSgd,
}

const MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
            optimizer: Optimizer::PlainSgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(AcllError::InvalidSpec("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(AcllError::InvalidSpec(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(AcllError::InvalidSpec("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRecord", into = "NetworkRecord")]
pub struct Network {
    layer_dims: Vec<usize>,
    seed: u64,
    weights: Vec<f64>,
    layers: Vec<LayerSlice>,
    heads: BTreeMap<TaskId, HeadSlice>,
}

#[derive(Serialize, Deserialize)]
struct NetworkRecord {
    layer_dims: Vec<usize>,
    seed: u64,
    heads: Vec<HeadEntry>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadEntry {
    task: TaskId,
    offset: usize,
    class_count: usize,
}

impl From<Network> for NetworkRecord {
    fn from(net: Network) -> Self {
        NetworkRecord {
            heads: net
                .heads
                .iter()
                .map(|(&task, h)| HeadEntry { task, offset: h.offset, class_count: h.class_count })
                .collect(),
            layer_dims: net.layer_dims,
            seed: net.seed,
            weights: net.weights,
        }
    }
}

impl TryFrom<NetworkRecord> for Network {
    type Error = AcllError;

    fn try_from(rec: NetworkRecord) -> Result<Self> {
        let heads = rec.heads.iter().map(|h| (h.task, h.offset, h.class_count)).collect::<Vec<_>>();
        Network::from_parts(rec.layer_dims, rec.seed, &heads, rec.weights)
    }
}

const BINARY_MAGIC: &[u8; 8] = b"ACLLNET\x01";

impl Network {
    /// Builds a network for `layer_dims = [input, hidden.., classes]`.
    ///
    /// The last entry sizes the head of task 1, which is registered here.
    /// Connection weights are `N(0, 1) / sqrt(fan_in)`; biases start at zero.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(AcllError::InvalidSpec(format!(
                "layer_dims needs at least two positive entries, got {layer_dims:?}"
            )));
        }
        let layers = trunk_layout(layer_dims);
        let trunk_len = layers.last().map_or(0, |l| l.offset + l.len());
        let mut net = Network {
            layer_dims: layer_dims.to_vec(),
            seed,
            weights: vec![0.0; trunk_len],
            layers,
            heads: BTreeMap::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.layers.clone() {
            fill_weights(&mut net.weights[layer.weight_range()], layer.fan_in, &mut rng);
        }
        net.register_head(1, layer_dims[layer_dims.len() - 1])?;
        Ok(net)
    }

    /// Redraws the trunk connection weights selected by `which` from the
    /// initial distribution. Biases and heads are left alone.
    pub fn reinitialize(&mut self, which: &WeightMask, seed: u64) -> Result<()> {
        if which.len() != self.weights.len() {
            return Err(AcllError::Shape(format!(
                "mask has {} entries, network has {} weights",
                which.len(),
                self.weights.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &self.layers {
            let scale = 1.0 / (layer.fan_in as f64).sqrt();
            for i in layer.weight_range() {
                if which.get(i) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    self.weights[i] = z * scale;
                }
            }
        }
        Ok(())
    }

    fn from_parts(
        layer_dims: Vec<usize>,
        seed: u64,
        heads: &[(TaskId, usize, usize)],
        weights: Vec<f64>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(AcllError::Format(format!("bad layer_dims {layer_dims:?}")));
        }
        let layers = trunk_layout(&layer_dims);
        let mut expected = layers.last().map_or(0, |l| l.offset + l.len());
        let feature_dim = layer_dims[layer_dims.len() - 2];
        let mut head_map = BTreeMap::new();
        let mut sorted = heads.to_vec();
        sorted.sort_by_key(|h| h.1);
        for (task, offset, class_count) in sorted {
            if offset != expected || class_count == 0 || head_map.contains_key(&task) {
                return Err(AcllError::Format(format!("head for task {task} has inconsistent layout")));
            }
            head_map.insert(task, HeadSlice { offset, class_count });
            expected += (feature_dim + 1) * class_count;
        }
        if weights.len() != expected {
            return Err(AcllError::Format(format!(
                "expected {expected} weights, found {}",
                weights.len()
            )));
        }
        Ok(Network { layer_dims, seed, weights, layers, heads: head_map })
    }

    /// Appends a freshly initialized head for `task`. Returns `false` when the
    /// task already has a head of the same width.
    pub fn register_head(&mut self, task: TaskId, class_count: usize) -> Result<bool> {
        if class_count == 0 {
            return Err(AcllError::InvalidSpec("head needs at least one class".into()));
        }
        if let Some(existing) = self.heads.get(&task) {
            if existing.class_count == class_count {
                return Ok(false);
            }
            return Err(AcllError::InvalidSpec(format!(
                "task {task} already has a {}-class head",
                existing.class_count
            )));
        }
        let fan_in = self.feature_dim();
        let offset = self.weights.len();
        self.weights.resize(offset + (fan_in + 1) * class_count, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::from(task));
        fill_weights(&mut self.weights[offset..offset + fan_in * class_count], fan_in, &mut rng);
        self.heads.insert(task, HeadSlice { offset, class_count });
        Ok(true)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Width of the last trunk layer, i.e. the input width of every head.
    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn trunk_layers(&self) -> &[LayerSlice] {
        &self.layers
    }

    pub fn head(&self, task: TaskId) -> Option<HeadSlice> {
        self.heads.get(&task).copied()
    }

    pub fn heads(&self) -> impl Iterator<Item = (TaskId, HeadSlice)> + '_ {
        self.heads.iter().map(|(&t, &h)| (t, h))
    }

    pub fn class_count(&self, task: TaskId) -> Option<usize> {
        self.head(task).map(|h| h.class_count)
    }

    /// Role of every entry of the weight vector, in index order.
    pub fn weight_kinds(&self) -> Vec<WeightKind> {
        let mut kinds = Vec::with_capacity(self.weights.len());
        for (l, layer) in self.layers.iter().enumerate() {
            kinds.extend(std::iter::repeat_n(WeightKind::Trunk { layer: l }, layer.fan_in * layer.fan_out));
            kinds.extend(std::iter::repeat_n(WeightKind::TrunkBias { layer: l }, layer.fan_out));
        }
        let mut by_offset: Vec<_> = self.heads.iter().collect();
        by_offset.sort_by_key(|(_, h)| h.offset);
        let head_len = self.feature_dim() + 1;
        for (&task, h) in by_offset {
            kinds.extend(std::iter::repeat_n(WeightKind::Head(task), head_len * h.class_count));
        }
        kinds
    }

    fn head_or_err(&self, task: TaskId) -> Result<HeadSlice> {
        self.head(task).ok_or(AcllError::InvalidTask {
            task,
            registered: self.heads.keys().copied().max().unwrap_or(0),
        })
    }

    fn check_batch(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(AcllError::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &WeightMask) -> Result<()> {
        if mask.len() != self.weights.len() {
            return Err(AcllError::Shape(format!(
                "mask has {} entries, network has {} weights",
                mask.len(),
                self.weights.len()
            )));
        }
        Ok(())
    }

    /// Logits for `task` with every weight where `mask` is false treated as 0.
    pub fn forward(&self, mask: &WeightMask, task: TaskId, batch: &Matrix) -> Result<Matrix> {
        self.check_mask(mask)?;
        let masked: Vec<f64> = self
            .weights
            .iter()
            .zip(mask.iter())
            .map(|(&w, keep)| if keep { w } else { 0.0 })
            .collect();
        self.logits_with(&masked, task, batch)
    }

    /// Logits using the raw weights.
    pub fn forward_unmasked(&self, task: TaskId, batch: &Matrix) -> Result<Matrix> {
        self.logits_with(&self.weights, task, batch)
    }

    fn logits_with(&self, w: &[f64], task: TaskId, batch: &Matrix) -> Result<Matrix> {
        let head = self.head_or_err(task)?;
        self.check_batch(batch)?;
        let mut out = Matrix::zeros(batch.rows(), head.class_count);
        let mut scratch = Scratch::new(self, head.class_count);
        for r in 0..batch.rows() {
            self.forward_sample(w, head, batch.row(r), &mut scratch);
            out.row_mut(r).copy_from_slice(&scratch.logits);
        }
        Ok(out)
    }

    fn forward_sample(&self, w: &[f64], head: HeadSlice, x: &[f64], s: &mut Scratch) {
        for (l, layer) in self.layers.iter().enumerate() {
            let (before, after) = s.acts.split_at_mut(l + 1);
            let input: &[f64] = if l == 0 { x } else { &before[l] };
            let out = &mut after[0];
            dense(w, layer.offset, layer.fan_in, layer.fan_out, input, out);
            for v in out.iter_mut() {
                *v = v.max(0.0);
            }
        }
        let features: &[f64] = if self.layers.is_empty() { x } else { &s.acts[self.layers.len()] };
        dense(w, head.offset, self.feature_dim(), head.class_count, features, &mut s.logits);
    }

    /// Adds the gradient of the summed cross-entropy over `rows` into `grad`
    /// and returns the summed loss.
    #[allow(clippy::too_many_arguments)]
    fn accumulate_gradient(
        &self,
        w: &[f64],
        head: HeadSlice,
        inputs: &Matrix,
        labels: &[usize],
        rows: &[usize],
        grad: &mut [f64],
        s: &mut Scratch,
    ) -> f64 {
        let mut loss = 0.0;
        let feature_dim = self.feature_dim();
        let n_layers = self.layers.len();
        for &r in rows {
            let x = inputs.row(r);
            self.forward_sample(w, head, x, s);
            loss += softmax_xent_grad(&s.logits, labels[r], &mut s.dlogits);

            let features: &[f64] = if n_layers == 0 { x } else { &s.acts[n_layers] };
            outer_accumulate(grad, head.offset, feature_dim, &s.dlogits, features);
            if n_layers == 0 {
                continue;
            }
            transpose_mul(w, head.offset, feature_dim, &s.dlogits, &mut s.deltas[n_layers]);

            for l in (0..n_layers).rev() {
                let layer = self.layers[l];
                {
                    let act = &s.acts[l + 1];
                    let delta = &mut s.deltas[l + 1];
                    for (d, &a) in delta.iter_mut().zip(act) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let input: &[f64] = if l == 0 { x } else { &s.acts[l] };
                outer_accumulate(grad, layer.offset, layer.fan_in, &s.deltas[l + 1], input);
                if l > 0 {
                    let (lo, hi) = s.deltas.split_at_mut(l + 1);
                    transpose_mul(w, layer.offset, layer.fan_in, &hi[0], &mut lo[l]);
                }
            }
        }
        loss
    }

    /// Mean softmax cross-entropy over all rows and its gradient with respect
    /// to every weight (zero outside the trunk and `task`'s head).
    pub fn loss_and_gradient(&self, task: TaskId, inputs: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let head = self.head_or_err(task)?;
        self.check_batch(inputs)?;
        check_labels(inputs, labels, head.class_count)?;
        let mut grad = vec![0.0; self.weights.len()];
        let mut s = Scratch::new(self, head.class_count);
        let rows: Vec<usize> = (0..inputs.rows()).collect();
        let loss = self.accumulate_gradient(&self.weights, head, inputs, labels, &rows, &mut grad, &mut s);
        let scale = 1.0 / inputs.rows() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        Ok((loss * scale, grad))
    }

    /// Mean softmax cross-entropy with the raw weights.
    pub fn mean_loss(&self, task: TaskId, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
        let head = self.head_or_err(task)?;
        self.check_batch(inputs)?;
        check_labels(inputs, labels, head.class_count)?;
        let mut s = Scratch::new(self, head.class_count);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            self.forward_sample(&self.weights, head, inputs.row(r), &mut s);
            total += softmax_xent_grad(&s.logits, label, &mut s.dlogits);
        }
        Ok(total / inputs.rows() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.weights.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.layer_dims.len() as u32).to_le_bytes());
        for &d in &self.layer_dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.heads.len() as u32).to_le_bytes());
        for (&task, h) in &self.heads {
            out.extend_from_slice(&task.to_le_bytes());
            out.extend_from_slice(&(h.class_count as u64).to_le_bytes());
            out.extend_from_slice(&(h.offset as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(8)? != BINARY_MAGIC {
            return Err(AcllError::Format("not a network record".into()));
        }
        let seed = r.u64()?;
        let n_dims = r.u32()? as usize;
        let layer_dims = (0..n_dims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n_heads = r.u32()? as usize;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let task = r.u32()?;
            let class_count = r.u64()? as usize;
            let offset = r.u64()? as usize;
            heads.push((task, offset, class_count));
        }
        let n_weights = r.u64()? as usize;
        if n_weights > bytes.len() / 8 {
            return Err(AcllError::Format("truncated weights".into()));
        }
        let weights = (0..n_weights).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(AcllError::Format("trailing bytes".into()));
        }
        Network::from_parts(layer_dims, seed, &heads, weights)
    }
}

/// Argmax per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels(net: &Network, mask: &WeightMask, task: TaskId, inputs: &Matrix) -> Result<Vec<usize>> {
    Ok(argmax_rows(&net.forward(mask, task, inputs)?))
}

/// Mini-batch SGD on softmax cross-entropy. Only weights with `trainable`
/// set are updated; every other entry of the weight vector is left untouched.
pub fn sgd_train(
    net: &mut Network,
    trainable: &WeightMask,
    task: TaskId,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if split.is_empty() {
        return Err(AcllError::InvalidData("cannot train on an empty split".into()));
    }
    net.check_mask(trainable)?;
    let head = net.head_or_err(task)?;
    net.check_batch(&split.inputs)?;
    check_labels(&split.inputs, &split.labels, head.class_count)?;

    let active: Vec<usize> = trainable.ones_indices().collect();
    if !active.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..split.len()).collect();
        let mut grad = vec![0.0; net.weights.len()];
        let mut velocity = match cfg.optimizer {
            Optimizer::MomentumSgd => vec![0.0; net.weights.len()],
            Optimizer::PlainSgd => Vec::new(),
        };
        let mut s = Scratch::new(net, head.class_count);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                net.accumulate_gradient(&net.weights, head, &split.inputs, &split.labels, batch, &mut grad, &mut s);
                let step = cfg.learning_rate / batch.len() as f64;
                match cfg.optimizer {
                    Optimizer::PlainSgd => {
                        for &i in &active {
                            net.weights[i] -= step * grad[i];
                        }
                    }
                    Optimizer::MomentumSgd => {
                        for &i in &active {
                            velocity[i] = MOMENTUM * velocity[i] + grad[i];
                            net.weights[i] -= step * velocity[i];
                        }
                    }
                }
            }
        }
    }
    Ok(TrainReport {
        final_loss: net.mean_loss(task, &split.inputs, &split.labels)?,
        epochs_run: cfg.epochs,
    })
}

fn check_labels(inputs: &Matrix, labels: &[usize], class_count: usize) -> Result<()> {
    if inputs.rows() != labels.len() {
        return Err(AcllError::Shape(format!("{} rows but {} labels", inputs.rows(), labels.len())));
    }
    if inputs.rows() == 0 {
        return Err(AcllError::InvalidData("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(AcllError::InvalidData(format!("label {bad} outside [0, {class_count})")));
    }
    Ok(())
}

fn trunk_layout(layer_dims: &[usize]) -> Vec<LayerSlice> {
    let mut offset = 0;
    layer_dims[..layer_dims.len() - 1]
        .windows(2)
        .map(|pair| {
            let layer = LayerSlice { fan_in: pair[0], fan_out: pair[1], offset };
            offset += layer.len();
            layer
        })
        .collect()
}

fn fill_weights(dst: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let scale = 1.0 / (fan_in as f64).sqrt();
    for w in dst {
        let z: f64 = StandardNormal.sample(rng);
        *w = z * scale;
    }
}

/// `out = W x + b` for the block at `offset`.
fn dense(w: &[f64], offset: usize, fan_in: usize, fan_out: usize, x: &[f64], out: &mut [f64]) {
    let bias = &w[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[offset + j * fan_in..offset + (j + 1) * fan_in];
        *o = bias[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `grad[W] += delta x^T`, `grad[b] += delta`.
fn outer_accumulate(grad: &mut [f64], offset: usize, fan_in: usize, delta: &[f64], x: &[f64]) {
    let fan_out = delta.len();
    for (j, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &mut grad[offset + j * fan_in..offset + (j + 1) * fan_in];
        for (g, &xi) in row.iter_mut().zip(x) {
            *g += d * xi;
        }
        grad[offset + fan_in * fan_out + j] += d;
    }
}

/// `out = W^T delta` for the block at `offset`.
fn transpose_mul(w: &[f64], offset: usize, fan_in: usize, delta: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &w[offset + j * fan_in..offset + (j + 1) * fan_in];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += wij * d;
        }
    }
}

/// Cross-entropy of `label` under softmax(`logits`); writes dL/dlogits.
fn softmax_xent_grad(logits: &[f64], label: usize, dlogits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &z) in dlogits.iter_mut().zip(logits) {
        *d = (z - max).exp();
        sum += *d;
    }
    for d in dlogits.iter_mut() {
        *d /= sum;
    }
    dlogits[label] -= 1.0;
    -(logits[label] - max - sum.ln())
}

struct Scratch {
    /// acts[l] is the post-activation output of trunk layer l-1; acts[0] unused.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
}

impl Scratch {
    fn new(net: &Network, classes: usize) -> Self {
        let mut acts = vec![Vec::new()];
        acts.extend(net.layers.iter().map(|l| vec![0.0; l.fan_out]));
        let deltas = acts.iter().map(|a| vec![0.0; a.len()]).collect();
        Scratch { acts, deltas, logits: vec![0.0; classes], dlogits: vec![0.0; classes] }
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| AcllError::Format("unexpected end of record".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
