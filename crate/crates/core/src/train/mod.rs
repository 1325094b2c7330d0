//! Joint optimisation of backbone and tree, evaluation, and checkpoints.

pub mod checkpoint;
mod optim;

use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeatureSet};
use crate::error::{Error, Result};
use crate::model::{row_argmax, InputKind, ModelOutput, ViTree};
use crate::rng::{self, stream};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};
use crate::tree::trace::path_records;

pub use optim::{Optimizer, OptimizerState};

/// Which cross-entropy terms enter the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    #[default]
    Both,
    VitOnly,
    LeafOnly,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(LossMode::Both),
            "vit-only" => Ok(LossMode::VitOnly),
            "leaf-only" => Ok(LossMode::LeafOnly),
            _ => Err(Error::Config(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
    pub grad_clip_norm: Option<f64>,
    /// Adds a cross-entropy term on the mixed logits so the mix ratio trains.
    pub train_mix: bool,
    pub loss: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            optimizer: Optimizer::default(),
            grad_clip_norm: None,
            train_mix: false,
            loss: LossMode::Both,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} must be at least 2 for batch-norm training",
                self.batch_size
            )));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip_norm {c} must be > 0")));
            }
        }
        self.optimizer.validate()
    }
}

/// Borrowed view over a dataset or feature set in a uniform row layout.
#[derive(Debug, Clone)]
pub struct Examples<'a> {
    kind: InputKind,
    patch_count: usize,
    width: usize,
    classes: usize,
    items: Vec<Example<'a>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub label: usize,
    pub values: &'a [f64],
    pub signatures: Option<&'a [usize]>,
}

impl<'a> Examples<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Self {
        Examples {
            kind: InputKind::Patches,
            patch_count: ds.patch_count,
            width: ds.patch_dim,
            classes: ds.classes,
            items: ds
                .samples
                .iter()
                .map(|s| Example {
                    label: s.label,
                    values: &s.patches,
                    signatures: Some(&s.signature_positions),
                })
                .collect(),
        }
    }

    pub fn from_features(fs: &'a FeatureSet) -> Self {
        Examples {
            kind: InputKind::Features,
            patch_count: fs.patch_count,
            width: fs.feature_dim,
            classes: fs.classes,
            items: fs
                .samples
                .iter()
                .map(|s| Example {
                    label: s.label,
                    values: &s.features,
                    signatures: None,
                })
                .collect(),
        }
    }

    pub fn kind(&self) -> InputKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, i: usize) -> Result<&Example<'a>> {
        self.items.get(i).ok_or(Error::OutOfRange {
            index: i,
            len: self.items.len(),
        })
    }

    /// The first `n` examples.
    pub fn truncated(&self, n: usize) -> Self {
        Examples {
            items: self.items[..n.min(self.items.len())].to_vec(),
            ..self.clone()
        }
    }

    /// `[B, K, width]` input tensor and labels for the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.patch_count * self.width;
        let mut data = Vec::with_capacity(rows.len() * per);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows {
            let ex = self.get(i)?;
            data.extend_from_slice(ex.values);
            labels.push(ex.label);
        }
        Ok((Tensor::new(vec![rows.len(), self.patch_count, self.width], data)?, labels))
    }

    /// Checks the examples fit a model's input shape and class count.
    pub fn check_model(&self, model: &ViTree) -> Result<()> {
        let bb = &model.config().backbone;
        let width = match self.kind {
            InputKind::Patches => bb.patch_dim,
            InputKind::Features => bb.model_dim,
        };
        if self.patch_count != bb.patch_count() || self.width != width {
            return Err(Error::dim(format!(
                "data rows are {}x{} but the model expects {}x{width}",
                self.patch_count,
                self.width,
                bb.patch_count()
            )));
        }
        if self.classes > bb.class_count {
            return Err(Error::dim(format!(
                "data has {} classes but the model predicts {}",
                self.classes, bb.class_count
            )));
        }
        Ok(())
    }
}

/// `CE(y_v) + CE(y_t)`, each averaged over the batch.
pub fn combined_loss(g: &mut Graph, logits_v: Var, logits_t: Var, labels: &[usize]) -> Result<Var> {
    let lv = g.cross_entropy(logits_v, labels)?;
    let lt = g.cross_entropy(logits_t, labels)?;
    g.add(lv, lt)
}

/// `alpha * y_v + (1 - alpha) * y_t` with `alpha = sigmoid(rho)`.
pub fn combined_predict(g: &mut Graph, logits_v: Var, logits_t: Var, rho: Var) -> Result<Var> {
    g.mix(logits_v, logits_t, rho)
}

/// The training objective for one forward pass.
pub fn training_loss(g: &mut Graph, out: &ModelOutput, labels: &[usize], cfg: &TrainConfig) -> Result<Var> {
    let mut loss = match cfg.loss {
        LossMode::Both => combined_loss(g, out.logits_v, out.logits_t, labels)?,
        LossMode::VitOnly => g.cross_entropy(out.logits_v, labels)?,
        LossMode::LeafOnly => g.cross_entropy(out.logits_t, labels)?,
    };
    if cfg.train_mix {
        let lc = g.cross_entropy(out.combined, labels)?;
        loss = g.add(loss, lc)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    pub acc_v: f64,
    pub acc_t: f64,
    pub acc_combined: f64,
    /// Row-normalised confusion matrix of the combined prediction; rows are
    /// true classes. Rows of classes absent from the data are all zero.
    pub confusion: Vec<Vec<f64>>,
    /// Fraction of realised-path patches that are signature cells, over the
    /// samples the tree classifies correctly. `None` without ground truth or
    /// when no sample is classified correctly.
    pub faithfulness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc_v: f64,
    pub train_acc_t: f64,
    pub train_acc_combined: f64,
    pub test: Option<EvalMetrics>,
}

/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 100;

/// Eval-mode metrics over all examples. Pure in `(model, store, examples)`.
pub fn evaluate(model: &ViTree, store: &ParamStore, data: &Examples<'_>) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Contract("evaluate on an empty sample set".into()));
    }
    data.check_model(model)?;
    let classes = model.config().backbone.class_count;
    let depth = model.config().tree.depth;
    let mut counts = vec![vec![0usize; classes]; classes];
    let (mut hit_v, mut hit_t, mut hit_c) = (0usize, 0usize, 0usize);
    let (mut faithful, mut visited) = (0usize, 0usize);
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(EVAL_BATCH) {
        let (x, labels) = data.batch(chunk)?;
        let mut g = Graph::new(Mode::eval());
        let input = g.input(x);
        let out = model.forward(&mut g, store, input, data.kind())?;
        let pv = row_argmax(&g, out.logits_v)?;
        let pt = row_argmax(&g, out.logits_t)?;
        let pc = row_argmax(&g, out.combined)?;
        for (b, &i) in chunk.iter().enumerate() {
            let y = labels[b];
            hit_v += usize::from(pv[b] == y);
            hit_t += usize::from(pt[b] == y);
            hit_c += usize::from(pc[b] == y);
            counts[y][pc[b]] += 1;
            if let (true, Some(sig)) = (pt[b] == y, data.get(i)?.signatures) {
                let (path, _) = path_records(&g, &out.tree, depth, out.patch_set.grid, b)?;
                faithful += path.iter().filter(|r| sig.contains(&r.patch_index)).count();
                visited += path.len();
            }
        }
    }
    let n = data.len() as f64;
    let confusion = counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.into_iter()
                .map(|c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    let has_truth = data.items.iter().all(|e| e.signatures.is_some());
    Ok(EvalMetrics {
        count: data.len(),
        acc_v: hit_v as f64 / n,
        acc_t: hit_t as f64 / n,
        acc_combined: hit_c as f64 / n,
        confusion,
        faithfulness: (has_truth && visited > 0).then(|| faithful as f64 / visited as f64),
    })
}

/// Model, parameters, optimiser state and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ViTree,
    pub store: ParamStore,
    pub config: TrainConfig,
    pub state: OptimizerState,
    /// Epochs completed.
    pub epoch: usize,
    /// Optimiser steps taken; keys dropout masks.
    pub step: u64,
}

impl Trainer {
    pub fn new(model: ViTree, store: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = OptimizerState::new(&store);
        Ok(Trainer {
            model,
            store,
            config,
            state,
            epoch: 0,
            step: 0,
        })
    }

    /// Mini-batches for an epoch: a keyed shuffle cut into `batch_size`
    /// pieces, with a trailing single row folded into the previous batch.
    pub fn epoch_batches(&self, epoch: usize, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::keyed(&[stream::SHUFFLE, self.config.seed, epoch as u64]));
        let mut batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(|c| c.to_vec()).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(last);
        }
        batches
    }

    /// One optimisation step on the given rows. Returns the loss and the
    /// number of correct backbone, tree and combined predictions.
    pub fn step_batch(&mut self, data: &Examples<'_>, rows: &[usize]) -> Result<(f64, [usize; 3])> {
        if rows.len() < 2 {
            return Err(Error::Config("training batches need at least 2 rows".into()));
        }
        let (x, labels) = data.batch(rows)?;
        let mut g = Graph::new(Mode::train(self.config.seed, self.step));
        let input = g.input(x);
        let out = self.model.forward(&mut g, &self.store, input, data.kind())?;
        let loss = training_loss(&mut g, &out, &labels, &self.config)?;
        let loss_value = g.data(loss)[0];
        if !loss_value.is_finite() {
            let culprit = self.store.first_non_finite().unwrap_or("none (non-finite activations)");
            return Err(Error::Numeric(format!(
                "loss became {loss_value} at step {}; first non-finite parameter: {culprit}",
                self.step
            )));
        }
        let mut hits = [0usize; 3];
        for (h, v) in hits.iter_mut().zip([out.logits_v, out.logits_t, out.combined]) {
            *h = row_argmax(&g, v)?.iter().zip(&labels).filter(|(p, y)| p == y).count();
        }
        g.backward(loss)?;
        self.store.zero_grads();
        self.store.accumulate_grads(&g);
        self.store.apply_buffer_updates(g.take_buffer_updates());
        if let Some(max_norm) = self.config.grad_clip_norm {
            optim::clip_grad_norm(&mut self.store, max_norm);
        }
        self.state.step(
            &mut self.store,
            &self.config.optimizer,
            self.config.learning_rate,
            self.config.weight_decay,
        );
        if let Some(name) = self.store.first_non_finite() {
            return Err(Error::Numeric(format!(
                "parameter {name} became non-finite at step {}",
                self.step
            )));
        }
        self.step += 1;
        Ok((loss_value, hits))
    }

    /// Runs the next epoch and, when given, evaluates on `test`.
    pub fn run_epoch(&mut self, train: &Examples<'_>, test: Option<&Examples<'_>>) -> Result<EpochMetrics> {
        if train.len() < 2 {
            return Err(Error::Config("training needs at least 2 samples".into()));
        }
        train.check_model(&self.model)?;
        let mut loss_sum = 0.0;
        let mut hits = [0usize; 3];
        for rows in self.epoch_batches(self.epoch, train.len()) {
            let (loss, h) = self.step_batch(train, &rows)?;
            loss_sum += loss * rows.len() as f64;
            hits.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        }
        self.epoch += 1;
        let n = train.len() as f64;
        let test = test.map(|t| evaluate(&self.model, &self.store, t)).transpose()?;
        Ok(EpochMetrics {
            epoch: self.epoch,
            loss: loss_sum / n,
            train_acc_v: hits[0] as f64 / n,
            train_acc_t: hits[1] as f64 / n,
            train_acc_combined: hits[2] as f64 / n,
            test,
        })
    }

    /// Trains until `config.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn fit(
        &mut self,
        train: &Examples<'_>,
        test: Option<&Examples<'_>>,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.run_epoch(train, test)?;
            on_epoch(self, &m)?;
            history.push(m);
        }
        Ok(history)
    }
}

/// CSV header of the per-epoch metrics file.
pub const METRICS_HEADER: &str = "epoch,loss,acc_v,acc_t,acc_combined,faithfulness";

/// One metrics CSV row. Accuracies are test accuracies when a test set was
/// evaluated, training accuracies otherwise; faithfulness is empty when it
/// is undefined.
pub fn metrics_row(m: &EpochMetrics) -> String {
    let (v, t, c, f) = match &m.test {
        Some(e) => (e.acc_v, e.acc_t, e.acc_combined, e.faithfulness),
        None => (m.train_acc_v, m.train_acc_t, m.train_acc_combined, None),
    };
    let f = f.map(|x| format!("{x:.6}")).unwrap_or_default();
    format!("{},{:.9},{v:.6},{t:.6},{c:.6},{f}", m.epoch, m.loss)
}
