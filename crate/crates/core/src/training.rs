//! Sparsity-augmented training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lkam::{ExecutionMode, GateVector};
use crate::network::{argmax_rows, GraphOutput, Model, NetworkConfig};
use crate::ops;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

/// Penalty weight and switch count of one gate module.
#[derive(Clone, Debug, PartialEq)]
pub struct AttachmentGain {
    pub layer: String,
    pub gain: f64,
    /// Length of the switch vector.
    pub m: usize,
}

/// Per-attachment gains of the switch penalty, in attachment order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityLossConfig {
    pub attachments: Vec<AttachmentGain>,
}

impl SparsityLossConfig {
    /// Gains as recorded in the network description.
    pub fn from_network(config: &NetworkConfig) -> Result<Self> {
        let topo = config.validate()?;
        let attachments = config
            .lkams
            .iter()
            .zip(&topo.attachment_layer)
            .map(|(a, &li)| AttachmentGain {
                layer: a.layer.clone(),
                gain: a.gain,
                m: topo.outputs[li].0,
            })
            .collect();
        let cfg = SparsityLossConfig { attachments };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Network gains with the listed layers replaced.
    pub fn with_gains(config: &NetworkConfig, gains: &BTreeMap<String, f64>) -> Result<Self> {
        let mut cfg = Self::from_network(config)?;
        for (layer, &g) in gains {
            let a = cfg
                .attachments
                .iter_mut()
                .find(|a| &a.layer == layer)
                .ok_or_else(|| Error::config(format!("gain given for `{layer}`, which has no gate module")))?;
            a.gain = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.attachments {
            if !(a.gain >= 0.0 && a.gain.is_finite()) {
                return Err(Error::config(format!("gain for `{}` must be non-negative, got {}", a.layer, a.gain)));
            }
            if a.m == 0 {
                return Err(Error::config(format!("gate module on `{}` has no switches", a.layer)));
            }
        }
        Ok(())
    }

    /// Weight of one switch value in the batch-averaged penalty.
    pub fn coefficient(&self, attachment: usize, batch: usize) -> f64 {
        let a = &self.attachments[attachment];
        a.gain / (2.0 * a.m as f64 * batch as f64)
    }

    fn check(&self, attachments: usize) -> Result<()> {
        if attachments != self.attachments.len() {
            return Err(Error::usage(format!(
                "{attachments} gate outputs for {} configured gains",
                self.attachments.len()
            )));
        }
        Ok(())
    }
}

/// Batch-averaged switch penalty. `gates` is indexed `[attachment][item]` and
/// must hold soft values.
pub fn sparsity_loss<T: Scalar>(gates: &[Vec<GateVector<T>>], cfg: &SparsityLossConfig) -> Result<f64> {
    cfg.check(gates.len())?;
    let mut total = 0.0;
    for (i, items) in gates.iter().enumerate() {
        if items.iter().any(|g| g.binarized) {
            return Err(Error::usage(format!(
                "penalty on `{}` needs soft switch values, got binarized ones",
                cfg.attachments[i].layer
            )));
        }
        if items.is_empty() {
            continue;
        }
        let sum: f64 = items.iter().flat_map(|g| &g.values).map(|v| v.as_f64().abs()).sum();
        total += cfg.coefficient(i, items.len()) * sum;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub task: f64,
    pub sparsity: f64,
    pub total: f64,
    /// Mean switch value per attachment.
    pub mean_gate: Vec<f64>,
}

fn mean_gates<T: Scalar>(gates: &[Vec<GateVector<T>>]) -> Vec<f64> {
    gates
        .iter()
        .map(|items| {
            let n: usize = items.iter().map(|g| g.len()).sum();
            let s: f64 = items.iter().flat_map(|g| &g.values).map(|v| v.as_f64()).sum();
            if n == 0 {
                0.0
            } else {
                s / n as f64
            }
        })
        .collect()
}

/// Cross-entropy plus switch penalty, evaluated on plain tensors.
pub fn total_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    gates: &[Vec<GateVector<T>>],
    cfg: &SparsityLossConfig,
) -> Result<LossReport> {
    let (task, _) = ops::softmax_cross_entropy(logits, labels)?;
    let task = task.as_f64();
    let sparsity = sparsity_loss(gates, cfg)?;
    Ok(LossReport {
        task,
        sparsity,
        total: task + sparsity,
        mean_gate: mean_gates(gates),
    })
}

/// Loss nodes recorded on a tape.
pub struct GraphLoss {
    pub total: Var,
    pub task: Var,
    pub sparsity: Option<Var>,
}

/// Records the training loss for a taped forward pass.
pub fn graph_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &GraphOutput,
    labels: &[usize],
    cfg: &SparsityLossConfig,
) -> Result<GraphLoss> {
    cfg.check(out.gates.len())?;
    let task = g.softmax_cross_entropy(out.logits, labels)?;
    let mut sparsity: Option<Var> = None;
    for (i, &sw) in out.gates.iter().enumerate() {
        let n = g.value(sw).shape().n;
        let l1 = g.sum_abs(sw);
        let term = g.affine(l1, T::from_f64(cfg.coefficient(i, n)), T::zero());
        sparsity = Some(match sparsity {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let total = match sparsity {
        Some(s) => g.add(task, s)?,
        None => task,
    };
    Ok(GraphLoss { total, task, sparsity })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Validate every this many epochs (and always after the last).
    pub eval_cadence: usize,
    /// Global gradient-norm limit per step.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            precision: Precision::Single,
            eval_cadence: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("gradient clip norm must be positive"));
        }
        if self.eval_cadence == 0 {
            return Err(Error::config("eval cadence must be at least 1"));
        }
        Ok(())
    }
}

/// Metrics of one training epoch. Validation fields are absent on epochs
/// skipped by the evaluation cadence.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub sparsity_loss: f64,
    pub total_loss: f64,
    pub val_top1: Option<f64>,
    pub active_fraction: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,task_loss,sparsity_loss,total_loss,val_top1,active_fraction";

pub fn epoch_log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.task_loss,
            r.sparsity_loss,
            r.total_loss,
            opt(r.val_top1),
            opt(r.active_fraction)
        );
    }
    s
}

pub fn write_epoch_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, epoch_log_csv(records)).map_err(|e| Error::io(path, e))
}

/// Accuracy and active-switch fraction of hard-gated inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub top1: f64,
    pub top5: f64,
    /// Active switches over all switches, over all items; 1 without gates.
    pub active_fraction: f64,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, mode: ExecutionMode, batch: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::usage("cannot evaluate on an empty dataset"));
    }
    let (mut hit1, mut hit5) = (0usize, 0usize);
    let (mut active, mut total) = (0usize, 0usize);
    for (x, labels) in data.batches::<T>(batch) {
        let out = model.forward(&x, mode)?;
        for (p, &l) in argmax_rows(&out.logits).iter().zip(&labels) {
            hit1 += (*p == l) as usize;
        }
        for r in crate::network::label_ranks(&out.logits, &labels) {
            hit5 += (r <= 5) as usize;
        }
        for g in out.gates.iter().flatten() {
            total += g.len();
            active += if mode.binarizes() {
                g.active_count()
            } else {
                g.values.iter().filter(|v| v.as_f64() >= 0.5).count()
            };
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
        active_fraction: if total == 0 { 1.0 } else { active as f64 / total as f64 },
    })
}

/// Stochastic gradient descent with heavy-ball momentum:
/// `v = momentum * v + grad`, `p -= learning_rate * v`.
pub struct Sgd<T> {
    learning_rate: T,
    momentum: T,
    velocity: Vec<Vec<T>>,
    clip_norm: Option<f64>,
}

impl<T: Scalar> Sgd<T> {
    /// A zero learning rate is accepted here and leaves parameters untouched.
    pub fn new(model: &Model<T>, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be non-negative, got {learning_rate}")));
        }
        Ok(Sgd {
            learning_rate: T::from_f64(learning_rate),
            momentum: T::from_f64(momentum),
            velocity: model.parameters().iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
            clip_norm: None,
        })
    }

    /// Rescales each batch gradient to at most this global L2 norm.
    pub fn with_clip_norm(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    /// One update on a batch. Returns the loss measured before the update.
    pub fn step(
        &mut self,
        model: &mut Model<T>,
        x: &Tensor<T>,
        labels: &[usize],
        sparsity: &SparsityLossConfig,
    ) -> Result<LossReport> {
        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, x)?;
        let loss = graph_loss(&mut g, &out, labels, sparsity)?;
        let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].as_f64();
        let report = LossReport {
            task: scalar(&g, loss.task),
            sparsity: loss.sparsity.map_or(0.0, |s| scalar(&g, s)),
            total: scalar(&g, loss.total),
            mean_gate: out
                .gates
                .iter()
                .map(|&v| {
                    let t = g.value(v);
                    t.sum().as_f64() / t.len() as f64
                })
                .collect(),
        };
        if !report.total.is_finite() {
            return Err(Error::Numerical {
                epoch: 0,
                step: 0,
                message: format!("loss became {}", report.total),
            });
        }
        g.backward(loss.total)?;
        let grads: Vec<&Tensor<T>> = out
            .params
            .iter()
            .map(|&v| g.grad(v).expect("parameters require gradients"))
            .collect();
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|t| t.data())
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    T::from_f64(c / norm)
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        for ((p, v), grad) in model.parameters_mut().into_iter().zip(&mut self.velocity).zip(grads) {
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vv = self.momentum * *vv + scale * gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(report)
    }
}

/// Runs SGD with momentum over every parameter, gate modules included.
///
/// Items are reshuffled each epoch from a generator seeded with `cfg.seed`.
/// A non-finite loss aborts with the epoch (1-based) and step (0-based).
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    sparsity: &SparsityLossConfig,
) -> Result<(Model<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    sparsity.validate()?;
    if train_set.is_empty() {
        return Err(Error::usage("training set is empty"));
    }
    if train_set.item_shape != model.config().input {
        return Err(Error::usage(format!(
            "dataset items are {:?}, network expects {:?}",
            train_set.item_shape,
            model.config().input
        )));
    }
    let classes = model.config().classes;
    if let Some(&l) = train_set.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {l} out of range for {classes} classes")));
    }
    let mut sgd = Sgd::new(&model, cfg.learning_rate, cfg.momentum)?.with_clip_norm(cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut task_sum, mut sparse_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train_set.batch::<T>(idx);
            let r = sgd.step(&mut model, &x, &labels, sparsity).map_err(|e| match e {
                Error::Numerical { message, .. } => Error::Numerical { epoch, step, message },
                e => e,
            })?;
            let w = idx.len() as f64;
            task_sum += w * r.task;
            sparse_sum += w * r.sparsity;
            total_sum += w * r.total;
        }
        let n = train_set.len() as f64;
        let (val_top1, active_fraction) = if epoch % cfg.eval_cadence == 0 || epoch == cfg.epochs {
            let e = evaluate(&model, val_set, ExecutionMode::EvalHard, cfg.batch_size.max(64))?;
            (Some(e.top1), Some(e.active_fraction))
        } else {
            (None, None)
        };
        log.push(EpochRecord {
            epoch,
            task_loss: task_sum / n,
            sparsity_loss: sparse_sum / n,
            total_loss: total_sum / n,
            val_top1,
            active_fraction,
        });
    }
    Ok((model, log))
}
