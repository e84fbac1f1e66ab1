//! Backbone pre-training, teacher fine-tuning and student training under
//! `L = CE + γ1 E[C] + γ2 Ω`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use nt_tensor::{Graph, NodeId, Precision, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackbonePlan};
use crate::complexity::{expected_network_complexity_tape, ComplexityOptions, ComplexityTable};
use crate::data::{argmax, Dataset, TaskData};
use crate::error::{Error, Result};
use crate::params::{PassRecord, Sgd};
use crate::student::{StudentActivations, StudentGraph};

const EVAL_CHUNK: usize = 128;

/// How the distillation term is scaled before `γ2` is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaScale {
    /// Raw squared error summed over elements, averaged over the batch.
    /// At `γ2 = 10` its gradients are large enough to diverge.
    PerSample,
    /// Squared error averaged over every element of every matched tensor.
    #[default]
    PerElement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub theta: f64,
    pub accuracy_slack: f64,
    /// Learning-rate multiplier for the gate logits `a`.
    pub gate_lr_scale: f64,
    pub omega_scale: OmegaScale,
    pub complexity: ComplexityOptions,
    /// Round every op through `f32`.
    pub fp32: bool,
    /// Evaluate on the test split after every epoch, not just the last.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.3,
            gamma2: 10.0,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 15,
            batch_size: 64,
            seed: 0,
            theta: 0.05,
            accuracy_slack: 0.005,
            gate_lr_scale: 1.0,
            omega_scale: OmegaScale::default(),
            complexity: ComplexityOptions::default(),
            fp32: false,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma1 >= 0.0 && self.gamma2 >= 0.0) {
            return bad(format!(
                "γ1 = {}, γ2 = {} must be non-negative",
                self.gamma1, self.gamma2
            ));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("θ = {} must lie in (0, 1)", self.theta));
        }
        if !(self.accuracy_slack >= 0.0) {
            return bad(format!(
                "accuracy slack {} must be non-negative",
                self.accuracy_slack
            ));
        }
        if !(self.gate_lr_scale >= 0.0) {
            return bad(format!(
                "gate lr scale {} must be non-negative",
                self.gate_lr_scale
            ));
        }
        if !(self.lr >= 0.0
            && self.momentum >= 0.0
            && self.momentum < 1.0
            && self.weight_decay >= 0.0)
        {
            return bad("lr, momentum and weight decay must be non-negative, momentum < 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch size {} too small for batch norm",
                self.batch_size
            ));
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        if self.fp32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }

    /// Step decay: ×0.1 from 60% of the epochs, ×0.01 from 80%.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = epoch as f64;
        let n = self.epochs as f64;
        let drops = i32::from(e >= 0.6 * n) + i32::from(e >= 0.8 * n);
        self.lr * 0.1f64.powi(drops)
    }

    fn echo(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub expected_complexity: f64,
    pub omega: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Gate values after the epoch, keyed by path label; empty outside
    /// student training.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub alphas: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Set when the last epoch's mean loss is not below the first's.
    pub loss_not_decreasing: bool,
}

impl History {
    fn finish(&mut self) {
        if let (Some(first), Some(last)) = (self.records.first(), self.records.last()) {
            self.loss_not_decreasing = self.records.len() > 1 && last.loss >= first.loss;
        }
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,ce,expected_complexity,omega,train_acc,test_acc\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.loss,
                r.ce,
                r.expected_complexity,
                r.omega,
                r.train_acc,
                r.test_acc.map(|a| a.to_string()).unwrap_or_default()
            );
        }
        s
    }

    /// Per-epoch gate snapshots as JSON.
    pub fn alphas_json(&self) -> Result<String> {
        let snaps: Vec<_> = self
            .records
            .iter()
            .map(|r| serde_json::json!({ "epoch": r.epoch, "alphas": r.alphas }))
            .collect();
        Ok(serde_json::to_string_pretty(&snaps)?)
    }
}

/// Mean of a batch-partitioned quantity, weighted by batch size.
#[derive(Default)]
struct Running {
    loss: f64,
    ce: f64,
    ec: f64,
    omega: f64,
    correct: usize,
    seen: usize,
}

impl Running {
    fn add(&mut self, n: usize, loss: f64, ce: f64, ec: f64, omega: f64, correct: usize) {
        let w = n as f64;
        self.loss += loss * w;
        self.ce += ce * w;
        self.ec += ec * w;
        self.omega += omega * w;
        self.correct += correct;
        self.seen += n;
    }

    fn record(&self, epoch: usize, lr: f64, test_acc: Option<f64>) -> EpochRecord {
        let n = self.seen.max(1) as f64;
        EpochRecord {
            epoch,
            lr,
            loss: self.loss / n,
            ce: self.ce / n,
            expected_complexity: self.ec / n,
            omega: self.omega / n,
            train_acc: self.correct as f64 / n,
            test_acc,
            alphas: BTreeMap::new(),
        }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Accuracy of an inference function over `ds`, evaluated in chunks.
pub fn accuracy<F>(ds: &Dataset, eval: F) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let chunks: Vec<(usize, usize)> = (0..ds.len())
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(ds.len())))
        .collect();
    let hits = chunks
        .par_iter()
        .map(|&(s, e)| {
            let x = ds.images.slice_outer(s, e)?;
            Ok(correct(&eval(&x)?, &ds.labels[s..e]))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / ds.len().max(1) as f64)
}

pub fn backbone_accuracy(net: &Backbone, ds: &Dataset, precision: Precision) -> Result<f64> {
    accuracy(ds, |x| Ok(net.evaluate(x, precision)?.0))
}

pub fn student_accuracy(graph: &StudentGraph, ds: &Dataset, precision: Precision) -> Result<f64> {
    accuracy(ds, |x| Ok(graph.evaluate(x, precision)?.0))
}

fn check_finite(loss: f64, epoch: usize, step: usize, cfg: &TrainConfig) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step,
            config: cfg.echo(),
        })
    }
}

/// Cross-entropy training of every unfrozen weight of `net`.
fn fit_backbone(net: &mut Backbone, data: &TaskData, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let precision = cfg.precision();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut run = Running::default();
        for (step, idx) in batches(data.train.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let (x, y) = data.train.batch(&idx)?;
            let (mut g, acts, pass) = net.forward_train(&x, precision)?;
            let loss = g.cross_entropy(acts.logits, &y)?;
            let lv = g.value(loss).data()[0];
            check_finite(lv, epoch, step, cfg)?;
            let hits = correct(g.value(acts.logits), &y);
            let grads = g.backward(loss)?;
            opt.step(&mut net.store, &pass, &grads, lr)?;
            pass.apply_bn_updates(&g, &mut net.store)?;
            run.add(y.len(), lv, lv, 0.0, 0.0, hits);
        }
        let test = if cfg.eval_every_epoch || epoch + 1 == cfg.epochs {
            Some(backbone_accuracy(net, &data.test, precision)?)
        } else {
            None
        };
        let rec = run.record(epoch, lr, test);
        info!(
            "epoch {epoch} loss {:.4} train {:.3} test {:?}",
            rec.loss, rec.train_acc, rec.test_acc
        );
        history.records.push(rec);
    }
    net.store.round_to_f32();
    history.finish();
    Ok(history)
}

/// Trains a fresh backbone on the source task. Zero epochs return the
/// initialization (rounded to checkpoint precision).
pub fn pretrain_backbone(
    plan: &BackbonePlan,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<(Backbone, History)> {
    let mut net = crate::backbone::build_backbone(plan, data.train.num_classes, cfg.seed)?;
    let history = fit_backbone(&mut net, data, cfg)?;
    Ok((net, history))
}

/// A fully fine-tuned copy of the backbone for the target task.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub net: Backbone,
    /// Test accuracy, the reference for the pruning slack.
    pub accuracy: f64,
}

/// Per-batch teacher targets: logits and merge-node activations.
#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    pub logits: Tensor,
    pub nodes: Vec<Tensor>,
}

impl Teacher {
    pub fn outputs(&self, x: &Tensor, precision: Precision) -> Result<TeacherOutputs> {
        let (logits, nodes) = self.net.evaluate(x, precision)?;
        Ok(TeacherOutputs { logits, nodes })
    }
}

/// Copies the backbone, gives it a fresh head for the target classes and
/// fine-tunes every weight.
pub fn train_teacher(
    backbone: &Backbone,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<(Teacher, History)> {
    let mut net = backbone.clone();
    net.reset_head(data.train.num_classes, cfg.seed ^ 0x7EAC_4E55);
    let history = fit_backbone(&mut net, data, cfg)?;
    let accuracy = match history.final_test_acc() {
        Some(a) => a,
        None => backbone_accuracy(&net, &data.test, cfg.precision())?,
    };
    Ok((Teacher { net, accuracy }, history))
}

/// `Σ_l ||x_l^t - x_l||² + ||z^t - z||²` with teacher values as constants.
/// Student nodes removed by pruning (`None`) are skipped.
pub fn omega(
    g: &mut Graph,
    student_nodes: &[Option<NodeId>],
    teacher_nodes: &[Tensor],
    student_logits: NodeId,
    teacher_logits: &Tensor,
) -> Result<NodeId> {
    if student_nodes.len() != teacher_nodes.len() {
        return Err(Error::InvalidGraph(format!(
            "{} student activations vs {} teacher activations",
            student_nodes.len(),
            teacher_nodes.len()
        )));
    }
    let mut terms = Vec::with_capacity(student_nodes.len() + 1);
    let pairs = student_nodes
        .iter()
        .zip(teacher_nodes)
        .filter_map(|(s, t)| s.map(|s| (s, t)))
        .chain(std::iter::once((student_logits, teacher_logits)));
    for (s, t) in pairs {
        let t = g.constant(t.clone());
        let d = g.sub(s, t)?;
        terms.push(g.sum_of_squares(d)?);
    }
    Ok(g.add_all(&terms)?)
}

/// Tape handles for the pieces of the student objective.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub ce: NodeId,
    pub expected_complexity: NodeId,
    pub omega: NodeId,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> (f64, f64, f64, f64) {
        let v = |n| g.value(n).data()[0];
        (
            v(self.total),
            v(self.ce),
            v(self.expected_complexity),
            v(self.omega),
        )
    }
}

/// `CE + γ1 E[C] + γ2 Ω` where CE is the batch mean and Ω is scaled per
/// [`OmegaScale`].
pub fn total_loss(
    g: &mut Graph,
    graph: &StudentGraph,
    acts: &StudentActivations,
    teacher: &TeacherOutputs,
    labels: &[usize],
    table: &ComplexityTable,
    cfg: &TrainConfig,
) -> Result<LossNodes> {
    let ce = g.cross_entropy(acts.logits, labels)?;
    let ec = expected_network_complexity_tape(
        g,
        &acts.alphas,
        table,
        graph.num_nodes(),
        cfg.complexity,
    )?;
    let raw = omega(g, &acts.nodes, &teacher.nodes, acts.logits, &teacher.logits)?;
    let denom = match cfg.omega_scale {
        OmegaScale::PerSample => labels.len() as f64,
        OmegaScale::PerElement => {
            let nodes: usize = acts
                .nodes
                .iter()
                .zip(&teacher.nodes)
                .filter(|(s, _)| s.is_some())
                .map(|(_, t)| t.numel())
                .sum();
            (nodes + teacher.logits.numel()) as f64
        }
    };
    let om = g.scale(raw, 1.0 / denom)?;
    let a = g.scale(ec, cfg.gamma1)?;
    let b = g.scale(om, cfg.gamma2)?;
    let total = g.add_all(&[ce, a, b])?;
    Ok(LossNodes {
        total,
        ce,
        expected_complexity: ec,
        omega: om,
    })
}

/// One recorded training-mode pass of the student objective on a batch.
pub fn student_objective(
    graph: &StudentGraph,
    teacher: &TeacherOutputs,
    x: &Tensor,
    labels: &[usize],
    table: &ComplexityTable,
    cfg: &TrainConfig,
) -> Result<(Graph, StudentActivations, LossNodes, PassRecord)> {
    let (mut g, acts, pass) = graph.forward_train(x, cfg.precision())?;
    let loss = total_loss(&mut g, graph, &acts, teacher, labels, table, cfg)?;
    Ok((g, acts, loss, pass))
}

/// Optimizes the task-specific parameters of `graph` (alive proxies, gates,
/// classifier). Pre-trained weights must come out bit-identical.
pub fn train_student(
    graph: &mut StudentGraph,
    teacher: &Teacher,
    data: &TaskData,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    let digest = graph.frozen_digest();
    let table = ComplexityTable::for_student(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    for p in graph.paths().collect::<Vec<_>>() {
        opt.set_lr_scale(
            graph.gate_param(p).expect("every path has a gate"),
            cfg.gate_lr_scale,
        );
    }
    let precision = cfg.precision();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut run = Running::default();
        for (step, idx) in batches(data.train.len(), cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let (x, y) = data.train.batch(&idx)?;
            let t = teacher.outputs(&x, precision)?;
            let (mut g, acts, loss, pass) = student_objective(graph, &t, &x, &y, &table, cfg)?;
            let (lv, ce, ec, om) = loss.values(&g);
            check_finite(lv, epoch, step, cfg)?;
            let hits = correct(g.value(acts.logits), &y);
            let grads = g.backward(loss.total)?;
            opt.step(&mut graph.store, &pass, &grads, lr)?;
            pass.apply_bn_updates(&g, &mut graph.store)?;
            run.add(y.len(), lv, ce, ec, om, hits);
        }
        let test = if cfg.eval_every_epoch || epoch + 1 == cfg.epochs {
            Some(student_accuracy(graph, &data.test, precision)?)
        } else {
            None
        };
        let mut rec = run.record(epoch, lr, test);
        rec.alphas = graph
            .alphas()
            .into_iter()
            .map(|(p, a)| (p.to_string(), a))
            .collect();
        info!(
            "student epoch {epoch} loss {:.4} ce {:.4} E[C] {:.4} Ω {:.4} train {:.3} test {:?}",
            rec.loss, rec.ce, rec.expected_complexity, rec.omega, rec.train_acc, rec.test_acc
        );
        history.records.push(rec);
    }
    graph.store.round_to_f32();
    if graph.frozen_digest() != digest {
        return Err(Error::FrozenMutation(
            "frozen digest changed during student training".into(),
        ));
    }
    history.finish();
    Ok(history)
}
