//! Training objective for the distilled student: SimCC task loss, logit
//! and feature distillation, the epoch decay `R(E)` and their composition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NdArray, Var};
use crate::vpsde::{FeatureBatch, Origin};

/// `R(E) = 1 − (E − 1)/E_max` for `1 ≤ E ≤ E_max`.
pub fn weight_decay_r(epoch: usize, e_max: usize) -> Result<f64> {
    if epoch < 1 || epoch > e_max {
        return Err(Error::invalid(format!("epoch {epoch} outside 1..={e_max}")));
    }
    // integer numerator keeps both endpoints exact
    Ok((e_max - epoch + 1) as f64 / e_max as f64)
}

/// Soft SimCC targets `[B, K, 2, L]` and per-keypoint weights `[B, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimccLabels {
    targets: NdArray,
    weights: NdArray,
}

impl SimccLabels {
    pub fn new(targets: NdArray, weights: NdArray) -> Result<Self> {
        let ts = targets.shape();
        if ts.len() != 4 || ts[2] != 2 || ts[3] < 2 {
            return Err(Error::invalid(format!("targets must be B×K×2×L with L>1, got {ts:?}")));
        }
        if weights.shape() != &ts[..2] {
            return Err(Error::invalid(format!(
                "weights {:?} do not match targets {ts:?}",
                weights.shape()
            )));
        }
        let l = ts[3];
        for (i, v) in targets.data().chunks(l).enumerate() {
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-6 || v.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!(
                    "target vector {i} is not a distribution (sum {s})"
                )));
            }
        }
        if weights.data().iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("keypoint weights must lie in [0, 1]"));
        }
        Ok(SimccLabels { targets, weights })
    }

    pub fn targets(&self) -> &NdArray {
        &self.targets
    }

    pub fn weights(&self) -> &NdArray {
        &self.weights
    }

    pub fn batch(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn keypoints(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.targets.shape()[3]
    }

    /// Labels for the listed batch items, in order.
    pub fn select(&self, items: &[usize]) -> SimccLabels {
        let (k, l) = (self.keypoints(), self.bins());
        let per_t = k * 2 * l;
        let mut t = Vec::with_capacity(items.len() * per_t);
        let mut w = Vec::with_capacity(items.len() * k);
        for &i in items {
            t.extend_from_slice(&self.targets.data()[i * per_t..(i + 1) * per_t]);
            w.extend_from_slice(&self.weights.data()[i * k..(i + 1) * k]);
        }
        SimccLabels {
            targets: NdArray::from_vec(&[items.len(), k, 2, l], t).unwrap(),
            weights: NdArray::from_vec(&[items.len(), k], w).unwrap(),
        }
    }
}

fn check_logits(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[2] != 2 || shape[3] < 2 {
        return Err(Error::invalid(format!("logits must be B×K×2×L with L>1, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[3]))
}

/// Cross-entropy `−(1/(N·K·L)) Σ c · log softmax(logits)` with per-bin
/// coefficients `c` of the logits' shape; both axes are summed.
fn weighted_cross_entropy(g: &mut Graph, logits: Var, coeff: NdArray) -> Result<Var> {
    let (n, k, l) = check_logits(g.shape(logits))?;
    let lp = g.log_softmax(logits);
    let c = g.constant(coeff);
    let prod = g.mul(lp, c);
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / (n * k * l) as f64))
}

/// SimCC task loss as a graph node.
pub fn simcc_task_loss_node(g: &mut Graph, logits: Var, labels: &SimccLabels) -> Result<Var> {
    if g.shape(logits) != labels.targets.shape() {
        return Err(Error::invalid(format!(
            "logits {:?} vs targets {:?}",
            g.shape(logits),
            labels.targets.shape()
        )));
    }
    let per = 2 * labels.bins();
    let mut coeff = labels.targets.clone();
    for (chunk, &w) in coeff.data_mut().chunks_mut(per).zip(labels.weights.data()) {
        chunk.iter_mut().for_each(|v| *v *= w);
    }
    weighted_cross_entropy(g, logits, coeff)
}

pub fn simcc_task_loss(pred_logits: &NdArray, labels: &SimccLabels) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(pred_logits.clone());
    let l = simcc_task_loss_node(&mut g, x, labels)?;
    Ok(g.value(l).item())
}

/// Softmax over the last axis.
pub fn softmax_last(x: &NdArray) -> NdArray {
    let n = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Logit distillation as a graph node; the teacher logits are constants.
pub fn logit_distill_loss_node(g: &mut Graph, student: Var, teacher: &NdArray) -> Result<Var> {
    if g.shape(student) != teacher.shape() {
        return Err(Error::invalid(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.shape(student),
            teacher.shape()
        )));
    }
    weighted_cross_entropy(g, student, softmax_last(teacher))
}

pub fn logit_distill_loss(student: &NdArray, teacher: &NdArray) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(student.clone());
    let l = logit_distill_loss_node(&mut g, x, teacher)?;
    Ok(g.value(l).item())
}

/// `‖F̂_tea − F̄_stu‖² / (C·H·W)`, averaged over the batch. Both sides are
/// latent rows `[B·H·W, d]`; the teacher side enters as a constant.
pub fn feature_distill_loss_node(g: &mut Graph, latent_teacher: &NdArray, student: Var) -> Result<Var> {
    if g.shape(student) != latent_teacher.shape() {
        return Err(Error::invalid(format!(
            "student latents {:?} vs teacher latents {:?}",
            g.shape(student),
            latent_teacher.shape()
        )));
    }
    let t = g.constant(latent_teacher.clone());
    let d = g.sub(student, t);
    let sq = g.mul(d, d);
    // summing rows then dividing by B·C·H·W is the per-item norm over C·H·W
    Ok(g.mean(sq))
}

pub fn feature_distill_loss(latent_teacher: &FeatureBatch, student: &FeatureBatch) -> Result<f64> {
    if latent_teacher.origin() != Origin::LatentTeacher {
        return Err(Error::invalid(format!(
            "feature loss needs latent teacher features, got {:?}",
            latent_teacher.origin()
        )));
    }
    if !matches!(student.origin(), Origin::DenoisedStudent | Origin::Student) {
        return Err(Error::invalid(format!(
            "feature loss needs latent student features, got {:?}",
            student.origin()
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(student.rows());
    let l = feature_distill_loss_node(&mut g, &latent_teacher.rows(), s)?;
    Ok(g.value(l).item())
}

/// The five loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub rec: f64,
    pub diff: f64,
    pub fea: f64,
    pub logit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub rec: f64,
    pub diff: f64,
    pub fea: f64,
    pub logit: f64,
    pub r_of_e: f64,
    pub total: f64,
}

impl LossReport {
    /// `total` recomputed from the parts.
    pub fn composed(&self) -> f64 {
        self.task + self.rec + self.diff + self.r_of_e * (self.fea + self.logit)
    }
}

/// `total = task + rec + diff + R(E)·(fea + logit)`.
pub fn total_loss(parts: LossParts, epoch: usize, e_max: usize) -> Result<LossReport> {
    let p = parts;
    for (name, v) in [("task", p.task), ("rec", p.rec), ("diff", p.diff), ("fea", p.fea), ("logit", p.logit)] {
        if !v.is_finite() {
            return Err(Error::numeric(format!("{name} loss is {v}")));
        }
    }
    let r = weight_decay_r(epoch, e_max)?;
    let mut report = LossReport {
        task: p.task,
        rec: p.rec,
        diff: p.diff,
        fea: p.fea,
        logit: p.logit,
        r_of_e: r,
        total: 0.0,
    };
    report.total = report.composed();
    Ok(report)
}

/// One `metrics.csv` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub task: f64,
    pub rec: f64,
    pub diff: f64,
    pub fea: f64,
    pub logit: f64,
    pub r_of_e: f64,
    pub total: f64,
}

impl LossRow {
    pub fn new(epoch: usize, step: usize, r: &LossReport) -> Self {
        LossRow {
            epoch,
            step,
            task: r.task,
            rec: r.rec,
            diff: r.diff,
            fea: r.fea,
            logit: r.logit,
            r_of_e: r.r_of_e,
            total: r.total,
        }
    }
}

/// Loss terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Task,
    Rec,
    Diff,
    Fea,
    Logit,
}

/// Parameter groups of a distillation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Teacher,
    Autoencoder,
    Agent,
    Student,
}

/// Which parameter groups each loss term may update. The teacher appears
/// nowhere.
pub const ROUTING: [(LossTerm, &[ParamGroup]); 5] = [
    (LossTerm::Task, &[ParamGroup::Student]),
    (LossTerm::Rec, &[ParamGroup::Autoencoder]),
    (LossTerm::Diff, &[ParamGroup::Agent]),
    (LossTerm::Fea, &[ParamGroup::Student]),
    (LossTerm::Logit, &[ParamGroup::Student]),
];

pub fn routes(term: LossTerm) -> &'static [ParamGroup] {
    ROUTING.iter().find(|(t, _)| *t == term).map(|(_, g)| *g).unwrap()
}
