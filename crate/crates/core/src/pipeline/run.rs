//! Teacher training, joint distillation, evaluation and the files each
//! phase writes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::data::build_dataset;
use crate::autoencoder::{rec_loss_node, reconstruction_mse, LinearAutoencoder, StudentAdapters};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{
    feature_distill_loss_node, logit_distill_loss_node, simcc_task_loss_node, total_loss,
    weight_decay_r, LossParts, LossRow, SimccLabels,
};
use crate::metrics::{energy_distance, head_rows};
use crate::nn::Module;
use crate::numerics::{AdamW, AdamWConfig, Bind, Graph, NdArray, Param, Rng, Var, RNG_ALGORITHM};
use crate::score_agent::{ScoreNetConfig, ScoreNetwork};
use crate::synthetic_pose::{
    feature_rows, forward_pose, gather_rows, image_matrix, pck_of_logits, predict_logits,
    simcc_labels, train_pose_net, AgentPath, Dataset, PoseNetConfig, PoseTrainConfig, ToyPoseNet,
};
use crate::vpsde::{BatchNoise, NoiseSchedule, Origin, ScoreModel};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_EVAL: u64 = 3;
const EVAL_BATCH: usize = 256;

fn rows_for(items: &[usize], hw: usize) -> Vec<usize> {
    items.iter().flat_map(|&i| i * hw..(i + 1) * hw).collect()
}

/// PCK values keyed by threshold.
pub type PckTable = BTreeMap<String, f64>;

fn pck_table(logits: &NdArray, ds: &Dataset, taus: &[f64]) -> Result<PckTable> {
    let mut out = BTreeMap::new();
    for &tau in taus {
        out.insert(format!("{tau}"), pck_of_logits(logits, &ds.val, tau, ds.generator.grid)?);
    }
    Ok(out)
}

fn check_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    let d = &cfg.data;
    if ds.generator.grid != d.grid || ds.generator.keypoints != d.keypoints || ds.train.is_empty() || ds.val.is_empty() {
        return Err(Error::invalid("dataset does not match the configured task"));
    }
    Ok(())
}

pub struct TeacherOutcome {
    pub net: ToyPoseNet,
    pub history: Vec<f64>,
    pub pck: PckTable,
}

pub fn train_teacher(cfg: &ExperimentConfig, seed: u64, ds: &Dataset) -> Result<TeacherOutcome> {
    check_dataset(cfg, ds)?;
    let mut net = ToyPoseNet::new(cfg.teacher_net()?, &mut Rng::with_stream(seed, STREAM_INIT))?;
    let labels = simcc_labels(&ds.train, cfg.data.grid, cfg.data.bins, cfg.data.label_sigma)?;
    let t = &cfg.teacher;
    let tc = PoseTrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        lr: t.lr,
        weight_decay: t.weight_decay,
        cosine_decay: t.cosine_decay,
    };
    let mut rng = Rng::with_stream(seed, STREAM_TRAIN);
    let history = train_pose_net(&mut net, &image_matrix(&ds.train), &labels, &tc, &mut rng)?;
    let logits = predict_logits(&net, &image_matrix(&ds.val), EVAL_BATCH)?;
    let pck = pck_table(&logits, ds, &cfg.eval.taus)?;
    Ok(TeacherOutcome { net, history, pck })
}

pub fn teacher_checkpoint(cfg: &ExperimentConfig, net: &ToyPoseNet) -> Checkpoint {
    let meta = serde_json::json!({ "net": net.config });
    let mut ck = Checkpoint::new("teacher", &cfg.hash(), None, meta);
    ck.insert_module("teacher", net);
    ck
}

/// Rebuilds a teacher and checks it fits the configured task.
pub fn load_teacher(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<ToyPoseNet> {
    if ck.kind != "teacher" {
        return Err(Error::Format(format!("expected a teacher checkpoint, got `{}`", ck.kind)));
    }
    let net_cfg: PoseNetConfig = serde_json::from_value(ck.meta["net"].clone())?;
    let d = &cfg.data;
    if net_cfg.grid != d.grid || net_cfg.keypoints != d.keypoints || net_cfg.bins != d.bins {
        return Err(Error::invalid(format!(
            "teacher was trained for grid {}, {} keypoints, {} bins; config has {}, {}, {}",
            net_cfg.grid, net_cfg.keypoints, net_cfg.bins, d.grid, d.keypoints, d.bins
        )));
    }
    if net_cfg.spatial != cfg.model.spatial {
        return Err(Error::invalid("teacher feature map size differs from the configured one"));
    }
    let mut net = ToyPoseNet::new(net_cfg, &mut Rng::new(0))?;
    ck.load_module("teacher", &mut net)?;
    Ok(net)
}

/// Everything a distillation run trains. Plain mode holds only the student.
#[derive(Debug, Clone)]
pub struct DistillModels {
    pub mode: Mode,
    pub student: ToyPoseNet,
    pub adapters: Option<StudentAdapters>,
    pub autoencoder: Option<LinearAutoencoder>,
    pub agent: Option<ScoreNetwork>,
}

/// Parameter counts per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub student: usize,
    pub adapters: usize,
    pub autoencoder: usize,
    pub agent: usize,
}

fn agent_config(cfg: &ExperimentConfig) -> ScoreNetConfig {
    let d = cfg.latent_dim();
    let mut c = ScoreNetConfig::for_channels(d);
    if let Some(h) = cfg.agent.hidden {
        c.hidden = h;
    }
    c.embed_dim = cfg.agent.embed_dim;
    c.target = cfg.agent.score_target;
    c
}

impl DistillModels {
    pub fn new(cfg: &ExperimentConfig, rng: &mut Rng) -> Result<Self> {
        let student = ToyPoseNet::new(cfg.student_net()?, rng)?;
        let mode = cfg.distill.mode;
        if mode == Mode::Plain {
            return Ok(DistillModels {
                mode,
                student,
                adapters: None,
                autoencoder: None,
                agent: None,
            });
        }
        let d = cfg.latent_dim();
        let c_stu = student.channels();
        let adapters = StudentAdapters::new(c_stu, d, c_stu, rng)?;
        let autoencoder = LinearAutoencoder::new(cfg.teacher_channels(), d, rng)?;
        let agent = match mode {
            Mode::AgentPose => Some(ScoreNetwork::new(agent_config(cfg), rng)?),
            _ => None,
        };
        Ok(DistillModels {
            mode,
            student,
            adapters: Some(adapters),
            autoencoder: Some(autoencoder),
            agent,
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        ParamCounts {
            student: self.student.param_count(),
            adapters: self.adapters.as_ref().map_or(0, |m| m.param_count()),
            autoencoder: self.autoencoder.as_ref().map_or(0, |m| m.param_count()),
            agent: self.agent.as_ref().map_or(0, |m| m.param_count()),
        }
    }

    /// Agent-path view for inference or training.
    pub fn path<'a>(
        &'a self,
        cfg: &ExperimentConfig,
        schedule: &'a NoiseSchedule,
        stochastic: bool,
    ) -> Option<AgentPath<'a>> {
        let adapters = self.adapters.as_ref()?;
        Some(AgentPath {
            adapters,
            agent: self.agent.as_ref().map(|a| a as &dyn ScoreModel),
            schedule,
            t_s: cfg.agent.t_s,
            steps: cfg.agent.n_infer_steps,
            stochastic,
        })
    }

    fn student_params_mut(&mut self) -> Vec<&mut Param> {
        let mut ps = self.student.params_mut();
        if let Some(a) = &mut self.adapters {
            ps.extend(a.params_mut());
        }
        ps
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig, schedule: &NoiseSchedule) -> Checkpoint {
        let meta = serde_json::json!({
            "mode": self.mode,
            "student": self.student.config,
            "latent_dim": self.adapters.as_ref().map(|a| a.latent_dim()),
            "agent": self.agent.as_ref().map(|a| &a.config),
            "t_s": cfg.agent.t_s,
            "n_infer_steps": cfg.agent.n_infer_steps,
        });
        let mut ck = Checkpoint::new("student", &cfg.hash(), Some(schedule.meta()), meta);
        ck.insert_module("student", &self.student);
        if let Some(a) = &self.adapters {
            ck.insert_module("adapters", a);
        }
        if let Some(a) = &self.autoencoder {
            ck.insert_module("autoencoder", a);
        }
        if let Some(a) = &self.agent {
            ck.insert_module("agent", a);
        }
        ck
    }

    /// Rebuilds the models described by `cfg` and loads their weights.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &ExperimentConfig) -> Result<Self> {
        if ck.kind != "student" {
            return Err(Error::Format(format!("expected a student checkpoint, got `{}`", ck.kind)));
        }
        let mode: Mode = serde_json::from_value(ck.meta["mode"].clone())?;
        if mode != cfg.distill.mode {
            return Err(Error::invalid(format!(
                "checkpoint holds a {} run, config asks for {}",
                mode.name(),
                cfg.distill.mode.name()
            )));
        }
        let mut m = DistillModels::new(cfg, &mut Rng::new(0))?;
        ck.load_module("student", &mut m.student)?;
        if let Some(a) = &mut m.adapters {
            ck.load_module("adapters", a)?;
        }
        if let Some(a) = &mut m.autoencoder {
            ck.load_module("autoencoder", a)?;
        }
        if let Some(a) = &mut m.agent {
            ck.load_module("agent", a)?;
        }
        Ok(m)
    }
}

/// Frozen teacher outputs on the training split.
pub struct TeacherTargets {
    /// Feature rows `[n·H·W, C_tea]`.
    pub rows: NdArray,
    /// Logits `[n, K, 2, L]`.
    pub logits: NdArray,
}

impl TeacherTargets {
    pub fn compute(teacher: &ToyPoseNet, images: &NdArray) -> Result<Self> {
        Ok(TeacherTargets {
            rows: feature_rows(teacher, images, EVAL_BATCH)?,
            logits: predict_logits(teacher, images, EVAL_BATCH)?,
        })
    }
}

/// One minibatch of distillation inputs.
pub struct StepBatch {
    pub images: NdArray,
    pub labels: SimccLabels,
    pub teacher_rows: NdArray,
    pub teacher_logits: NdArray,
}

impl StepBatch {
    pub fn gather(
        items: &[usize],
        images: &NdArray,
        labels: &SimccLabels,
        targets: &TeacherTargets,
        hw: usize,
    ) -> Self {
        let l = targets.logits.shape().to_vec();
        let per = l[1] * l[2] * l[3];
        let flat = targets.logits.clone().reshape(&[l[0], per]).unwrap();
        let logits = gather_rows(&flat, items)
            .reshape(&[items.len(), l[1], l[2], l[3]])
            .unwrap();
        StepBatch {
            images: gather_rows(images, items),
            labels: labels.select(items),
            teacher_rows: gather_rows(&targets.rows, &rows_for(items, hw)),
            teacher_logits: logits,
        }
    }
}

/// Loss nodes of one step. Absent terms are identically zero.
#[derive(Debug, Clone, Copy)]
pub struct StepTerms {
    pub task: Var,
    pub rec: Option<Var>,
    pub diff: Option<Var>,
    pub fea: Option<Var>,
    pub logit: Option<Var>,
    pub total: Var,
}

impl StepTerms {
    pub fn parts(&self, g: &Graph) -> LossParts {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossParts {
            task: g.value(self.task).item(),
            rec: v(self.rec),
            diff: v(self.diff),
            fea: v(self.fea),
            logit: v(self.logit),
        }
    }
}

/// Builds the full objective of one step on a single tape. The teacher
/// enters only as constants; the autoencoder is trainable only inside the
/// reconstruction term; the agent is trainable only inside the
/// score-matching term and frozen on the calibration path.
pub fn build_step(
    g: &mut Graph,
    models: &DistillModels,
    batch: &StepBatch,
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
    r_of_e: f64,
    rng: &mut Rng,
) -> Result<StepTerms> {
    let b = batch.images.shape()[0];
    let hw = models.student.config.hw();
    let x = g.constant(batch.images.clone());
    let feats = models.student.backbone_rows(g, x, Bind::Trainable)?;
    let (mut rec, mut diff, mut fea, mut logit) = (None, None, None, None);
    let head_in = match (&models.autoencoder, models.path(cfg, schedule, cfg.agent.stochastic_train)) {
        (Some(ae), Some(path)) => {
            let ft = g.constant(batch.teacher_rows.clone());
            let lat = ae.encode_rows(g, ft, Bind::Trainable);
            let recon = ae.decode_rows(g, lat, Bind::Trainable);
            rec = Some(rec_loss_node(g, ft, recon)?);
            let lat_t = g.value(lat).clone();
            if let Some(agent) = &models.agent {
                diff = Some(agent.dsm_loss_rows(g, &lat_t, b, schedule, rng, Bind::Trainable)?);
            }
            let mut noise = BatchNoise::new(rng, b, hw);
            let nodes = path.forward_rows(g, feats, &mut noise, Bind::Trainable)?;
            fea = Some(feature_distill_loss_node(g, &lat_t, nodes.calibrated)?);
            nodes.head_input
        }
        _ => feats,
    };
    let logits = models.student.head_logits(g, head_in, Bind::Trainable)?;
    let task = simcc_task_loss_node(g, logits, &batch.labels)?;
    if models.mode != Mode::Plain {
        logit = Some(logit_distill_loss_node(g, logits, &batch.teacher_logits)?);
    }
    let mut total = task;
    for t in [rec, diff].into_iter().flatten() {
        total = g.add(total, t);
    }
    if let (Some(f), Some(l)) = (fea, logit) {
        let kd = g.add(f, l);
        let kd = g.scale(kd, r_of_e);
        total = g.add(total, kd);
    }
    Ok(StepTerms {
        task,
        rec,
        diff,
        fea,
        logit,
        total,
    })
}

/// Reconstruction plus score matching only, for agent warm-up.
fn build_pretrain_step(
    g: &mut Graph,
    models: &DistillModels,
    teacher_rows: &NdArray,
    batch: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var> {
    let (Some(ae), Some(agent)) = (&models.autoencoder, &models.agent) else {
        return Err(Error::invalid("warm-up needs an autoencoder and an agent"));
    };
    let ft = g.constant(teacher_rows.clone());
    let lat = ae.encode_rows(g, ft, Bind::Trainable);
    let recon = ae.decode_rows(g, lat, Bind::Trainable);
    let rec = rec_loss_node(g, ft, recon)?;
    let lat_t = g.value(lat).clone();
    let diff = agent.dsm_loss_rows(g, &lat_t, batch, schedule, rng, Bind::Trainable)?;
    Ok(g.add(rec, diff))
}

struct Optimizers {
    student: AdamW,
    autoencoder: AdamW,
    agent: AdamW,
}

impl Optimizers {
    fn new(cfg: &ExperimentConfig) -> Self {
        Optimizers {
            student: AdamW::new(AdamWConfig::new(cfg.student.lr, cfg.student.weight_decay)),
            autoencoder: AdamW::new(AdamWConfig::new(cfg.autoencoder.lr, 0.0)),
            agent: AdamW::new(AdamWConfig::new(cfg.agent.lr, 0.0)),
        }
    }

    /// Accumulates `loss` gradients and steps every group the loss reached.
    fn apply(&mut self, g: &Graph, loss: Var, models: &mut DistillModels, student: bool) -> Result<()> {
        let grads = g.backward(loss)?;
        if student {
            let mut ps = models.student_params_mut();
            grads.accumulate_into(ps.iter_mut().map(|p| &mut **p));
            self.student.step(&mut ps)?;
        }
        if let Some(ae) = &mut models.autoencoder {
            let mut ps = ae.params_mut();
            grads.accumulate_into(ps.iter_mut().map(|p| &mut **p));
            self.autoencoder.step(&mut ps)?;
        }
        if let Some(agent) = &mut models.agent {
            let mut ps = agent.params_mut();
            grads.accumulate_into(ps.iter_mut().map(|p| &mut **p));
            self.agent.step(&mut ps)?;
        }
        Ok(())
    }
}

pub struct DistillOutcome {
    pub models: DistillModels,
    pub rows: Vec<LossRow>,
}

/// Trains the student (and, outside plain mode, the autoencoder and agent)
/// against a frozen teacher. One metrics row per epoch holds the mean of
/// each term over that epoch's steps.
pub fn distill(cfg: &ExperimentConfig, seed: u64, teacher: &ToyPoseNet, ds: &Dataset) -> Result<DistillOutcome> {
    check_dataset(cfg, ds)?;
    if teacher.channels() != cfg.teacher_channels() {
        return Err(Error::invalid(format!(
            "teacher has {} channels, config expects {}",
            teacher.channels(),
            cfg.teacher_channels()
        )));
    }
    let schedule = cfg.schedule()?;
    let mut models = DistillModels::new(cfg, &mut Rng::with_stream(seed, STREAM_INIT))?;
    let mut rng = Rng::with_stream(seed, STREAM_TRAIN);
    let images = image_matrix(&ds.train);
    let labels = simcc_labels(&ds.train, cfg.data.grid, cfg.data.bins, cfg.data.label_sigma)?;
    let targets = TeacherTargets::compute(teacher, &images)?;
    let hw = cfg.model.spatial * cfg.model.spatial;
    let n = ds.train.len();
    let bs = cfg.student.batch_size;
    let mut opts = Optimizers::new(cfg);
    let mut order: Vec<usize> = (0..n).collect();

    if models.mode == Mode::AgentPose {
        for _ in 0..cfg.distill.pretrain_epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(bs) {
                let rows = gather_rows(&targets.rows, &rows_for(chunk, hw));
                let mut g = Graph::new();
                let loss = build_pretrain_step(&mut g, &models, &rows, chunk.len(), &schedule, &mut rng)?;
                opts.apply(&g, loss, &mut models, false)?;
            }
        }
    }

    let e_max = cfg.distill.e_max;
    let mut rows = Vec::with_capacity(e_max);
    let mut step = 0usize;
    for epoch in 1..=e_max {
        let r = weight_decay_r(epoch, e_max)?;
        rng.shuffle(&mut order);
        let mut sum = LossParts::default();
        let mut steps = 0usize;
        for chunk in order.chunks(bs) {
            let batch = StepBatch::gather(chunk, &images, &labels, &targets, hw);
            let mut g = Graph::new();
            let terms = build_step(&mut g, &models, &batch, cfg, &schedule, r, &mut rng)?;
            let total = g.value(terms.total).item();
            if !total.is_finite() {
                return Err(Error::numeric(format!(
                    "total loss is {total} at epoch {epoch}, first bad op `{}`",
                    g.non_finite_op().unwrap_or("?")
                )));
            }
            let p = terms.parts(&g);
            sum.task += p.task;
            sum.rec += p.rec;
            sum.diff += p.diff;
            sum.fea += p.fea;
            sum.logit += p.logit;
            opts.apply(&g, terms.total, &mut models, true)?;
            steps += 1;
            step += 1;
        }
        let k = steps as f64;
        let mean = LossParts {
            task: sum.task / k,
            rec: sum.rec / k,
            diff: sum.diff / k,
            fea: sum.fea / k,
            logit: sum.logit / k,
        };
        rows.push(LossRow::new(epoch, step, &total_loss(mean, epoch, e_max)?));
    }
    Ok(DistillOutcome { models, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pck: PckTable,
    /// Energy distance of un-noised student latents to teacher latents.
    pub energy_pre: Option<f64>,
    /// Same for the calibrated latents fed to the post-adapter.
    pub energy_post: Option<f64>,
    /// Per-element reconstruction error on validation teacher features.
    pub rec_mse: Option<f64>,
    /// Score-network evaluations per sample at inference.
    pub agent_evals_per_sample: usize,
}

/// Validation PCK and latent-distribution distances.
pub fn evaluate(
    models: &DistillModels,
    teacher: &ToyPoseNet,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<EvalReport> {
    check_dataset(cfg, ds)?;
    let schedule = cfg.schedule()?;
    let mut rng = Rng::with_stream(seed, STREAM_EVAL);
    let images = image_matrix(&ds.val);
    let n = ds.val.len();
    let c = &models.student.config;
    let path = models.path(cfg, &schedule, cfg.agent.stochastic_eval);
    let mut logits = Vec::with_capacity(n * c.logit_len());
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    let items: Vec<usize> = (0..n).collect();
    for chunk in items.chunks(EVAL_BATCH) {
        let x = gather_rows(&images, chunk);
        let out = match &path {
            Some(p) => forward_pose(&models.student, &x, Origin::Student, Some((p, &mut rng)))?,
            None => forward_pose(&models.student, &x, Origin::Student, None)?,
        };
        logits.extend(out.logits.into_data());
        if let (Some(a), Some(b)) = (out.latent, out.calibrated) {
            pre.extend(a.into_data());
            post.extend(b.into_data());
        }
    }
    let logits = NdArray::from_vec(&[n, c.keypoints, 2, c.bins], logits)?;
    let pck = pck_table(&logits, ds, &cfg.eval.taus)?;
    let (mut energy_pre, mut energy_post, mut rec_mse) = (None, None, None);
    if let Some(ae) = &models.autoencoder {
        let t_rows = feature_rows(teacher, &images, EVAL_BATCH)?;
        rec_mse = Some(reconstruction_mse(ae, &t_rows));
        let mut g = Graph::new();
        let ft = g.constant(t_rows);
        let lat = ae.encode_rows(&mut g, ft, Bind::Frozen);
        let lat_t = head_rows(g.value(lat), cfg.eval.energy_samples);
        let d = ae.latent_dim();
        let rows = pre.len() / d;
        let pre = NdArray::from_vec(&[rows, d], pre)?;
        let post = NdArray::from_vec(&[rows, d], post)?;
        let k = cfg.eval.energy_samples;
        energy_pre = Some(energy_distance(&head_rows(&pre, k), &lat_t)?);
        energy_post = Some(if models.agent.is_some() {
            energy_distance(&head_rows(&post, k), &lat_t)?
        } else {
            energy_pre.unwrap()
        });
    }
    Ok(EvalReport {
        pck,
        energy_pre,
        energy_post,
        rec_mse,
        agent_evals_per_sample: if models.agent.is_some() { cfg.agent.n_infer_steps } else { 0 },
    })
}

/// Per-run record of a distillation.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub rows: Vec<LossRow>,
    pub eval: EvalReport,
    pub param_counts: ParamCounts,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub kind: String,
    pub mode: Option<Mode>,
    pub seed: u64,
    pub config_hash: String,
    pub rng: String,
    pub pck: PckTable,
    pub energy_pre: Option<f64>,
    pub energy_post: Option<f64>,
    pub rec_mse: Option<f64>,
    pub agent_evals_per_sample: usize,
    pub param_counts: Option<ParamCounts>,
}

impl RunSummary {
    fn new(kind: &str, cfg: &ExperimentConfig, seed: u64) -> Self {
        RunSummary {
            schema_version: METRICS_SCHEMA_VERSION,
            kind: kind.into(),
            mode: None,
            seed,
            config_hash: cfg.hash(),
            rng: RNG_ALGORITHM.into(),
            pck: BTreeMap::new(),
            energy_pre: None,
            energy_post: None,
            rec_mse: None,
            agent_evals_per_sample: 0,
            param_counts: None,
        }
    }

    fn with_eval(mut self, e: &EvalReport) -> Self {
        self.pck = e.pck.clone();
        self.energy_pre = e.energy_pre;
        self.energy_post = e.energy_post;
        self.rec_mse = e.rec_mse;
        self.agent_evals_per_sample = e.agent_evals_per_sample;
        self
    }
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_loss_rows(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    write_json(&dir.join("timing.json"), &serde_json::json!({ "wall_clock_seconds": seconds }))
}

/// Standard file names inside an output directory.
pub fn teacher_path(dir: &Path) -> PathBuf {
    dir.join("teacher.json")
}

pub fn student_path(dir: &Path) -> PathBuf {
    dir.join("student.json")
}

/// Writes `dataset.bin`.
pub fn run_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    ensure_dir(out)?;
    let ds = build_dataset(&cfg.data)?;
    let p = out.join("dataset.bin");
    super::data::write_dataset(&p, &ds)?;
    Ok(p)
}

/// Trains and saves the teacher; writes `teacher.json`,
/// `teacher_metrics.csv`, `summary.json` and `timing.json`.
pub fn run_train_teacher(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunSummary> {
    let start = Instant::now();
    ensure_dir(out)?;
    let ds = build_dataset(&cfg.data)?;
    let t = train_teacher(cfg, seed, &ds)?;
    teacher_checkpoint(cfg, &t.net).save(&teacher_path(out))?;
    let mut w = csv::Writer::from_path(out.join("teacher_metrics.csv"))?;
    w.write_record(["epoch", "task"])?;
    for (i, l) in t.history.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    let mut summary = RunSummary::new("teacher", cfg, seed);
    summary.pck = t.pck;
    write_json(&out.join("summary.json"), &summary)?;
    write_timing(out, start.elapsed().as_secs_f64())?;
    Ok(summary)
}

/// Distills against a saved teacher and evaluates the result; writes
/// `student.json`, `metrics.csv`, `summary.json` and `timing.json`.
pub fn run_distill(cfg: &ExperimentConfig, seed: u64, teacher_ckpt: &Path, out: &Path) -> Result<MetricsRecord> {
    let teacher = load_teacher(&Checkpoint::load(teacher_ckpt)?, cfg)?;
    let ds = build_dataset(&cfg.data)?;
    distill_to_dir(cfg, seed, &teacher, &ds, out)
}

/// [`run_distill`] with the teacher and dataset already in memory.
pub fn distill_to_dir(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &ToyPoseNet,
    ds: &Dataset,
    out: &Path,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    ensure_dir(out)?;
    let outcome = distill(cfg, seed, teacher, ds)?;
    let eval = evaluate(&outcome.models, teacher, ds, cfg, seed)?;
    outcome
        .models
        .checkpoint(cfg, &cfg.schedule()?)
        .save(&student_path(out))?;
    write_loss_rows(&out.join("metrics.csv"), &outcome.rows)?;
    let param_counts = outcome.models.param_counts();
    let mut summary = RunSummary::new("distill", cfg, seed).with_eval(&eval);
    summary.mode = Some(cfg.distill.mode);
    summary.param_counts = Some(param_counts);
    write_json(&out.join("summary.json"), &summary)?;
    let secs = start.elapsed().as_secs_f64();
    write_timing(out, secs)?;
    Ok(MetricsRecord {
        rows: outcome.rows,
        eval,
        param_counts,
        wall_clock_seconds: secs,
    })
}

/// Re-evaluates saved checkpoints; writes `eval.json`.
pub fn run_eval(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher_ckpt: &Path,
    student_ckpt: &Path,
    out: &Path,
) -> Result<EvalReport> {
    let teacher = load_teacher(&Checkpoint::load(teacher_ckpt)?, cfg)?;
    let models = DistillModels::from_checkpoint(&Checkpoint::load(student_ckpt)?, cfg)?;
    ensure_dir(out)?;
    let ds = build_dataset(&cfg.data)?;
    let eval = evaluate(&models, &teacher, &ds, cfg, seed)?;
    let mut summary = RunSummary::new("eval", cfg, seed).with_eval(&eval);
    summary.mode = Some(cfg.distill.mode);
    summary.param_counts = Some(models.param_counts());
    write_json(&out.join("eval.json"), &summary)?;
    Ok(eval)
}
