//! The feature agent: a small residual score network trained by denoising
//! score matching on latent teacher features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{prefixed, Linear, Module};
use crate::numerics::{AdamW, AdamWConfig, Bind, Graph, NdArray, Param, Rng, Var};
use crate::vpsde::{BatchNoise, FeatureBatch, NoiseSchedule, Origin, ScoreModel};

/// Regression target used by the denoising score-matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreTarget {
    /// The network output is the score itself; the target is the
    /// transition-kernel score `−z / noise_std`, regressed with weight
    /// `noise_std²`.
    Consistent,
    /// The network output regresses the drawn noise `z`; the score is
    /// recovered as `−output / noise_std` when calibrating.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreNetConfig {
    /// Feature channels `d` the network reads and writes.
    pub channels: usize,
    /// Bottleneck width.
    pub hidden: usize,
    /// Width of the sinusoidal timestep embedding (even).
    pub embed_dim: usize,
    pub target: ScoreTarget,
}

impl ScoreNetConfig {
    /// 4:1 bottleneck over `channels`.
    pub fn for_channels(channels: usize) -> Self {
        ScoreNetConfig {
            channels,
            hidden: (channels / 4).max(1),
            embed_dim: 16,
            target: ScoreTarget::Consistent,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::invalid("score network widths must be positive"));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("timestep embedding width must be even and ≥ 2"));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t ∈ [0, 1]`, angular frequencies 1 … 100.
pub fn time_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = if half > 1 {
            100f64.powf(j as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((freq * t).sin());
    }
    for j in 0..half {
        let freq = if half > 1 {
            100f64.powf(j as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((freq * t).cos());
    }
    out
}

/// channel-reduce → transform → channel-expand, with a skip connection and
/// a timestep bias on the reduced channels.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub reduce: Linear,
    pub time: Linear,
    pub transform: Linear,
    pub expand: Linear,
}

impl BottleneckBlock {
    fn new(channels: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Self {
        BottleneckBlock {
            reduce: Linear::init(channels, hidden, true, 1.0, rng),
            time: Linear::init(embed, hidden, false, 1.0, rng),
            transform: Linear::init(hidden, hidden, true, 1.0, rng),
            expand: Linear::init(hidden, channels, true, 0.5, rng),
        }
    }

    /// `emb` holds either one embedding row per input row or a single row
    /// shared by all of them.
    fn forward(&self, g: &mut Graph, x: Var, emb: Var, bind: Bind) -> Var {
        let r = self.reduce.forward(g, x, bind);
        let tb = self.time.forward(g, emb, bind);
        let r = if g.shape(tb)[0] == g.shape(r)[0] {
            g.add(r, tb)
        } else {
            g.add_bias(r, tb)
        };
        let r = g.silu(r);
        let r = self.transform.forward(g, r, bind);
        let r = g.silu(r);
        let e = self.expand.forward(g, r, bind);
        g.add(x, e)
    }
}

impl Module for BottleneckBlock {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("reduce", self.reduce.params());
        out.extend(prefixed("time", self.time.params()));
        out.extend(prefixed("transform", self.transform.params()));
        out.extend(prefixed("expand", self.expand.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.reduce.params_mut();
        out.extend(self.time.params_mut());
        out.extend(self.transform.params_mut());
        out.extend(self.expand.params_mut());
        out
    }
}

/// Score network `S_θ(x, t)`: two bottleneck blocks and a zero-initialized
/// 1×1 output projection.
#[derive(Debug, Clone)]
pub struct ScoreNetwork {
    pub config: ScoreNetConfig,
    pub blocks: Vec<BottleneckBlock>,
    pub head: Linear,
}

impl ScoreNetwork {
    pub fn new(config: ScoreNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let blocks = (0..2)
            .map(|_| BottleneckBlock::new(config.channels, config.hidden, config.embed_dim, rng))
            .collect();
        let head = Linear::zeros(config.channels, config.channels, true);
        Ok(ScoreNetwork {
            config,
            blocks,
            head,
        })
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.config.channels {
            return Err(Error::invalid(format!(
                "score network expects {} channels, got {c}",
                self.config.channels
            )));
        }
        Ok(())
    }

    /// Raw network output on rows `[M, d]`; `t_rows[i]` is the timestep of
    /// row `i`.
    pub fn forward_raw(&self, g: &mut Graph, x: Var, t_rows: &[f64], bind: Bind) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        self.check_channels(shape[1])?;
        if t_rows.len() != shape[0] {
            return Err(Error::invalid("one timestep per row is required"));
        }
        let e = self.config.embed_dim;
        let shared = t_rows.len() > 1 && t_rows.iter().all(|&t| t == t_rows[0]);
        let emb = if shared {
            NdArray::from_vec(&[1, e], time_embedding(t_rows[0], e))?
        } else {
            let mut emb = Vec::with_capacity(t_rows.len() * e);
            for &t in t_rows {
                emb.extend(time_embedding(t, e));
            }
            NdArray::from_vec(&[t_rows.len(), e], emb)?
        };
        let emb = g.constant(emb);
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, h, emb, bind);
        }
        Ok(self.head.forward(g, h, bind))
    }

    /// Network output `S_θ(x, t)` for a `B×d×H×W` array, in the convention
    /// of the configured [`ScoreTarget`].
    pub fn score_forward(&self, x: &NdArray, t: f64, schedule: &NoiseSchedule) -> Result<NdArray> {
        if x.shape().len() != 4 {
            return Err(Error::invalid(format!("expected B×d×H×W, got {:?}", x.shape())));
        }
        self.check_channels(x.shape()[1])?;
        let sd = schedule.noise_std(t)?;
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let mut g = Graph::new();
        let rows = g.constant(crate::numerics::nchw_to_rows(x));
        let t_rows = vec![t; b * h * w];
        let raw = self.forward_raw(&mut g, rows, &t_rows, Bind::Frozen)?;
        let out = match self.config.target {
            ScoreTarget::Consistent => g.scale(raw, -1.0 / sd),
            ScoreTarget::PaperLiteral => raw,
        };
        Ok(crate::numerics::rows_to_nchw(g.value(out), b, h, w))
    }

    /// Denoising score-matching loss on detached latent rows `[B·H·W, d]`,
    /// as a node of `g`. One timestep and one noise stream per batch item.
    pub fn dsm_loss_rows(
        &self,
        g: &mut Graph,
        latent_rows: &NdArray,
        batch: usize,
        schedule: &NoiseSchedule,
        rng: &mut Rng,
        bind: Bind,
    ) -> Result<Var> {
        let rows = latent_rows.shape()[0];
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(Error::invalid("latent rows do not split evenly into the batch"));
        }
        let per = rows / batch;
        let d = latent_rows.shape()[1];
        self.check_channels(d)?;
        let mut times = Vec::with_capacity(batch);
        for _ in 0..batch {
            // uniform on (0, 1]
            times.push(1.0 - rng.uniform());
        }
        let mut noise = BatchNoise::new(rng, batch, per);
        let z = noise.draw(d);
        let mut t_rows = Vec::with_capacity(rows);
        let mut scale_rows = Vec::with_capacity(rows);
        let mut std_rows = Vec::with_capacity(rows);
        for &t in &times {
            let (a, s) = schedule.marginal_coeffs(t)?;
            for _ in 0..per {
                t_rows.push(t);
                scale_rows.push(a);
                std_rows.push(s);
            }
        }
        let mut noisy = latent_rows.clone();
        for (i, row) in noisy.data_mut().chunks_mut(d).enumerate() {
            let zr = z.row(i);
            for (v, e) in row.iter_mut().zip(zr) {
                *v = scale_rows[i] * *v + std_rows[i] * e;
            }
        }
        let x = g.constant(noisy);
        let raw = self.forward_raw(g, x, &t_rows, bind)?;
        let zc = g.constant(z);
        let residual = match self.config.target {
            ScoreTarget::Consistent => {
                // noise_std · (S_θ − (−z / noise_std))
                let inv: Vec<f64> = std_rows.iter().map(|s| -1.0 / s).collect();
                let score = g.row_scale(raw, inv);
                let weighted = g.row_scale(score, std_rows);
                g.add(weighted, zc)
            }
            ScoreTarget::PaperLiteral => g.sub(raw, zc),
        };
        let sq = g.mul(residual, residual);
        Ok(g.mean(sq))
    }
}

impl ScoreModel for ScoreNetwork {
    fn score_rows(&self, g: &mut Graph, x: Var, t: f64, schedule: &NoiseSchedule) -> Result<Var> {
        let sd = schedule.noise_std(t)?;
        let rows = g.shape(x)[0];
        let raw = self.forward_raw(g, x, &vec![t; rows], Bind::Frozen)?;
        // both conventions reduce to −raw / noise_std as a score
        Ok(g.scale(raw, -1.0 / sd))
    }
}

impl Module for ScoreNetwork {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("blocks.{i}"), b.params()));
        }
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }
}

/// Scalar denoising score-matching loss for one latent-teacher batch.
pub fn dsm_loss(
    net: &ScoreNetwork,
    latent_teacher: &FeatureBatch,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    if latent_teacher.origin() != Origin::LatentTeacher {
        return Err(Error::invalid(format!(
            "score matching trains on latent teacher features, got {:?}",
            latent_teacher.origin()
        )));
    }
    let mut g = Graph::new();
    let loss = net.dsm_loss_rows(
        &mut g,
        &latent_teacher.rows(),
        latent_teacher.batch(),
        schedule,
        rng,
        Bind::Frozen,
    )?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::numeric("score-matching loss is non-finite"));
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrainConfig {
    pub net: ScoreNetConfig,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Anneal the learning rate to zero along a half cosine.
    #[serde(default)]
    pub cosine_decay: bool,
}

/// Learning rate for `epoch` (0-based) out of `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize, enabled: bool) -> f64 {
    if !enabled || epochs <= 1 {
        return base;
    }
    let progress = epoch as f64 / (epochs - 1) as f64;
    // floor keeps the final step non-zero
    base * (0.02 + 0.98 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone)]
pub struct AgentTrainState {
    pub optimizer: AdamW,
    pub epoch: usize,
    /// Mean loss per epoch.
    pub loss_history: Vec<f64>,
}

/// Fits a score network to a dataset of latent teacher batches.
pub fn train_agent(
    teacher_latents: &[FeatureBatch],
    cfg: &AgentTrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(ScoreNetwork, AgentTrainState)> {
    if teacher_latents.is_empty() {
        return Err(Error::invalid("agent training needs at least one batch"));
    }
    let mut rng = Rng::with_stream(cfg.seed, 0xa6e7);
    let mut net = ScoreNetwork::new(cfg.net.clone(), &mut rng)?;
    let mut state = AgentTrainState {
        optimizer: AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay)),
        epoch: 0,
        loss_history: Vec::with_capacity(cfg.epochs),
    };
    let cached: Vec<(NdArray, usize)> = teacher_latents
        .iter()
        .map(|b| {
            if b.origin() != Origin::LatentTeacher {
                return Err(Error::invalid("agent dataset must hold latent teacher batches"));
            }
            Ok((b.rows(), b.batch()))
        })
        .collect::<Result<_>>()?;
    for epoch in 0..cfg.epochs {
        state.optimizer.config.lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.cosine_decay);
        let mut total = 0.0;
        for (rows, batch) in &cached {
            let mut g = Graph::new();
            let loss = net.dsm_loss_rows(&mut g, rows, *batch, schedule, &mut rng, Bind::Trainable)?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "score-matching loss diverged in epoch {}",
                    state.epoch + 1
                )));
            }
            total += v;
            g.backward(loss)?.accumulate_into(net.params_mut());
            state.optimizer.step(&mut net.params_mut())?;
        }
        state.epoch += 1;
        state.loss_history.push(total / cached.len() as f64);
    }
    Ok((net, state))
}


/// Mean over `times` of the relative L2 error between the network's score
/// and the analytic score of `N(mean, variance)`, on fresh draws from each
/// perturbed marginal.
pub fn gaussian_score_error(
    net: &ScoreNetwork,
    mean: f64,
    variance: f64,
    times: &[f64],
    n_points: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<f64> {
    let mut total = 0.0;
    for &t in times {
        let (a, s) = schedule.marginal_coeffs(t)?;
        let sd_t = (a * a * variance + s * s).sqrt();
        let xs: Vec<f64> = (0..n_points).map(|_| a * mean + sd_t * rng.normal()).collect();
        let x = NdArray::from_vec(&[n_points, 1, 1, 1], xs)?;
        let truth = crate::vpsde::analytic_gaussian_score(&x, mean, variance, t, schedule)?;
        let mut g = Graph::new();
        let rows = g.constant(crate::numerics::nchw_to_rows(&x));
        let pred = net.score_rows(&mut g, rows, t, schedule)?;
        let pred = g.value(pred).clone().reshape(truth.shape())?;
        total += crate::numerics::relative_error(&pred, &truth);
    }
    Ok(total / times.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, relative_error};

    fn tiny(target: ScoreTarget) -> ScoreNetwork {
        let cfg = ScoreNetConfig {
            channels: 3,
            hidden: 2,
            embed_dim: 4,
            target,
        };
        let mut rng = Rng::new(0);
        let mut net = ScoreNetwork::new(cfg, &mut rng).unwrap();
        // non-zero head so every parameter influences the loss
        net.head = Linear::init(3, 3, true, 1.0, &mut rng);
        net
    }

    fn latent(b: usize, d: usize, hw: usize, seed: u64) -> FeatureBatch {
        let mut rng = Rng::new(seed);
        let v = NdArray::from_vec(&[b, d, hw, hw], rng.normals(b * d * hw * hw)).unwrap();
        FeatureBatch::new(v, Origin::LatentTeacher).unwrap()
    }

    #[test]
    fn output_shape_matches_input() {
        let net = tiny(ScoreTarget::Consistent);
        let s = NoiseSchedule::default();
        for hw in [1, 2] {
            let x = latent(4, 3, hw, 1);
            let out = net.score_forward(x.values(), 0.3, &s).unwrap();
            assert_eq!(out.shape(), x.values().shape());
        }
    }

    #[test]
    fn zero_head_outputs_zero() {
        let net = ScoreNetwork::new(ScoreNetConfig::for_channels(8), &mut Rng::new(2)).unwrap();
        let x = latent(3, 8, 1, 4);
        let out = net.score_forward(x.values(), 0.5, &NoiseSchedule::default()).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let net = tiny(ScoreTarget::Consistent);
        let x = latent(2, 5, 1, 0);
        assert!(net.score_forward(x.values(), 0.5, &NoiseSchedule::default()).is_err());
    }

    #[test]
    fn zero_net_initial_loss_is_unit_per_element() {
        let s = NoiseSchedule::default();
        for target in [ScoreTarget::Consistent, ScoreTarget::PaperLiteral] {
            let mut cfg = ScoreNetConfig::for_channels(4);
            cfg.target = target;
            let net = ScoreNetwork::new(cfg, &mut Rng::new(3)).unwrap();
            let x = latent(4096, 4, 1, 5);
            let loss = dsm_loss(&net, &x, &s, &mut Rng::new(6)).unwrap();
            assert!((loss - 1.0).abs() < 0.03, "{target:?}: {loss}");
        }
    }

    #[test]
    fn dsm_rejects_non_latent_batches() {
        let net = tiny(ScoreTarget::Consistent);
        let x = FeatureBatch::new(NdArray::zeros(&[1, 3, 1, 1]), Origin::Teacher).unwrap();
        assert!(dsm_loss(&net, &x, &NoiseSchedule::default(), &mut Rng::new(0)).is_err());
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let s = NoiseSchedule::default();
        for target in [ScoreTarget::Consistent, ScoreTarget::PaperLiteral] {
            let net = tiny(target);
            let x = latent(3, 3, 2, 7);
            let rows = x.rows();
            let loss_with = |n: &ScoreNetwork| {
                let mut g = Graph::new();
                let l = n
                    .dsm_loss_rows(&mut g, &rows, 3, &s, &mut Rng::new(8), Bind::Trainable)
                    .unwrap();
                (g.value(l).item(), g.backward(l).unwrap())
            };
            let (_, grads) = loss_with(&net);
            for (name, p) in net.params() {
                let analytic = grads.of_param(p).expect(&name).clone();
                let fd = finite_difference_grad(
                    |w| {
                        let mut probe = net.clone();
                        let slot = probe
                            .params_mut()
                            .into_iter()
                            .zip(net.params())
                            .find(|(_, (n, _))| *n == name)
                            .unwrap()
                            .0;
                        slot.value = w.clone();
                        loss_with(&probe).0
                    },
                    &p.value,
                    1e-6,
                )
                .unwrap();
                let err = relative_error(&analytic, &fd);
                assert!(err < 1e-4, "{target:?} {name}: {err}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = vec![latent(32, 4, 1, 11), latent(32, 4, 1, 12)];
        let cfg = AgentTrainConfig {
            net: ScoreNetConfig::for_channels(4),
            epochs: 30,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 9,
            cosine_decay: false,
        };
        let s = NoiseSchedule::default();
        let (a, sa) = train_agent(&data, &cfg, &s).unwrap();
        let (b, _) = train_agent(&data, &cfg, &s).unwrap();
        for ((_, pa), (_, pb)) in a.params().into_iter().zip(b.params()) {
            assert_eq!(pa.value, pb.value);
        }
        assert_eq!(sa.loss_history.len(), 30);
        assert!(sa.loss_history.iter().all(|v| v.is_finite()));
        assert!(train_agent(&[], &cfg, &s).is_err());
    }

    #[test]
    fn single_sample_overfit_decreases() {
        // one repeated sample; smoothed loss must fall over the first 50 epochs
        let v = NdArray::from_vec(&[16, 2, 1, 1], [0.8, -0.5].repeat(16)).unwrap();
        let data = vec![FeatureBatch::new(v, Origin::LatentTeacher).unwrap()];
        let cfg = AgentTrainConfig {
            net: ScoreNetConfig {
                channels: 2,
                hidden: 16,
                embed_dim: 8,
                target: ScoreTarget::Consistent,
            },
            epochs: 50,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 1,
            cosine_decay: false,
        };
        let (_, st) = train_agent(&data, &cfg, &NoiseSchedule::default()).unwrap();
        let smooth: Vec<f64> = st
            .loss_history
            .windows(10)
            .map(|w| w.iter().sum::<f64>() / 10.0)
            .collect();
        assert!(smooth.last().unwrap() < smooth.first().unwrap());
        let head: f64 = smooth[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = smooth[smooth.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.8 * head, "head {head} tail {tail}");
    }
}
