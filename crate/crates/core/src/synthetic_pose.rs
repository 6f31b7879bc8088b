//! Synthetic keypoint task: a blob-image generator, the SimCC coordinate
//! codec, PCK, and small dense pose networks in capacity tiers.
//!
//! Pixel centers sit at integer coordinates `0..G`, so keypoints live in
//! `[0, G − 1]` and bin `b` of the codec maps to coordinate `b·G/L`.

use serde::{Deserialize, Serialize};

use crate::autoencoder::StudentAdapters;
use crate::error::{Error, Result};
use crate::losses::{simcc_task_loss_node, SimccLabels};
use crate::nn::{prefixed, Linear, Module};
use crate::numerics::{AdamW, AdamWConfig, Bind, Graph, NdArray, Param, Rng, Var};
use crate::score_agent::cosine_lr;
use crate::vpsde::{
    calibrate_rows, perturb_rows, BatchNoise, FeatureBatch, NoiseSchedule, Origin, ScoreModel,
};

/// Parameters of the image generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub keypoints: usize,
    pub grid: usize,
    pub blob_width: f64,
    pub distractors: usize,
    pub distractor_amplitude: f64,
    pub distractor_width: [f64; 2],
    pub pixel_noise: f64,
    pub visibility: f64,
}

impl GeneratorConfig {
    pub fn new(keypoints: usize, grid: usize) -> Self {
        GeneratorConfig {
            keypoints,
            grid,
            blob_width: 1.0,
            distractors: 2,
            distractor_amplitude: 0.6,
            distractor_width: [0.8, 1.6],
            pixel_noise: 0.05,
            visibility: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints == 0 || self.grid < 2 {
            return Err(Error::invalid("need at least one keypoint and a grid of side ≥ 2"));
        }
        if !(self.blob_width > 0.0) || !(self.distractor_width[0] > 0.0) {
            return Err(Error::invalid("blob widths must be positive"));
        }
        if self.distractor_width[1] < self.distractor_width[0] {
            return Err(Error::invalid("distractor width range is reversed"));
        }
        if !(0.0..=1.0).contains(&self.visibility) || self.pixel_noise < 0.0 {
            return Err(Error::invalid("visibility must lie in [0, 1] and pixel noise be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    /// Row-major `G × G` grid.
    pub image: Vec<f64>,
    /// `(x, y)` per keypoint.
    pub keypoints: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

fn gaussian_blob(image: &mut [f64], grid: usize, center: [f64; 2], amp: f64, width: f64) {
    let inv = 1.0 / (2.0 * width * width);
    for yi in 0..grid {
        let dy = yi as f64 - center[1];
        for xi in 0..grid {
            let dx = xi as f64 - center[0];
            image[yi * grid + xi] += amp * (-(dx * dx + dy * dy) * inv).exp();
        }
    }
}

/// Renders one sample from its own random stream. Keypoint `k` has
/// amplitude `+1` for even `k` and `−1` for odd `k`; its row coordinate is
/// drawn inside horizontal band `k / 2` of `ceil(K/2)` equal bands.
pub fn render_sample(cfg: &GeneratorConfig, rng: &mut Rng) -> SyntheticSample {
    let g = cfg.grid;
    let hi = (g - 1) as f64;
    let bands = cfg.keypoints.div_ceil(2);
    let band_h = hi / bands as f64;
    let mut image = vec![0.0; g * g];
    let mut keypoints = Vec::with_capacity(cfg.keypoints);
    let mut visible = Vec::with_capacity(cfg.keypoints);
    for k in 0..cfg.keypoints {
        let x = rng.uniform_range(0.0, hi);
        let band = (k / 2) as f64;
        let y = rng.uniform_range(band * band_h, (band + 1.0) * band_h);
        let vis = rng.uniform() < cfg.visibility;
        if vis {
            let amp = if k % 2 == 0 { 1.0 } else { -1.0 };
            gaussian_blob(&mut image, g, [x, y], amp, cfg.blob_width);
        }
        keypoints.push([x, y]);
        visible.push(vis);
    }
    for _ in 0..cfg.distractors {
        let c = [rng.uniform_range(0.0, hi), rng.uniform_range(0.0, hi)];
        let a = rng.uniform_range(-cfg.distractor_amplitude, cfg.distractor_amplitude);
        let w = rng.uniform_range(cfg.distractor_width[0], cfg.distractor_width[1]);
        gaussian_blob(&mut image, g, c, a, w);
    }
    if cfg.pixel_noise > 0.0 {
        for v in &mut image {
            *v += cfg.pixel_noise * rng.normal();
        }
    }
    SyntheticSample {
        image,
        keypoints,
        visible,
    }
}

/// `n` samples; sample `i` uses stream `i` of `seed`, so any prefix or
/// subset can be regenerated independently.
pub fn generate_samples(cfg: &GeneratorConfig, n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    Ok((0..n)
        .map(|i| render_sample(cfg, &mut Rng::with_stream(seed, i as u64)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub generator: GeneratorConfig,
    pub seed: u64,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
}

/// Generates `n_train + n_val` samples; the first `n_train` form the
/// training split.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<Dataset> {
    if n_train + n_val == 0 {
        return Err(Error::invalid("dataset must contain at least one sample"));
    }
    let mut all = generate_samples(cfg, n_train + n_val, seed)?;
    let val = all.split_off(n_train);
    Ok(Dataset {
        generator: cfg.clone(),
        seed,
        train: all,
        val,
    })
}

/// Images as a `[n, G·G]` matrix.
pub fn image_matrix(samples: &[SyntheticSample]) -> NdArray {
    let cols = samples.first().map_or(0, |s| s.image.len());
    let mut data = Vec::with_capacity(samples.len() * cols);
    for s in samples {
        data.extend_from_slice(&s.image);
    }
    NdArray::from_vec(&[samples.len(), cols], data).unwrap()
}

/// SimCC targets `[K, 2, L]` for one keypoint set: per axis a Gaussian of
/// width `sigma` bins centred on `coord·L/G`, normalized to sum 1. With
/// `sigma = 0` the target is one-hot at `round(coord·L/G)`.
pub fn encode_simcc(coords: &[[f64; 2]], grid: usize, bins: usize, sigma: f64) -> Result<NdArray> {
    if bins < grid {
        return Err(Error::invalid(format!("need at least {grid} bins, got {bins}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("label sigma must be ≥ 0, got {sigma}")));
    }
    let per_unit = bins as f64 / grid as f64;
    let mut out = Vec::with_capacity(coords.len() * 2 * bins);
    for (k, c) in coords.iter().enumerate() {
        for &v in c {
            if !(0.0..grid as f64).contains(&v) {
                return Err(Error::invalid(format!(
                    "keypoint {k} coordinate {v} outside [0, {grid})"
                )));
            }
            let mu = v * per_unit;
            if sigma == 0.0 {
                let hot = (mu.round() as usize).min(bins - 1);
                out.extend((0..bins).map(|b| if b == hot { 1.0 } else { 0.0 }));
                continue;
            }
            let d2: Vec<f64> = (0..bins).map(|b| (b as f64 - mu).powi(2)).collect();
            let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
            let w: Vec<f64> = d2.iter().map(|d| (-(d - min) / (2.0 * sigma * sigma)).exp()).collect();
            let s: f64 = w.iter().sum();
            out.extend(w.iter().map(|x| x / s));
        }
    }
    NdArray::from_vec(&[coords.len(), 2, bins], out)
}

/// Batched labels; invisible keypoints get weight 0.
pub fn simcc_labels(samples: &[SyntheticSample], grid: usize, bins: usize, sigma: f64) -> Result<SimccLabels> {
    let k = samples.first().map_or(0, |s| s.keypoints.len());
    let mut t = Vec::with_capacity(samples.len() * k * 2 * bins);
    let mut w = Vec::with_capacity(samples.len() * k);
    for s in samples {
        t.extend(encode_simcc(&s.keypoints, grid, bins, sigma)?.into_data());
        w.extend(s.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }));
    }
    SimccLabels::new(
        NdArray::from_vec(&[samples.len(), k, 2, bins], t)?,
        NdArray::from_vec(&[samples.len(), k], w)?,
    )
}

/// Per-axis argmax (ties to the lower bin) mapped to `bin·G/L`, for logits
/// `[K, 2, L]` or `[B, K, 2, L]`. Returns one `(x, y)` per keypoint, batch
/// major.
pub fn decode_simcc(logits: &NdArray, grid: usize) -> Vec<[f64; 2]> {
    let bins = *logits.shape().last().unwrap();
    let unit = grid as f64 / bins as f64;
    let argmax = |row: &[f64]| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best as f64 * unit
    };
    logits
        .data()
        .chunks(2 * bins)
        .map(|kp| [argmax(&kp[..bins]), argmax(&kp[bins..])])
        .collect()
}

/// Fraction of visible keypoints whose Euclidean error is below `tau·G`.
pub fn pck(pred: &[[f64; 2]], gt: &[[f64; 2]], visible: &[bool], tau: f64, grid: usize) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("PCK threshold must be positive, got {tau}")));
    }
    if pred.len() != gt.len() || gt.len() != visible.len() {
        return Err(Error::invalid("prediction, ground truth and visibility lengths differ"));
    }
    let thr = tau * grid as f64;
    let mut n = 0usize;
    let mut hit = 0usize;
    for ((p, g), &v) in pred.iter().zip(gt).zip(visible) {
        if v {
            n += 1;
            if ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt() < thr {
                hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no visible keypoints".into()));
    }
    Ok(hit as f64 / n as f64)
}

/// PCK of batched logits against samples.
pub fn pck_of_logits(logits: &NdArray, samples: &[SyntheticSample], tau: f64, grid: usize) -> Result<f64> {
    let pred = decode_simcc(logits, grid);
    let gt: Vec<[f64; 2]> = samples.iter().flat_map(|s| s.keypoints.iter().copied()).collect();
    let vis: Vec<bool> = samples.iter().flat_map(|s| s.visible.iter().copied()).collect();
    pck(&pred, &gt, &vis, tau, grid)
}

/// Hidden widths and feature channels of a named capacity tier.
pub fn tier(name: &str) -> Option<(Vec<usize>, usize)> {
    match name {
        "t" => Some((vec![16], 16)),
        "s" => Some((vec![32], 32)),
        "m" => Some((vec![64], 64)),
        "l" => Some((vec![128], 128)),
        _ => None,
    }
}

pub const TIERS: [&str; 4] = ["t", "s", "m", "l"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseNetConfig {
    pub grid: usize,
    pub keypoints: usize,
    pub bins: usize,
    pub hidden: Vec<usize>,
    pub channels: usize,
    /// Side of the square feature map; 1 gives pooled feature vectors.
    pub spatial: usize,
    /// Multiplier after the parameter-free layer norm on features.
    pub feature_gain: f64,
}

impl PoseNetConfig {
    pub fn from_tier(name: &str, grid: usize, keypoints: usize, bins: usize) -> Result<Self> {
        let (hidden, channels) =
            tier(name).ok_or_else(|| Error::invalid(format!("unknown capacity tier `{name}`")))?;
        Ok(PoseNetConfig {
            grid,
            keypoints,
            bins,
            hidden,
            channels,
            spatial: 1,
            feature_gain: 10.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.keypoints == 0 || self.bins < self.grid {
            return Err(Error::invalid("pose net needs grid ≥ 2, K ≥ 1 and L ≥ G"));
        }
        if self.channels == 0 || self.spatial == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("pose net widths must be positive"));
        }
        if !(self.feature_gain > 0.0) {
            return Err(Error::invalid("feature gain must be positive"));
        }
        Ok(())
    }

    pub fn hw(&self) -> usize {
        self.spatial * self.spatial
    }

    pub fn logit_len(&self) -> usize {
        self.keypoints * 2 * self.bins
    }
}

/// Dense backbone `image → C×H×W` features and a SimCC head.
#[derive(Debug, Clone)]
pub struct ToyPoseNet {
    pub config: PoseNetConfig,
    pub hidden: Vec<Linear>,
    pub feature: Linear,
    pub head: Linear,
}

impl ToyPoseNet {
    pub fn new(config: PoseNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut inputs = config.grid * config.grid;
        let mut hidden = Vec::with_capacity(config.hidden.len());
        for &w in &config.hidden {
            hidden.push(Linear::init(inputs, w, true, 1.0, rng));
            inputs = w;
        }
        let feature = Linear::init(inputs, config.channels * config.hw(), true, 1.0, rng);
        let head = Linear::init(config.channels * config.hw(), config.logit_len(), true, 1.0, rng);
        Ok(ToyPoseNet {
            config,
            hidden,
            feature,
            head,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    /// Backbone on images `[B, G·G]`, returning feature rows `[B·H·W, C]`.
    pub fn backbone_rows(&self, g: &mut Graph, images: Var, bind: Bind) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        let pixels = self.config.grid * self.config.grid;
        if shape.len() != 2 || shape[1] != pixels {
            return Err(Error::invalid(format!(
                "pose net expects images [B, {pixels}], got {shape:?}"
            )));
        }
        let mut h = images;
        for layer in &self.hidden {
            let z = layer.forward(g, h, bind);
            h = g.silu(z);
        }
        let z = self.feature.forward(g, h, bind);
        let z = g.silu(z);
        let rows = g.reshape(z, &[shape[0] * self.config.hw(), self.config.channels]);
        let normed = g.layer_norm(rows);
        Ok(g.scale(normed, self.config.feature_gain))
    }

    /// Head on feature rows `[B·H·W, C]`, returning logits `[B, K, 2, L]`.
    pub fn head_logits(&self, g: &mut Graph, rows: Var, bind: Bind) -> Result<Var> {
        let shape = g.shape(rows).to_vec();
        let hw = self.config.hw();
        if shape.len() != 2 || shape[1] != self.config.channels || !shape[0].is_multiple_of(hw) {
            return Err(Error::invalid(format!(
                "head expects rows [B·{hw}, {}], got {shape:?}",
                self.config.channels
            )));
        }
        let b = shape[0] / hw;
        let flat = g.reshape(rows, &[b, hw * self.config.channels]);
        let y = self.head.forward(g, flat, bind);
        let c = &self.config;
        Ok(g.reshape(y, &[b, c.keypoints, 2, c.bins]))
    }
}

impl Module for ToyPoseNet {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            out.extend(prefixed(&format!("backbone.hidden.{i}"), l.params()));
        }
        out.extend(prefixed("backbone.feature", self.feature.params()));
        out.extend(prefixed("head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for l in &mut self.hidden {
            out.extend(l.params_mut());
        }
        out.extend(self.feature.params_mut());
        out.extend(self.head.params_mut());
        out
    }
}

/// The student-side agent insertion: adapters, and (unless `agent` is
/// `None`) perturbation at `t_s` followed by reverse-SDE calibration.
#[derive(Clone, Copy)]
pub struct AgentPath<'a> {
    pub adapters: &'a StudentAdapters,
    pub agent: Option<&'a dyn ScoreModel>,
    pub schedule: &'a NoiseSchedule,
    pub t_s: f64,
    pub steps: usize,
    pub stochastic: bool,
}

/// Nodes of one pass through the agent path.
#[derive(Debug, Clone, Copy)]
pub struct AgentNodes {
    /// Pre-adapter output.
    pub latent: Var,
    /// Calibrated latents (equal to `latent` without an agent).
    pub calibrated: Var,
    /// Post-adapter output fed to the head.
    pub head_input: Var,
}

impl AgentPath<'_> {
    /// `pre → perturb(t_s) → calibrate → post` on feature rows.
    pub fn forward_rows(
        &self,
        g: &mut Graph,
        features: Var,
        noise: &mut BatchNoise,
        bind: Bind,
    ) -> Result<AgentNodes> {
        let latent = self.adapters.pre_rows(g, features, bind)?;
        let calibrated = match self.agent {
            Some(agent) => {
                let noisy = perturb_rows(g, latent, self.t_s, self.schedule, noise, self.stochastic)?;
                calibrate_rows(
                    g,
                    noisy,
                    agent,
                    self.t_s,
                    self.steps,
                    self.schedule,
                    noise,
                    self.stochastic,
                )?
            }
            None => latent,
        };
        let head_input = self.adapters.post_rows(g, calibrated, bind)?;
        Ok(AgentNodes {
            latent,
            calibrated,
            head_input,
        })
    }
}

/// Outputs of [`forward_pose`]. Latent rows are present only on the agent
/// path.
#[derive(Debug, Clone)]
pub struct PoseOutput {
    pub features: FeatureBatch,
    pub latent: Option<NdArray>,
    pub calibrated: Option<NdArray>,
    pub logits: NdArray,
}

/// Inference on images `[B, G·G]`. Without a path: backbone → head. With
/// one: backbone → pre-adapter → perturb → calibrate → post-adapter → head.
pub fn forward_pose(
    net: &ToyPoseNet,
    images: &NdArray,
    origin: Origin,
    path: Option<(&AgentPath, &mut Rng)>,
) -> Result<PoseOutput> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let feats = net.backbone_rows(&mut g, x, Bind::Frozen)?;
    let b = images.shape()[0];
    let s = net.config.spatial;
    let features = FeatureBatch::from_rows(g.value(feats), b, s, s, origin)?;
    let (head_in, latent, calibrated) = match path {
        None => (feats, None, None),
        Some((path, rng)) => {
            if path.adapters.pre.inputs() != net.channels() || path.adapters.post.outputs() != net.channels() {
                return Err(Error::invalid(format!(
                    "adapters map {}→{} channels, net has {}",
                    path.adapters.pre.inputs(),
                    path.adapters.post.outputs(),
                    net.channels()
                )));
            }
            let mut noise = BatchNoise::new(rng, b, net.config.hw());
            let nodes = path.forward_rows(&mut g, feats, &mut noise, Bind::Frozen)?;
            (
                nodes.head_input,
                Some(g.value(nodes.latent).clone()),
                Some(g.value(nodes.calibrated).clone()),
            )
        }
    };
    let logits = net.head_logits(&mut g, head_in, Bind::Frozen)?;
    let logits = g.value(logits).clone();
    logits.ensure_finite("pose logits")?;
    Ok(PoseOutput {
        features,
        latent,
        calibrated,
        logits,
    })
}

/// Supervised training of a pose network on its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub cosine_decay: bool,
}

/// Rows `items` of a `[n, cols]` matrix.
pub fn gather_rows(x: &NdArray, items: &[usize]) -> NdArray {
    let cols = x.shape()[1];
    let mut data = Vec::with_capacity(items.len() * cols);
    for &i in items {
        data.extend_from_slice(x.row(i));
    }
    NdArray::from_vec(&[items.len(), cols], data).unwrap()
}

/// Minimizes the SimCC task loss. Returns the mean loss of each epoch.
pub fn train_pose_net(
    net: &mut ToyPoseNet,
    images: &NdArray,
    labels: &SimccLabels,
    cfg: &PoseTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = images.shape()[0];
    if n == 0 || labels.batch() != n {
        return Err(Error::invalid("images and labels must be non-empty and aligned"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.config.lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.cosine_decay);
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let x = g.constant(gather_rows(images, chunk));
            let f = net.backbone_rows(&mut g, x, Bind::Trainable)?;
            let logits = net.head_logits(&mut g, f, Bind::Trainable)?;
            let loss = simcc_task_loss_node(&mut g, logits, &labels.select(chunk))?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::numeric(format!("task loss is {v} in epoch {}", epoch + 1)));
            }
            total += v * chunk.len() as f64;
            g.backward(loss)?.accumulate_into(net.params_mut());
            opt.step(&mut net.params_mut())?;
        }
        history.push(total / n as f64);
    }
    Ok(history)
}

/// Batched plain-path logits for `[n, G·G]` images.
pub fn predict_logits(net: &ToyPoseNet, images: &NdArray, batch: usize) -> Result<NdArray> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(n * net.config.logit_len());
    let items: Vec<usize> = (0..n).collect();
    for chunk in items.chunks(batch.max(1)) {
        let out = forward_pose(net, &gather_rows(images, chunk), Origin::Teacher, None)?;
        data.extend(out.logits.into_data());
    }
    let c = &net.config;
    NdArray::from_vec(&[n, c.keypoints, 2, c.bins], data)
}

/// Plain-path feature rows `[n·H·W, C]` for `[n, G·G]` images.
pub fn feature_rows(net: &ToyPoseNet, images: &NdArray, batch: usize) -> Result<NdArray> {
    let n = images.shape()[0];
    let rows = n * net.config.hw();
    let mut data = Vec::with_capacity(rows * net.channels());
    let items: Vec<usize> = (0..n).collect();
    for chunk in items.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let x = g.constant(gather_rows(images, chunk));
        let f = net.backbone_rows(&mut g, x, Bind::Frozen)?;
        data.extend_from_slice(g.value(f).data());
    }
    NdArray::from_vec(&[rows, net.channels()], data)
}
