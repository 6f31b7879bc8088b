//! Variance-preserving noise schedule, forward perturbation and the
//! Euler–Maruyama reverse update used to calibrate student features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{nchw_to_rows, rows_to_nchw, Graph, NdArray, Rng, Var};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 0.0001;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

/// How the linear rate `β(t)` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// `β` is a per-step rate over `N` steps; marginals are the cumulative
    /// products `ᾱ_k = Π_{i≤k} (1 − β_i)`.
    Discrete,
    /// `β(t)` is the literal continuous rate; `ᾱ(t) = exp(−∫₀ᵗ β)`.
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    n_steps: usize,
    beta_min: f64,
    beta_max: f64,
    mode: ScheduleMode,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Self-describing summary stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub n_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub mode: ScheduleMode,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::new(
            DEFAULT_STEPS,
            DEFAULT_BETA_MIN,
            DEFAULT_BETA_MAX,
            ScheduleMode::Discrete,
        )
        .unwrap()
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::invalid(format!("timestep {t} outside [0, 1]")))
    }
}

impl NoiseSchedule {
    pub fn new(n_steps: usize, beta_min: f64, beta_max: f64, mode: ScheduleMode) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::invalid("schedule needs at least two steps"));
        }
        if !(beta_min > 0.0 && beta_min < beta_max) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min < beta_max, got {beta_min}, {beta_max}"
            )));
        }
        if mode == ScheduleMode::Discrete && beta_max >= 1.0 {
            return Err(Error::invalid("per-step rates must stay below 1"));
        }
        let last = (n_steps - 1) as f64;
        let betas: Vec<f64> = (0..n_steps)
            .map(|i| beta_min + (i as f64 / last) * (beta_max - beta_min))
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule {
            n_steps,
            beta_min,
            beta_max,
            mode,
            betas,
            alpha_bars,
        })
    }

    pub fn from_meta(meta: ScheduleMeta) -> Result<Self> {
        Self::new(meta.n_steps, meta.beta_min, meta.beta_max, meta.mode)
    }

    pub fn meta(&self) -> ScheduleMeta {
        ScheduleMeta {
            n_steps: self.n_steps,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            mode: self.mode,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Nearest step index for `t`; exact halves round down.
    pub fn index_of(&self, t: f64) -> usize {
        let y = t * (self.n_steps - 1) as f64;
        let f = y.floor();
        let k = if y - f > 0.5 { f + 1.0 } else { f };
        (k as usize).min(self.n_steps - 1)
    }

    /// Linear rate `β_min + t (β_max − β_min)`.
    pub fn beta_at(&self, t: f64) -> Result<f64> {
        check_t(t)?;
        Ok(self.beta_min + t * (self.beta_max - self.beta_min))
    }

    fn alpha_bar(&self, t: f64) -> f64 {
        match self.mode {
            ScheduleMode::Discrete => self.alpha_bars[self.index_of(t)],
            ScheduleMode::Continuous => {
                let integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t;
                (-integral).exp()
            }
        }
    }

    /// `(mean_scale, noise_std)` of the forward marginal
    /// `x(t) = mean_scale · x(0) + noise_std · z`.
    pub fn marginal_coeffs(&self, t: f64) -> Result<(f64, f64)> {
        check_t(t)?;
        let ab = self.alpha_bar(t);
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    pub fn noise_std(&self, t: f64) -> Result<f64> {
        self.marginal_coeffs(t).map(|(_, s)| s)
    }

    /// Effective `β(t)·Δt` for a reverse step from `t` to `t − dt`.
    ///
    /// In discrete mode this is the rate of the composite forward jump,
    /// `1 − ᾱ(t)/ᾱ(t − dt)`, which equals `β_k` when `dt = 1/N`.
    pub fn step_rate(&self, t: f64, dt: f64) -> Result<f64> {
        check_t(t)?;
        if !(dt > 0.0) || t - dt < -1e-12 {
            return Err(Error::invalid(format!("reverse step dt={dt} from t={t}")));
        }
        let t_prev = (t - dt).max(0.0);
        Ok(match self.mode {
            ScheduleMode::Discrete => 1.0 - self.alpha_bar(t) / self.alpha_bar(t_prev),
            ScheduleMode::Continuous => self.beta_at(t)? * dt,
        })
    }
}

/// Where a feature map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Teacher,
    Student,
    LatentTeacher,
    ReconstructedTeacher,
    DenoisedStudent,
    Noisy,
}

/// A `B×C×H×W` batch of feature maps tagged with its origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    values: NdArray,
    origin: Origin,
    t: Option<f64>,
}

impl FeatureBatch {
    pub fn new(values: NdArray, origin: Origin) -> Result<Self> {
        if origin == Origin::Noisy {
            return Err(Error::invalid("noisy batches need a timestep; use FeatureBatch::noisy"));
        }
        Self::build(values, origin, None)
    }

    pub fn noisy(values: NdArray, t: f64) -> Result<Self> {
        check_t(t)?;
        Self::build(values, Origin::Noisy, Some(t))
    }

    fn build(values: NdArray, origin: Origin, t: Option<f64>) -> Result<Self> {
        if values.shape().len() != 4 {
            return Err(Error::invalid(format!(
                "feature batch must be B×C×H×W, got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureBatch { values, origin, t })
    }

    /// Feature rows `[B·H·W, C]` packed back into a batch.
    pub fn from_rows(rows: &NdArray, b: usize, h: usize, w: usize, origin: Origin) -> Result<Self> {
        if rows.shape().len() != 2 || rows.shape()[0] != b * h * w {
            return Err(Error::invalid(format!(
                "{:?} rows do not tile a batch of {b}×{h}×{w}",
                rows.shape()
            )));
        }
        Self::new(rows_to_nchw(rows, b, h, w), origin)
    }

    pub fn values(&self) -> &NdArray {
        &self.values
    }

    pub fn into_values(self) -> NdArray {
        self.values
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn t(&self) -> Option<f64> {
        self.t
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.values.shape()[2], self.values.shape()[3])
    }

    pub fn rows(&self) -> NdArray {
        nchw_to_rows(&self.values)
    }

    pub fn with_origin(mut self, origin: Origin) -> Result<Self> {
        if origin == Origin::Noisy {
            return Err(Error::invalid("cannot relabel as noisy without a timestep"));
        }
        self.origin = origin;
        self.t = None;
        Ok(self)
    }
}

/// Per-batch-element noise streams, so every element's draws are
/// independent of batch composition and evaluation order.
#[derive(Debug, Clone)]
pub struct BatchNoise {
    streams: Vec<Rng>,
    rows_per_item: usize,
}

impl BatchNoise {
    pub fn new(rng: &mut Rng, batch: usize, rows_per_item: usize) -> Self {
        BatchNoise {
            streams: (0..batch).map(|_| rng.fork()).collect(),
            rows_per_item,
        }
    }

    /// Standard normal matrix `[batch·rows_per_item, cols]`.
    pub fn draw(&mut self, cols: usize) -> NdArray {
        let per = self.rows_per_item * cols;
        let mut data = Vec::with_capacity(self.streams.len() * per);
        for s in &mut self.streams {
            data.extend(s.normals(per));
        }
        NdArray::from_vec(&[self.streams.len() * self.rows_per_item, cols], data).unwrap()
    }
}

/// Forward perturbation of a clean batch. Returns the noisy batch and the
/// standard normal draw `z` used to make it.
pub fn perturb(
    x0: &FeatureBatch,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(FeatureBatch, NdArray)> {
    if x0.origin() == Origin::Noisy {
        return Err(Error::invalid("perturb expects a clean batch"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("perturb timestep {t} outside (0, 1]")));
    }
    let (a, s) = schedule.marginal_coeffs(t)?;
    let (h, w) = x0.spatial();
    let mut noise = BatchNoise::new(rng, x0.batch(), h * w);
    let z_rows = noise.draw(x0.channels());
    let z = rows_to_nchw(&z_rows, x0.batch(), h, w);
    let noisy = x0.values().zip_map(&z, |x, e| a * x + s * e);
    Ok((FeatureBatch::noisy(noisy, t)?, z))
}

/// Differentiable forward perturbation of feature rows at a single `t`.
/// With `stochastic = false` only the mean is applied.
pub fn perturb_rows(
    g: &mut Graph,
    x: Var,
    t: f64,
    schedule: &NoiseSchedule,
    noise: &mut BatchNoise,
    stochastic: bool,
) -> Result<Var> {
    let (a, s) = schedule.marginal_coeffs(t)?;
    let scaled = g.scale(x, a);
    if !stochastic {
        return Ok(scaled);
    }
    let cols = g.shape(x)[1];
    let z = noise.draw(cols).scale(s);
    let z = g.constant(z);
    Ok(g.add(scaled, z))
}

/// One Euler–Maruyama step of the reverse VP-SDE:
/// `x(t−dt) = (x + r·score)/sqrt(1 − r) + sqrt(r)·z` with `r = β(t)·dt`.
pub fn reverse_step(
    x_t: &NdArray,
    t: f64,
    score: &NdArray,
    dt: f64,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    stochastic: bool,
) -> Result<NdArray> {
    if x_t.shape() != score.shape() {
        return Err(Error::invalid(format!(
            "score shape {:?} vs state shape {:?}",
            score.shape(),
            x_t.shape()
        )));
    }
    let r = checked_rate(schedule, t, dt)?;
    let c = 1.0 / (1.0 - r).sqrt();
    let mut out = x_t.zip_map(score, |x, s| c * (x + r * s));
    if stochastic {
        let sd = r.sqrt();
        for v in out.data_mut() {
            *v += sd * rng.normal();
        }
    }
    Ok(out)
}

fn checked_rate(schedule: &NoiseSchedule, t: f64, dt: f64) -> Result<f64> {
    let r = schedule.step_rate(t, dt)?;
    if r >= 1.0 {
        return Err(Error::numeric(format!(
            "beta(t)*dt = {r} >= 1 at t={t}, dt={dt}; reverse step is undefined"
        )));
    }
    Ok(r)
}

/// Something that can evaluate the score `∇ₓ log p_t(x)` on feature rows.
pub trait ScoreModel {
    /// Score at rows `x: [M, C]`, all at time `t`.
    fn score_rows(&self, g: &mut Graph, x: Var, t: f64, schedule: &NoiseSchedule) -> Result<Var>;
}

/// Reverse-time grid `t_s, t_s − dt, …, dt` with `dt = t_s / n`.
pub fn calibration_grid(t_s: f64, n_steps: usize) -> Vec<f64> {
    let dt = t_s / n_steps as f64;
    (0..n_steps).map(|i| t_s - i as f64 * dt).collect()
}

/// Reverse-SDE calibration on feature rows, differentiable with respect to
/// `x`. The model is consulted at every grid time; the final update is
/// always noise-free.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_rows(
    g: &mut Graph,
    x: Var,
    model: &dyn ScoreModel,
    t_s: f64,
    n_steps: usize,
    schedule: &NoiseSchedule,
    noise: &mut BatchNoise,
    stochastic: bool,
) -> Result<Var> {
    if !(t_s > 0.0 && t_s <= 1.0) {
        return Err(Error::invalid(format!("starting timestep {t_s} outside (0, 1]")));
    }
    if n_steps == 0 {
        return Err(Error::invalid("calibration needs at least one step"));
    }
    let dt = t_s / n_steps as f64;
    let mut state = x;
    for (i, t) in calibration_grid(t_s, n_steps).into_iter().enumerate() {
        let add_noise = stochastic && i + 1 < n_steps;
        state = calibration_step(g, state, model, t, dt, schedule, noise, add_noise)?;
    }
    Ok(state)
}

#[allow(clippy::too_many_arguments)]
fn calibration_step(
    g: &mut Graph,
    state: Var,
    model: &dyn ScoreModel,
    t: f64,
    dt: f64,
    schedule: &NoiseSchedule,
    noise: &mut BatchNoise,
    add_noise: bool,
) -> Result<Var> {
    let r = checked_rate(schedule, t, dt)?;
    let score = model.score_rows(g, state, t, schedule)?;
    let drift = g.scale(score, r);
    let moved = g.add(state, drift);
    let mut next = g.scale(moved, 1.0 / (1.0 - r).sqrt());
    if add_noise {
        let cols = g.shape(state)[1];
        let z = noise.draw(cols).scale(r.sqrt());
        let z = g.constant(z);
        next = g.add(next, z);
    }
    Ok(next)
}

/// Calibrates a noisy batch `x(t_s)` into denoised student features.
pub fn calibrate(
    x_ts: &FeatureBatch,
    model: &dyn ScoreModel,
    t_s: f64,
    n_infer_steps: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
    stochastic: bool,
) -> Result<FeatureBatch> {
    if x_ts.origin() != Origin::Noisy {
        return Err(Error::invalid("calibrate expects a noisy batch"));
    }
    match x_ts.t() {
        Some(t) if (t - t_s).abs() < 1e-12 => {}
        other => {
            return Err(Error::invalid(format!(
                "batch timestep {other:?} does not match starting timestep {t_s}"
            )))
        }
    }
    let (h, w) = x_ts.spatial();
    let mut noise = BatchNoise::new(rng, x_ts.batch(), h * w);
    if !(t_s > 0.0 && t_s <= 1.0) || n_infer_steps == 0 {
        return Err(Error::invalid(format!(
            "calibration needs t_s in (0, 1] and at least one step, got {t_s}, {n_infer_steps}"
        )));
    }
    // one short-lived graph per step keeps memory flat for long reverse passes
    let dt = t_s / n_infer_steps as f64;
    let mut state = x_ts.rows();
    for (i, t) in calibration_grid(t_s, n_infer_steps).into_iter().enumerate() {
        let mut g = Graph::new();
        let x = g.constant(state);
        let add_noise = stochastic && i + 1 < n_infer_steps;
        let next = calibration_step(&mut g, x, model, t, dt, schedule, &mut noise, add_noise)?;
        state = g.value(next).clone();
    }
    state.ensure_finite("calibrated features")?;
    FeatureBatch::from_rows(&state, x_ts.batch(), h, w, Origin::DenoisedStudent)
}

/// Closed-form score of an isotropic Gaussian `N(mean, variance·I)` pushed
/// through the forward marginal at time `t`.
pub fn analytic_gaussian_score(
    x: &NdArray,
    mean: f64,
    variance: f64,
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<NdArray> {
    if !(variance > 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {variance}")));
    }
    let (a, s) = schedule.marginal_coeffs(t)?;
    let m_t = a * mean;
    let v_t = a * a * variance + s * s;
    Ok(x.map(|v| (m_t - v) / v_t))
}

/// [`ScoreModel`] backed by [`analytic_gaussian_score`].
#[derive(Debug, Clone, Copy)]
pub struct GaussianScore {
    pub mean: f64,
    pub variance: f64,
}

impl ScoreModel for GaussianScore {
    fn score_rows(&self, g: &mut Graph, x: Var, t: f64, schedule: &NoiseSchedule) -> Result<Var> {
        let (a, s) = schedule.marginal_coeffs(t)?;
        let v_t = a * a * self.variance + s * s;
        let shape = g.shape(x).to_vec();
        let offset = g.constant(NdArray::full(&shape, a * self.mean / v_t));
        let lin = g.scale(x, -1.0 / v_t);
        Ok(g.add(lin, offset))
    }
}

/// Score that is identically zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    fn score_rows(&self, g: &mut Graph, x: Var, _t: f64, _schedule: &NoiseSchedule) -> Result<Var> {
        Ok(g.scale(x, 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_grad;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn scalar_batch(v: &[f64]) -> FeatureBatch {
        let n = v.len();
        FeatureBatch::new(NdArray::from_vec(&[n, 1, 1, 1], v.to_vec()).unwrap(), Origin::Teacher)
            .unwrap()
    }

    #[test]
    fn beta_endpoints_and_midpoint() {
        let s = sched();
        assert_eq!(s.beta_at(0.0).unwrap(), 0.0001);
        assert!((s.beta_at(1.0).unwrap() - 0.02).abs() < 1e-15);
        assert!((s.beta_at(0.5).unwrap() - 0.01005).abs() < 1e-15);
        assert!(s.beta_at(1.5).is_err());
        assert!(s.beta_at(-0.1).is_err());
    }

    #[test]
    fn schedule_shape_invariants() {
        let s = sched();
        assert!(s.betas().windows(2).all(|w| w[0] < w[1]));
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.alpha_bars()[0], 1.0 - s.betas()[0]);
        assert!(s.alpha_bars()[999] < 1e-4);
    }

    #[test]
    fn rounding_ties_down() {
        let s = NoiseSchedule::new(3, 0.1, 0.2, ScheduleMode::Discrete).unwrap();
        // t·(N−1) = 0.5 → 0, 1.5 → 1
        assert_eq!(s.index_of(0.25), 0);
        assert_eq!(s.index_of(0.75), 1);
        assert_eq!(s.index_of(0.26), 1);
        assert_eq!(s.index_of(1.0), 2);
    }

    #[test]
    fn marginal_at_zero_and_one() {
        let s = sched();
        let (m, n) = s.marginal_coeffs(0.0).unwrap();
        assert!((m - 0.9999f64.sqrt()).abs() < 1e-15);
        assert!((n - 0.0001f64.sqrt()).abs() < 1e-12);
        // independent product oracle over the full linear schedule
        let prod: f64 = (0..1000)
            .map(|i| 1.0 - (0.0001 + (i as f64 / 999.0) * (0.02 - 0.0001)))
            .product();
        let (_, n1) = s.marginal_coeffs(1.0).unwrap();
        assert!((n1 - (1.0 - prod).sqrt()).abs() < 1e-12);
        assert!((n1 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn variance_preserving_identity() {
        for mode in [ScheduleMode::Discrete, ScheduleMode::Continuous] {
            let s = NoiseSchedule::new(1000, 1e-4, 0.02, mode).unwrap();
            for i in 0..=200 {
                let (m, n) = s.marginal_coeffs(i as f64 / 200.0).unwrap();
                assert!((m * m + n * n - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn discrete_step_rate_matches_single_beta() {
        let s = sched();
        let k = 500;
        let t = k as f64 / 999.0;
        let r = s.step_rate(t, 1.0 / 999.0).unwrap();
        assert!((r - s.betas()[k]).abs() < 1e-12);
    }

    #[test]
    fn perturb_zero_input_is_pure_noise() {
        let s = sched();
        let x0 = scalar_batch(&[0.0; 8]);
        let (noisy, z) = perturb(&x0, 0.4, &s, &mut Rng::new(3)).unwrap();
        let (_, sd) = s.marginal_coeffs(0.4).unwrap();
        assert_eq!(noisy.origin(), Origin::Noisy);
        assert_eq!(noisy.t(), Some(0.4));
        for (a, b) in noisy.values().data().iter().zip(z.data()) {
            assert_eq!(*a, sd * b);
        }
    }

    #[test]
    fn perturb_small_t_keeps_signal() {
        let s = sched();
        let x0 = scalar_batch(&[1.0, -2.0, 0.5]);
        let (noisy, _) = perturb(&x0, 1e-6, &s, &mut Rng::new(4)).unwrap();
        for (a, b) in noisy.values().data().iter().zip(x0.values().data()) {
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn perturb_rejects_noisy_input() {
        let s = sched();
        let x = FeatureBatch::noisy(NdArray::zeros(&[1, 1, 1, 1]), 0.3).unwrap();
        assert!(perturb(&x, 0.4, &s, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn perturb_moments_match_closed_form() {
        let s = sched();
        let n = 100_000;
        let x0 = scalar_batch(&vec![1.0; n]);
        let (noisy, _) = perturb(&x0, 0.4, &s, &mut Rng::new(11)).unwrap();
        let (m, sd) = s.marginal_coeffs(0.4).unwrap();
        let v = noisy.values().data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = sd / (n as f64).sqrt();
        let se_var = sd * sd * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - m).abs() < 3.0 * se_mean);
        assert!((var - sd * sd).abs() < 3.0 * se_var);
    }

    #[test]
    fn reverse_step_trivial_cases() {
        let s = sched();
        let x = NdArray::from_vec(&[3], vec![1.0, -1.0, 2.0]).unwrap();
        let zero = NdArray::zeros(&[3]);
        let r = s.step_rate(0.5, 0.1).unwrap();
        let out = reverse_step(&x, 0.5, &zero, 0.1, &s, &mut Rng::new(0), false).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v / (1.0 - r).sqrt()).abs() < 1e-15);
        }

        let n = 200_000;
        let x0 = NdArray::zeros(&[n]);
        let z0 = NdArray::zeros(&[n]);
        let out = reverse_step(&x0, 0.5, &z0, 0.1, &s, &mut Rng::new(1), true).unwrap();
        let var = out.sq_norm() / n as f64;
        assert!((var - r).abs() < 5.0 * r * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn continuous_mode_rate_overflow_is_numeric_error() {
        let s = NoiseSchedule::new(1000, 0.1, 20.0, ScheduleMode::Continuous).unwrap();
        let x = NdArray::zeros(&[2]);
        let r = reverse_step(&x, 1.0, &x, 0.1, &s, &mut Rng::new(0), false);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn grid_for_five_steps_from_point_four() {
        let grid = calibration_grid(0.4, 5);
        let want = [0.4, 0.32, 0.24, 0.16, 0.08];
        assert_eq!(grid.len(), 5);
        for (a, b) in grid.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_score_calibration_is_pure_rescale() {
        let s = sched();
        let x = FeatureBatch::noisy(
            NdArray::from_vec(&[2, 1, 1, 1], vec![0.7, -1.3]).unwrap(),
            0.4,
        )
        .unwrap();
        let out = calibrate(&x, &ZeroScore, 0.4, 5, &s, &mut Rng::new(0), false).unwrap();
        assert_eq!(out.origin(), Origin::DenoisedStudent);
        let dt = 0.4 / 5.0;
        let factor: f64 = calibration_grid(0.4, 5)
            .iter()
            .map(|&t| 1.0 / (1.0 - s.step_rate(t, dt).unwrap()).sqrt())
            .product();
        for (o, v) in out.values().data().iter().zip(x.values().data()) {
            assert!((o - factor * v).abs() < 1e-12);
        }
    }

    #[test]
    fn calibrate_rejects_bad_inputs() {
        let s = sched();
        let clean = scalar_batch(&[1.0]);
        assert!(calibrate(&clean, &ZeroScore, 0.4, 5, &s, &mut Rng::new(0), true).is_err());
        let noisy = FeatureBatch::noisy(NdArray::zeros(&[1, 1, 1, 1]), 0.4).unwrap();
        assert!(calibrate(&noisy, &ZeroScore, 0.4, 0, &s, &mut Rng::new(0), true).is_err());
        assert!(calibrate(&noisy, &ZeroScore, 0.3, 5, &s, &mut Rng::new(0), true).is_err());
    }

    #[test]
    fn analytic_score_properties() {
        let s = sched();
        let (a, sd) = s.marginal_coeffs(0.4).unwrap();
        let m_t = a * 3.0;
        let at_mode = analytic_gaussian_score(&NdArray::scalar(m_t), 3.0, 4.0, 0.4, &s).unwrap();
        assert!(at_mode.item().abs() < 1e-15);

        let xs = NdArray::from_vec(&[3], vec![-1.0, 0.5, 2.0]).unwrap();
        let std = analytic_gaussian_score(&xs, 0.0, 1.0, 0.7, &s).unwrap();
        for (g, x) in std.data().iter().zip(xs.data()) {
            assert!((g + x).abs() < 1e-12);
        }

        // finite difference of the log-density of N(m_t, v_t)
        let v_t = a * a * 4.0 + sd * sd;
        let log_p = |x: &NdArray| {
            let v = x.item();
            -0.5 * (v - m_t).powi(2) / v_t - 0.5 * (2.0 * std::f64::consts::PI * v_t).ln()
        };
        for x in [-2.0, 0.3, 4.5] {
            let x = NdArray::scalar(x);
            let fd = finite_difference_grad(log_p, &x, 1e-5).unwrap();
            let an = analytic_gaussian_score(&x, 3.0, 4.0, 0.4, &s).unwrap();
            assert!((fd.item() - an.item()).abs() < 1e-6);
        }
        assert!(analytic_gaussian_score(&xs, 0.0, 0.0, 0.5, &s).is_err());
    }

    #[test]
    fn analytic_reverse_pass_recovers_standard_normal() {
        let s = sched();
        let n = 10_000;
        let mut rng = Rng::new(5);
        let start = NdArray::from_vec(&[n, 1, 1, 1], rng.normals(n)).unwrap();
        let x1 = FeatureBatch::noisy(start, 1.0).unwrap();
        let model = GaussianScore { mean: 0.0, variance: 1.0 };
        let out = calibrate(&x1, &model, 1.0, 999, &s, &mut rng, true).unwrap();
        let v = out.values().data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn analytic_calibration_recovers_shifted_gaussian_mean() {
        let s = sched();
        let n = 10_000;
        let (mu, var) = (2.0, 0.5);
        let mut rng = Rng::new(9);
        let start = NdArray::from_vec(&[n, 1, 1, 1], rng.normals(n)).unwrap();
        let x1 = FeatureBatch::noisy(start, 1.0).unwrap();
        let model = GaussianScore { mean: mu, variance: var };
        let out = calibrate(&x1, &model, 1.0, 999, &s, &mut rng, true).unwrap();
        let v = out.values().data();
        let mean = v.iter().sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se, "mean {mean}");
    }
}
