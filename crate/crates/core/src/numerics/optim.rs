use super::{NdArray, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. Moment buffers are matched to
/// parameters by position, so callers must pass parameters in a stable
/// order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using each parameter's accumulated gradient, then
    /// clears the gradients. Parameters without a gradient still decay.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        let cfg = self.config;
        if !(cfg.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.value.len()],
                    v: vec![0.0; p.value.len()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (p, mom) in params.iter().zip(&self.moments) {
            if p.value.len() != mom.m.len() {
                return Err(Error::invalid("parameter size changed between optimizer steps"));
            }
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(Error::invalid(format!(
                        "gradient shape {:?} vs parameter shape {:?}",
                        g.shape(),
                        p.value.shape()
                    )));
                }
                g.ensure_finite("gradient")?;
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, mom) in params.iter_mut().zip(&mut self.moments) {
            let grad = p.grad.take();
            let w = p.value.data_mut();
            for (i, wi) in w.iter_mut().enumerate() {
                *wi -= cfg.lr * cfg.weight_decay * *wi;
                let g = grad.as_ref().map_or(0.0, |g| g.data()[i]);
                mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
                mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                *wi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Single AdamW update on bare arrays, for callers that manage their own
/// state.
pub fn adamw_step(
    params: &mut [NdArray],
    grads: &[NdArray],
    optimizer: &mut AdamW,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid("params and grads differ in count"));
    }
    let mut wrapped: Vec<Param> = params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let mut w = Param::new(p.clone());
            w.grad = Some(g.clone());
            w
        })
        .collect();
    let mut refs: Vec<&mut Param> = wrapped.iter_mut().collect();
    optimizer.step(&mut refs)?;
    for (dst, src) in params.iter_mut().zip(wrapped) {
        *dst = src.value;
    }
    Ok(())
}
