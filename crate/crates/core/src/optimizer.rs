//! AdaMax with gradient clipping against the decayed maximum, additive
//! gradient noise, and a learning-rate schedule that decays on stalls.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Real, Tensor};

/// Learning rate that works for 96 maps; scaled inversely with map count.
pub const REFERENCE_LR: f64 = 0.005;
pub const REFERENCE_MAPS: usize = 96;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are clipped to `±clip_ratio * u_prev`.
    pub clip_ratio: f64,
    /// Noise standard deviation is `noise_scale * lr`.
    pub noise_scale: f64,
    /// Steps without a new smoothed-error minimum before decaying.
    pub patience: u64,
    pub decay: f64,
    /// Exponential smoothing factor of the progress metric.
    pub smoothing: f64,
}

impl OptimConfig {
    pub fn for_maps(maps: usize) -> Self {
        OptimConfig {
            lr: scaled_lr(maps),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.clip_ratio > 0.0
            && self.noise_scale >= 0.0
            && self.patience >= 1
            && self.decay > 0.0
            && self.decay <= 1.0
            && (0.0..1.0).contains(&self.smoothing);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Lowest learning rate the stall rule may reach.
    pub fn lr_floor(&self) -> f64 {
        self.lr / 100.0
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: REFERENCE_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_ratio: 1.0,
            noise_scale: 0.01,
            patience: 600,
            decay: 0.7,
            smoothing: 0.99,
        }
    }
}

/// `0.005 * 96 / maps`.
pub fn scaled_lr(maps: usize) -> f64 {
    REFERENCE_LR * REFERENCE_MAPS as f64 / maps as f64
}

/// Clamp each gradient entry to `±clip_ratio * u_prev` where `u_prev > 0`.
pub fn clip_by_decayed_max<T: Real>(grad: &mut Tensor<T>, u_prev: &Tensor<T>, clip_ratio: f64) -> Result<()> {
    let c = T::from_f64(clip_ratio);
    let clipped = grad.zip_map(u_prev, |g, u| {
        if u > T::zero() {
            let lim = c * u;
            g.max(-lim).min(lim)
        } else {
            g
        }
    })?;
    *grad = clipped;
    Ok(())
}

/// Add `N(0, (noise_scale * lr)^2)` to every entry.
pub fn add_gradient_noise<T: Real, R: Rng + ?Sized>(grad: &mut Tensor<T>, lr: f64, noise_scale: f64, rng: &mut R) {
    if noise_scale == 0.0 {
        return;
    }
    let sd = noise_scale * lr;
    for g in grad.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *g = *g + T::from_f64(sd * z);
    }
}

/// Per-parameter moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaMaxState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub decayed_max: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdaMaxState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Parameter<T>>) -> Self {
        let zeros: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdaMaxState {
            first_moment: zeros.clone(),
            decayed_max: zeros,
            t: 0,
        }
    }
}

/// One AdaMax update over all parameters, using their stored gradients.
///
/// Per element: clip to the previous decayed maximum, add noise, update
/// `m ← β1 m + (1-β1) g`, `u ← max(β2 u, |g|)`, and step by
/// `lr / (1-β1^t) · m / (u + ε)`.
pub fn adamax_apply<T: Real, R: Rng + ?Sized>(
    params: &mut [&mut Parameter<T>],
    state: &mut AdaMaxState<T>,
    config: &OptimConfig,
    lr: f64,
    rng: &mut R,
) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} parameters, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for p in params.iter() {
        if !p.grad.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", p.name)));
        }
    }
    state.t += 1;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one_minus_b1 = T::from_f64(1.0 - config.beta1);
    let eps = T::from_f64(config.eps);
    let step = T::from_f64(lr / (1.0 - config.beta1.powi(state.t.min(i32::MAX as u64) as i32)));

    for ((p, m), u) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.decayed_max.iter_mut())
    {
        let mut g = p.grad.clone();
        clip_by_decayed_max(&mut g, u, config.clip_ratio)?;
        add_gradient_noise(&mut g, lr, config.noise_scale, rng);
        let theta = p.value.data_mut();
        for (((th, mi), ui), &gi) in theta
            .iter_mut()
            .zip(m.data_mut())
            .zip(u.data_mut())
            .zip(g.data())
        {
            *mi = b1 * *mi + one_minus_b1 * gi;
            *ui = (b2 * *ui).max(gi.abs());
            *th = *th - step * *mi / (*ui + eps);
        }
    }
    Ok(())
}

/// Learning-rate decay on stalled progress of the smoothed training error.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub smoothed: Option<f64>,
    pub best: f64,
    pub best_step: u64,
    pub stall: u64,
}

impl LrSchedule {
    pub fn new(lr: f64) -> Self {
        LrSchedule {
            lr,
            smoothed: None,
            best: f64::INFINITY,
            best_step: 0,
            stall: 0,
        }
    }

    /// Record the training error of `step` and return the (possibly
    /// decayed) learning rate.
    pub fn update(&mut self, error: f64, step: u64, config: &OptimConfig) -> f64 {
        let s = match self.smoothed {
            None => error,
            Some(prev) => prev + (1.0 - config.smoothing) * (error - prev),
        };
        self.smoothed = Some(s);
        if s < self.best {
            self.best = s;
            self.best_step = step;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= config.patience {
                self.lr = (self.lr * config.decay).max(config.lr_floor());
                self.stall = 0;
            }
        }
        self.lr
    }
}
