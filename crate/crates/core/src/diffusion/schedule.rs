//! Noise schedules, the forward process and the deterministic DDIM update.

use ndarray::{Array, Dimension, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear betas from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!("bad beta range {beta_start}..{beta_end}")));
        }
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                acc *= 1.0 - (beta_start + frac * (beta_end - beta_start));
                acc
            })
            .collect();
        Self::from_alpha_bar(ScheduleKind::Linear, alpha_bar)
    }

    /// Squared-cosine schedule with the usual 0.008 offset and β capped at 0.999.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one step".into()));
        }
        let f = |t: f64| ((t / steps as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|i| {
                let beta = (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(0.999);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self::from_alpha_bar(ScheduleKind::Cosine, alpha_bar)
    }

    pub fn from_kind(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps, 1e-4, 0.02),
            ScheduleKind::Cosine => Self::cosine(steps),
        }
    }

    /// Checks the sequence is in `(0, 1]` and strictly decreasing.
    pub fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Invalid("empty schedule".into()));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Invalid("cumulative alphas must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Invalid("cumulative alphas must be strictly decreasing".into()));
        }
        Ok(Self { kind, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha_bar.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("timestep {t} out of range 0..{}", self.len())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
    pub fn q_sample<D: Dimension>(&self, x0: &Array<f64, D>, t: usize, noise: &Array<f64, D>) -> Result<Array<f64, D>> {
        let a = self.alpha_bar(t)?;
        q_sample_with(x0, a, noise)
    }
}

pub fn q_sample_with<D: Dimension>(x0: &Array<f64, D>, alpha_bar: f64, noise: &Array<f64, D>) -> Result<Array<f64, D>> {
    if x0.shape() != noise.shape() {
        return Err(Error::Shape(format!("noise shape {:?} differs from x0 {:?}", noise.shape(), x0.shape())));
    }
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(Zip::from(x0).and(noise).map_collect(|&x, &n| sa * x + sn * n))
}

/// Evenly spaced timesteps `round(i·(T−1)/(steps−1))`, largest first.
pub fn ddim_timesteps(t_train: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_train {
        return Err(Error::Invalid(format!("cannot take {steps} sampling steps from {t_train}")));
    }
    if steps == 1 {
        return Ok(vec![t_train - 1]);
    }
    let mut ts: Vec<usize> =
        (0..steps).map(|i| (i as f64 * (t_train - 1) as f64 / (steps - 1) as f64).round() as usize).collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Deterministic sampler settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdimConfig {
    pub steps: usize,
    /// Clamp the predicted clean sample to the data range `[-1, 1]` at each step.
    pub clip_x0: bool,
}

impl Default for DdimConfig {
    fn default() -> Self {
        Self { steps: 50, clip_x0: true }
    }
}

/// One η=0 update from `ᾱ_t` to `ᾱ_prev`.
pub fn ddim_step<D: Dimension>(
    x_t: &Array<f64, D>,
    eps: &Array<f64, D>,
    alpha_bar: f64,
    alpha_bar_prev: f64,
    clip_x0: bool,
) -> Array<f64, D> {
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let (pa, pn) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).sqrt());
    Zip::from(x_t).and(eps).map_collect(|&x, &e| {
        let mut x0 = (x - sn * e) / sa;
        if clip_x0 {
            x0 = x0.clamp(-1.0, 1.0);
        }
        pa * x0 + pn * e
    })
}

/// Runs the reverse loop from `x_T`, calling `predict(x_t, t)` once per step.
pub fn ddim_loop<D, F>(
    schedule: &NoiseSchedule,
    config: DdimConfig,
    x_init: Array<f64, D>,
    mut predict: F,
) -> Result<Array<f64, D>>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>, usize) -> Result<Array<f64, D>>,
{
    let ts = ddim_timesteps(schedule.len(), config.steps)?;
    let mut x = x_init;
    for (i, &t) in ts.iter().enumerate() {
        let eps = predict(&x, t)?;
        if eps.shape() != x.shape() {
            return Err(Error::Shape(format!("prediction shape {:?} differs from x_t {:?}", eps.shape(), x.shape())));
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("noise prediction at timestep {t} (step {i})")));
        }
        let a = schedule.alpha_bar(t)?;
        let prev = match ts.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        x = ddim_step(&x, &eps, a, prev, config.clip_x0);
    }
    Ok(x)
}

/// Pixels in `[0, 1]` to the diffusion space `[-1, 1]`.
pub fn to_model_space<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| 2.0 * v - 1.0)
}

/// Diffusion space back to pixels, clipped to `[0, 1]`.
pub fn to_pixels<D: Dimension>(x: &Array<f64, D>) -> Array<f64, D> {
    x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn gaussian_like<D: Dimension, R: Rng>(shape: D, r: &mut R) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || r.sample::<f64, _>(StandardNormal))
}
