//! Deterministic DDIM encoding and decoding, unconditional generation and
//! gradient-guided translation.
//!
//! Encoding runs the forward recursion from `t = 0` up to the noise level
//! `L`; decoding runs the reverse recursion back to `t = 0`, optionally
//! shifting each noise estimate along the input gradient of a task network.
//! Intermediate states are never clamped.

mod step;

pub use step::{ddim_forward_step, ddim_reverse_step};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnum::{Array, DiffError, Scalar};
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::networks::{NetworkError, RegModel, SegModel};
use step::{ancestral_sigma, forward_abar, reverse_abar};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} guidance needs a matching task model")]
    MissingTaskModel(&'static str),
    #[error("non-finite {what} at step t={step}")]
    NonFinite { step: usize, what: &'static str },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl From<DiffError> for SamplerError {
    fn from(e: DiffError) -> Self {
        SamplerError::Network(NetworkError::Diff(e))
    }
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

/// How the regression guidance scale `s_t` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionMode {
    /// `s_t = i - R(x_t, t)`.
    Adaptive,
    /// `s_t` held at `+1` or `-1`.
    FixedSign(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GuidanceSpec<F> {
    None,
    Regression {
        target: f64,
        scale: f64,
        mode: RegressionMode,
    },
    /// `mask` is `[1, 1, h, w]` (shared by the batch) or `[n, 1, h, w]`.
    Segmentation {
        mask: Array<F>,
        scale: f64,
    },
}

impl<F: Scalar> GuidanceSpec<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            GuidanceSpec::None => "none",
            GuidanceSpec::Regression { .. } => "regression",
            GuidanceSpec::Segmentation { .. } => "segmentation",
        }
    }

    /// A scale of zero is accepted as the degenerate, unguided case.
    pub fn validate(&self, x: &Array<F>) -> Result<()> {
        let bad = |m: String| Err(SamplerError::InvalidArgument(m));
        match self {
            GuidanceSpec::None => Ok(()),
            GuidanceSpec::Regression {
                target,
                scale,
                mode,
            } => {
                if !target.is_finite() {
                    return bad(format!("target {target} is not finite"));
                }
                if !(*scale >= 0.0 && scale.is_finite()) {
                    return bad(format!("gradient scale {scale} must be non-negative"));
                }
                if let RegressionMode::FixedSign(s) = mode {
                    if *s != 1.0 && *s != -1.0 {
                        return bad(format!("fixed sign must be +1 or -1, got {s}"));
                    }
                }
                Ok(())
            }
            GuidanceSpec::Segmentation { mask, scale } => {
                if !(*scale >= 0.0 && scale.is_finite()) {
                    return bad(format!("gradient scale {scale} must be non-negative"));
                }
                let xs = x.shape();
                let ms = mask.shape();
                if ms.len() != 4
                    || (ms[0] != 1 && ms[0] != xs[0])
                    || ms[1] != 1
                    || ms[2..] != xs[2..]
                {
                    return bad(format!("mask shape {ms:?} does not fit images {xs:?}"));
                }
                if mask.data().iter().any(|&v| v != F::zero() && v != F::one()) {
                    return bad("mask values must be 0 or 1".into());
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Deterministic,
    Ancestral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Noise level `L`.
    pub noise_level: usize,
    pub sigma: SigmaMode,
    pub stride: usize,
}

impl SamplerConfig {
    pub fn deterministic(noise_level: usize) -> Self {
        SamplerConfig {
            noise_level,
            sigma: SigmaMode::Deterministic,
            stride: 1,
        }
    }

    /// `L = 0.4 T`, rounded, at least one step.
    pub fn default_for(sched: &NoiseSchedule) -> Self {
        Self::deterministic(((0.4 * sched.steps() as f64).round() as usize).max(1))
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.noise_level < 1 || self.noise_level > sched.steps() {
            return Err(SamplerError::InvalidArgument(format!(
                "noise level {} outside [1, {}]",
                self.noise_level,
                sched.steps()
            )));
        }
        if self.stride < 1 {
            return Err(SamplerError::InvalidArgument(
                "stride must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Visited timesteps `0, s, 2s, ..., L`, always ending at `L`.
    pub fn timesteps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = (0..self.noise_level).step_by(self.stride).collect();
        ts.push(self.noise_level);
        ts
    }
}

/// Input-gradient access to a regression network.
pub trait RegressionGuide<F: Scalar> {
    /// Per-item predictions and the gradient of their sum.
    fn value_and_grad(&self, x: &Array<F>, t: &[usize])
        -> Result<(Vec<F>, Array<F>), NetworkError>;
}

/// Input-gradient access to a segmentation network.
pub trait SegmentationGuide<F: Scalar> {
    /// Per-item pixel-averaged cross-entropy against `mask` and the gradient
    /// of their sum.
    fn bce_and_grad(
        &self,
        x: &Array<F>,
        t: &[usize],
        mask: &Array<F>,
    ) -> Result<(Vec<F>, Array<F>), NetworkError>;
}

impl<F: Scalar> RegressionGuide<F> for RegModel<F> {
    fn value_and_grad(
        &self,
        x: &Array<F>,
        t: &[usize],
    ) -> Result<(Vec<F>, Array<F>), NetworkError> {
        self.value_and_input_grad(x, t)
    }
}

impl<F: Scalar> SegmentationGuide<F> for SegModel<F> {
    fn bce_and_grad(
        &self,
        x: &Array<F>,
        t: &[usize],
        mask: &Array<F>,
    ) -> Result<(Vec<F>, Array<F>), NetworkError> {
        self.bce_and_input_grad(x, t, mask)
    }
}

#[derive(Clone, Copy)]
pub enum TaskModel<'a, F> {
    Regression(&'a dyn RegressionGuide<F>),
    Segmentation(&'a dyn SegmentationGuide<F>),
}

/// One reverse step of a guided decode; vectors hold one entry per item.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    /// `R(x_t, t)` or `H`.
    pub value: Vec<f64>,
    /// `s_t`; -1 for segmentation guidance.
    pub scale: Vec<f64>,
    /// L2 norm of the task gradient.
    pub grad_norm: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TranslationResult<F> {
    pub output: Array<F>,
    pub trace: Option<Vec<TraceStep>>,
}

fn eps_at<F: Scalar, M: NoisePredictor<F> + ?Sized>(
    model: &M,
    x: &Array<F>,
    t: usize,
) -> Result<Array<F>> {
    // The network never sees t = 0 in training; t = 1 stands in.
    let n = x.shape()[0];
    let eps = model.predict_noise(x, &vec![t.max(1); n])?;
    if !eps.all_finite() {
        return Err(SamplerError::NonFinite {
            step: t,
            what: "noise estimate",
        });
    }
    Ok(eps)
}

/// Runs the forward recursion from `x0` to `x_L`. Consumes no randomness.
pub fn encode<F: Scalar, M: NoisePredictor<F> + ?Sized>(
    model: &M,
    x0: &Array<F>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Array<F>> {
    cfg.validate(sched)?;
    let ts = cfg.timesteps();
    let mut x = x0.clone();
    for w in ts.windows(2) {
        let eps = eps_at(model, &x, w[0])?;
        x = forward_abar(&x, &eps, sched.alpha_bar(w[0]), sched.alpha_bar(w[1]))?;
    }
    Ok(x)
}

/// Per-item multiplier, gradient and trace entry of one guided step.
type Term<F> = (Vec<F>, Array<F>, TraceStep);

/// Guidance term for one step: the per-item multiplier `s_t c sqrt(1 - abar_t)`
/// subtracted along the gradient, the gradient, and a trace entry.
fn guidance_term<F: Scalar>(
    guidance: &GuidanceSpec<F>,
    task: Option<TaskModel<'_, F>>,
    x: &Array<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Option<Term<F>>> {
    let n = x.shape()[0];
    let ts = vec![t; n];
    let root = (1.0 - sched.alpha_bar(t)).sqrt();
    let (values, grad, scales, c) = match (guidance, task) {
        (GuidanceSpec::None, _) => return Ok(None),
        (
            GuidanceSpec::Regression {
                target,
                scale,
                mode,
            },
            Some(TaskModel::Regression(r)),
        ) => {
            let (v, g) = r.value_and_grad(x, &ts)?;
            let v: Vec<f64> = v.iter().map(|r| r.to_f64().unwrap_or(f64::NAN)).collect();
            let s: Vec<f64> = match mode {
                RegressionMode::Adaptive => v.iter().map(|r| target - r).collect(),
                RegressionMode::FixedSign(sign) => vec![*sign; n],
            };
            (v, g, s, *scale)
        }
        (GuidanceSpec::Segmentation { mask, scale }, Some(TaskModel::Segmentation(s))) => {
            let mask = if mask.shape()[0] == n {
                mask.clone()
            } else {
                Array::stack_batch(&vec![mask.clone(); n])?
            };
            let (v, g) = s.bce_and_grad(x, &ts, &mask)?;
            // The reverse step moves x against the noise estimate, so the
            // term enters with s_t = -1 for the state to descend on H.
            (
                v.iter().map(|h| h.to_f64().unwrap_or(f64::NAN)).collect(),
                g,
                vec![-1.0; n],
                *scale,
            )
        }
        (g, _) => return Err(SamplerError::MissingTaskModel(g.kind_name())),
    };
    if !grad.all_finite() || values.iter().any(|v| !v.is_finite()) {
        return Err(SamplerError::NonFinite {
            step: t,
            what: "task-model gradient",
        });
    }
    let per = grad.len() / n;
    let grad_norm = grad
        .data()
        .chunks(per)
        .map(|c| {
            c.iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mult = scales.iter().map(|s| F::from_f64(s * c * root)).collect();
    let step = TraceStep {
        t,
        value: values,
        scale: scales,
        grad_norm,
    };
    Ok(Some((mult, grad, step)))
}

/// Runs the reverse recursion from `x_L` to `x_0`, shifting each noise
/// estimate by the guidance gradient.
///
/// With [`SigmaMode::Ancestral`] fresh noise is drawn from `rng` at every
/// step; the deterministic mode consumes none.
#[allow(clippy::too_many_arguments)]
pub fn decode<F: Scalar, M: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x_l: &Array<F>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    guidance: &GuidanceSpec<F>,
    task: Option<TaskModel<'_, F>>,
    trace: bool,
    rng: &mut R,
) -> Result<TranslationResult<F>> {
    cfg.validate(sched)?;
    guidance.validate(x_l)?;
    let ts = cfg.timesteps();
    let mut x = x_l.clone();
    let mut steps = Vec::new();
    for w in ts.windows(2).rev() {
        let (prev, t) = (w[0], w[1]);
        let mut eps = eps_at(model, &x, t)?;
        if let Some((mult, grad, step)) = guidance_term(guidance, task, &x, t, sched)? {
            let per = grad.len() / mult.len();
            for (i, (e, &g)) in eps.data_mut().iter_mut().zip(grad.data()).enumerate() {
                *e = *e - mult[i / per] * g;
            }
            if trace {
                steps.push(step);
            }
        } else if trace {
            steps.push(TraceStep {
                t,
                value: Vec::new(),
                scale: Vec::new(),
                grad_norm: Vec::new(),
            });
        }
        let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(prev));
        x = match cfg.sigma {
            SigmaMode::Deterministic => reverse_abar(&x, &eps, ab_t, ab_prev, 0.0, None)?,
            SigmaMode::Ancestral => {
                let noise = standard_normal(x.shape(), rng);
                reverse_abar(
                    &x,
                    &eps,
                    ab_t,
                    ab_prev,
                    ancestral_sigma(ab_t, ab_prev),
                    Some(&noise),
                )?
            }
        };
        if !x.all_finite() {
            return Err(SamplerError::NonFinite {
                step: t,
                what: "state",
            });
        }
    }
    Ok(TranslationResult {
        output: x,
        trace: trace.then_some(steps),
    })
}

/// Encodes to the noise level, then decodes with guidance. The output is
/// not clamped.
#[allow(clippy::too_many_arguments)]
pub fn translate<F: Scalar, M: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    task: Option<TaskModel<'_, F>>,
    x: &Array<F>,
    guidance: &GuidanceSpec<F>,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    trace: bool,
    rng: &mut R,
) -> Result<TranslationResult<F>> {
    guidance.validate(x)?;
    let x_l = encode(model, x, cfg, sched)?;
    decode(model, &x_l, cfg, sched, guidance, task, trace, rng)
}

/// Full reverse pass from `x_T ~ N(0, I)`.
pub fn sample_unconditional<F: Scalar, M: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    sched: &NoiseSchedule,
    shape: &[usize],
    sigma: SigmaMode,
    stride: usize,
    rng: &mut R,
) -> Result<Array<F>> {
    let cfg = SamplerConfig {
        noise_level: sched.steps(),
        sigma,
        stride,
    };
    let x_t = standard_normal(shape, rng);
    Ok(decode(
        model,
        &x_t,
        &cfg,
        sched,
        &GuidanceSpec::None,
        None,
        false,
        rng,
    )?
    .output)
}

fn standard_normal<F: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Array<F> {
    Array::from_fn(shape, |_| F::from_f64(rng.sample::<f64, _>(StandardNormal)))
}

#[cfg(test)]
mod tests;
