use serde::{Deserialize, Serialize};

use super::{DiffusionError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Betas evenly spaced from 1e-4 to 0.02.
    Linear,
    /// Squared-cosine signal curve with offset 0.008, betas capped at 0.999.
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(format!("unknown schedule kind `{other}`")),
        }
    }
}

/// What a checkpoint records to rebuild a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub steps: usize,
}

/// Variance tables indexed by timestep `0..=T`.
///
/// Index 0 is the clean image: `alpha_bar(0) == 1` and `beta(0) == 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(DiffusionError::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let (start, end) = (1e-4, 0.02);
                (0..steps)
                    .map(|i| {
                        if steps == 1 {
                            start
                        } else {
                            start + (end - start) * i as f64 / (steps - 1) as f64
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: usize| {
                    let u = (t as f64 / steps as f64 + s) / (1.0 + s);
                    (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-12, 0.999))
                    .collect()
            }
        };
        Ok(Self::from_betas(kind, &betas))
    }

    fn from_betas(kind: ScheduleKind, betas: &[f64]) -> Self {
        let mut beta = Vec::with_capacity(betas.len() + 1);
        let mut alpha = Vec::with_capacity(betas.len() + 1);
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        for &b in betas {
            beta.push(b);
            alpha.push(1.0 - b);
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Self {
            kind,
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn from_spec(spec: ScheduleSpec) -> Result<Self> {
        Self::new(spec.kind, spec.steps)
    }

    pub fn spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: self.kind,
            steps: self.steps(),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize, min: usize) -> Result<()> {
        if t < min || t > self.steps() {
            return Err(DiffusionError::InvalidArgument(format!(
                "timestep {t} outside [{min}, {}]",
                self.steps()
            )));
        }
        Ok(())
    }
}
