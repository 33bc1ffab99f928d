use rand::Rng;
use rand_distr::StandardNormal;

use super::{Result, SynthError};
use crate::diffnum::{Array, Scalar};
use crate::diffusion::{NoisePredictor, NoiseSchedule};
use crate::networks::NetworkError;

/// Data distributed as `N(mean, variance * I)`, for which the optimal noise
/// predictor has a closed form.
#[derive(Debug, Clone)]
pub struct GaussianTask {
    /// `[1, c, h, w]`, broadcast over the batch.
    pub mean: Array<f64>,
    pub variance: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianTask {
    pub fn new(mean: Array<f64>, variance: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(variance >= 0.0 && variance.is_finite()) {
            return Err(SynthError::Config(format!(
                "variance {variance} must be non-negative"
            )));
        }
        if mean.shape().len() != 4 || mean.shape()[0] != 1 {
            return Err(SynthError::Config(format!(
                "mean image shape {:?} is not [1, c, h, w]",
                mean.shape()
            )));
        }
        Ok(GaussianTask {
            mean,
            variance,
            schedule,
        })
    }

    pub fn sample<F: Scalar, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array<F> {
        let per = self.mean.len();
        let sd = self.variance.sqrt();
        let mut shape = self.mean.shape().to_vec();
        shape[0] = n;
        Array::from_fn(&shape, |i| {
            F::from_f64(self.mean.data()[i % per] + sd * rng.sample::<f64, _>(StandardNormal))
        })
    }
}

/// Posterior mean of the noise given `x_t`:
/// `sqrt(1 - abar) (x_t - sqrt(abar) mu) / (abar s^2 + 1 - abar)`.
pub fn gaussian_optimal_epsilon<F: Scalar>(
    task: &GaussianTask,
    x_t: &Array<F>,
    t: usize,
) -> Result<Array<F>> {
    if t > task.schedule.steps() {
        return Err(SynthError::Config(format!("timestep {t} beyond schedule")));
    }
    let per = task.mean.len();
    if !x_t.len().is_multiple_of(per) || x_t.shape()[1..] != task.mean.shape()[1..] {
        return Err(SynthError::Config(format!(
            "input {:?} does not match mean {:?}",
            x_t.shape(),
            task.mean.shape()
        )));
    }
    let ab = task.schedule.alpha_bar(t);
    let k = (1.0 - ab).sqrt() / (ab * task.variance + 1.0 - ab);
    let m = ab.sqrt();
    Ok(Array::from_fn(x_t.shape(), |i| {
        let x = x_t.data()[i].to_f64().unwrap_or(f64::NAN);
        F::from_f64(k * (x - m * task.mean.data()[i % per]))
    }))
}

impl<F: Scalar> NoisePredictor<F> for GaussianTask {
    fn predict_noise(&self, x_t: &Array<F>, t: &[usize]) -> Result<Array<F>, NetworkError> {
        let n = x_t.shape()[0];
        if t.len() != n {
            return Err(NetworkError::Timesteps {
                expected: n,
                got: t.len(),
            });
        }
        let per = x_t.len() / n;
        let mut out = Vec::with_capacity(x_t.len());
        for (i, &ti) in t.iter().enumerate() {
            let item = x_t.batch_item(i)?;
            let eps = gaussian_optimal_epsilon(self, &item, ti)
                .map_err(|e| NetworkError::Config(e.to_string()))?;
            debug_assert_eq!(eps.len(), per);
            out.extend_from_slice(eps.data());
        }
        Ok(Array::from_vec(x_t.shape(), out)?)
    }
}
