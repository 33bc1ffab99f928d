use super::{Result, SamplerError};
use crate::diffnum::{Array, Scalar};
use crate::diffusion::NoiseSchedule;

/// Reverse step between arbitrary signal levels `abar_t -> abar_prev`.
pub(crate) fn reverse_abar<F: Scalar>(
    x_t: &Array<F>,
    eps: &Array<F>,
    abar_t: f64,
    abar_prev: f64,
    sigma: f64,
    noise: Option<&Array<F>>,
) -> Result<Array<F>> {
    x_t.expect_same_shape(eps, "ddim_reverse_step")?;
    let dir2 = 1.0 - abar_prev - sigma * sigma;
    if dir2 < 0.0 {
        return Err(SamplerError::InvalidArgument(format!(
            "sigma^2 = {} exceeds 1 - abar_prev = {}",
            sigma * sigma,
            1.0 - abar_prev
        )));
    }
    let k0 = F::from_f64(abar_prev.sqrt());
    let ke = F::from_f64((1.0 - abar_t).sqrt());
    let inv = F::from_f64(abar_t.sqrt());
    let kd = F::from_f64(dir2.sqrt());
    let (xd, ed) = (x_t.data(), eps.data());
    let mut out = Array::from_fn(x_t.shape(), |i| {
        k0 * ((xd[i] - ke * ed[i]) / inv) + kd * ed[i]
    });
    if sigma != 0.0 {
        let noise = noise
            .ok_or_else(|| SamplerError::InvalidArgument("sigma > 0 needs a noise draw".into()))?;
        out.axpy(F::from_f64(sigma), noise)?;
    }
    Ok(out)
}

/// Forward (encoding) step between signal levels `abar_t -> abar_next`.
pub(crate) fn forward_abar<F: Scalar>(
    x_t: &Array<F>,
    eps: &Array<F>,
    abar_t: f64,
    abar_next: f64,
) -> Result<Array<F>> {
    x_t.expect_same_shape(eps, "ddim_forward_step")?;
    let s = abar_next.sqrt();
    let kx = F::from_f64(s * ((1.0 / abar_t).sqrt() - (1.0 / abar_next).sqrt()));
    let ke = F::from_f64(s * ((1.0 / abar_next - 1.0).sqrt() - (1.0 / abar_t - 1.0).sqrt()));
    let (xd, ed) = (x_t.data(), eps.data());
    Ok(Array::from_fn(x_t.shape(), |i| {
        xd[i] + (kx * xd[i] + ke * ed[i])
    }))
}

/// `x_t -> x_{t-1}` given the (possibly guided) noise estimate.
///
/// With `sigma == 0` the noise argument is ignored.
pub fn ddim_reverse_step<F: Scalar>(
    x_t: &Array<F>,
    eps_hat: &Array<F>,
    t: usize,
    sched: &NoiseSchedule,
    sigma: f64,
    noise: Option<&Array<F>>,
) -> Result<Array<F>> {
    check(t, 1, sched.steps())?;
    reverse_abar(
        x_t,
        eps_hat,
        sched.alpha_bar(t),
        sched.alpha_bar(t - 1),
        sigma,
        noise,
    )
}

/// `x_t -> x_{t+1}` given `eps = eps_theta(x_t, t)`.
pub fn ddim_forward_step<F: Scalar>(
    x_t: &Array<F>,
    eps: &Array<F>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Array<F>> {
    check(t, 0, sched.steps() - 1)?;
    forward_abar(x_t, eps, sched.alpha_bar(t), sched.alpha_bar(t + 1))
}

/// Posterior standard deviation of the ancestral sampler between two levels.
pub(crate) fn ancestral_sigma(abar_t: f64, abar_prev: f64) -> f64 {
    ((1.0 - abar_prev) / (1.0 - abar_t) * (1.0 - abar_t / abar_prev))
        .max(0.0)
        .sqrt()
}

fn check(t: usize, lo: usize, hi: usize) -> Result<()> {
    if t < lo || t > hi {
        return Err(SamplerError::InvalidArgument(format!(
            "timestep {t} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}
