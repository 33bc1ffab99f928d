use rand::Rng;
use rand_distr::StandardNormal;

use super::{DiffusionError, NoiseSchedule, Result};
use crate::diffnum::{Array, Scalar, Var};
use crate::networks::{EpsilonModel, NetworkError, RegModel, SegModel};

/// Anything that estimates the noise component of `x_t`.
pub trait NoisePredictor<F: Scalar> {
    fn predict_noise(&self, x_t: &Array<F>, t: &[usize]) -> Result<Array<F>, NetworkError>;
}

/// One scalar per batch item.
pub trait Regressor<F: Scalar> {
    fn regress(&self, x_t: &Array<F>, t: &[usize]) -> Result<Vec<F>, NetworkError>;
}

/// Per-pixel foreground probabilities, `[n, 1, h, w]`.
pub trait Segmenter<F: Scalar> {
    fn segment(&self, x_t: &Array<F>, t: &[usize]) -> Result<Array<F>, NetworkError>;
}

impl<F: Scalar> NoisePredictor<F> for EpsilonModel<F> {
    fn predict_noise(&self, x_t: &Array<F>, t: &[usize]) -> Result<Array<F>, NetworkError> {
        self.predict(x_t, t)
    }
}

impl<F: Scalar> Regressor<F> for RegModel<F> {
    fn regress(&self, x_t: &Array<F>, t: &[usize]) -> Result<Vec<F>, NetworkError> {
        self.predict(x_t, t)
    }
}

impl<F: Scalar> Segmenter<F> for SegModel<F> {
    fn segment(&self, x_t: &Array<F>, t: &[usize]) -> Result<Array<F>, NetworkError> {
        self.predict(x_t, t)
    }
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, with one timestep per item.
pub fn q_sample<F: Scalar>(
    x0: &Array<F>,
    t: &[usize],
    eps: &Array<F>,
    sched: &NoiseSchedule,
) -> Result<Array<F>> {
    let n = x0.shape()[0];
    if t.len() != n {
        return Err(DiffusionError::InvalidArgument(format!(
            "{} timesteps for a batch of {n}",
            t.len()
        )));
    }
    for &ti in t {
        sched.check_step(ti, 1)?;
    }
    let abar: Vec<f64> = t.iter().map(|&ti| sched.alpha_bar(ti)).collect();
    noise_at(x0, eps, &abar)
}

/// Forward noising with explicit per-item `abar` values.
pub(crate) fn noise_at<F: Scalar>(x0: &Array<F>, eps: &Array<F>, abar: &[f64]) -> Result<Array<F>> {
    x0.expect_same_shape(eps, "q_sample")?;
    let per = x0.len() / abar.len();
    let (xd, ed) = (x0.data(), eps.data());
    Ok(Array::from_fn(x0.shape(), |i| {
        let ab = abar[i / per];
        F::from_f64(ab.sqrt()) * xd[i] + F::from_f64((1.0 - ab).sqrt()) * ed[i]
    }))
}

/// A noised training batch.
#[derive(Debug, Clone)]
pub struct Noised<F> {
    pub t: Vec<usize>,
    pub eps: Array<F>,
    pub x_t: Array<F>,
}

/// Draws `t` uniformly from `1..=T` per item, then fresh standard normal
/// noise, and applies [`q_sample`].
pub fn draw_noising<F: Scalar, R: Rng + ?Sized>(
    x0: &Array<F>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Noised<F>> {
    let n = x0.shape()[0];
    let t: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps = Array::from_fn(x0.shape(), |_| {
        F::from_f64(rng.sample::<f64, _>(StandardNormal))
    });
    let x_t = q_sample(x0, &t, &eps, sched)?;
    Ok(Noised { t, eps, x_t })
}

/// Mean squared error between the model's noise estimate and the drawn
/// noise, averaged over every element of the batch.
pub fn ddpm_loss<'t, F: Scalar, R: Rng + ?Sized>(
    model: &EpsilonModel<F>,
    params: &[Var<'t, F>],
    x0: &Array<F>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var<'t, F>> {
    let tape = params
        .first()
        .ok_or_else(|| DiffusionError::InvalidArgument("model has no parameters".into()))?
        .tape();
    let noised = draw_noising(x0, sched, rng)?;
    let pred = model.forward(params, tape.constant(noised.x_t), &noised.t)?;
    Ok(pred.sub(tape.constant(noised.eps))?.square()?.mean()?)
}

/// [`ddpm_loss`] for any predictor, without gradients.
pub fn ddpm_loss_value<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x0: &Array<F>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let noised = draw_noising(x0, sched, rng)?;
    let pred = model.predict_noise(&noised.x_t, &noised.t)?;
    let err = pred.sub(&noised.eps)?;
    Ok(err.dot(&err)?.to_f64().unwrap_or(f64::NAN) / err.len() as f64)
}

fn check_labels(n: usize, labels: &[f64]) -> Result<()> {
    if labels.len() != n {
        return Err(DiffusionError::InvalidArgument(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    Ok(())
}

/// Masks must be binary and shaped `[n, 1, h, w]` like the images.
pub fn validate_mask<F: Scalar>(x0: &Array<F>, masks: &Array<F>) -> Result<()> {
    let xs = x0.shape();
    if masks.shape() != [xs[0], 1, xs[2], xs[3]] {
        return Err(DiffusionError::InvalidArgument(format!(
            "mask shape {:?} does not match images {xs:?}",
            masks.shape()
        )));
    }
    if let Some(v) = masks
        .data()
        .iter()
        .find(|&&v| v != F::zero() && v != F::one())
    {
        return Err(DiffusionError::InvalidArgument(format!(
            "mask value {v} is not 0 or 1"
        )));
    }
    Ok(())
}

/// Mean squared error of the regressor on noised inputs. Labels belong to
/// the clean images whatever `t` is drawn.
pub fn regression_loss<'t, F: Scalar, R: Rng + ?Sized>(
    model: &RegModel<F>,
    params: &[Var<'t, F>],
    x0: &Array<F>,
    labels: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var<'t, F>> {
    check_labels(x0.shape()[0], labels)?;
    let tape = params
        .first()
        .ok_or_else(|| DiffusionError::InvalidArgument("model has no parameters".into()))?
        .tape();
    let noised = draw_noising(x0, sched, rng)?;
    let pred = model.forward(params, tape.constant(noised.x_t), &noised.t)?;
    let target = Array::from_f64(&[labels.len()], labels)?;
    Ok(pred.sub(tape.constant(target))?.square()?.mean()?)
}

pub fn regression_loss_value<F: Scalar, M: Regressor<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &Array<F>,
    labels: &[f64],
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    check_labels(x0.shape()[0], labels)?;
    let noised = draw_noising(x0, sched, rng)?;
    let pred = model.regress(&noised.x_t, &noised.t)?;
    let total: f64 = pred
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let d = p.to_f64().unwrap_or(f64::NAN) - l;
            d * d
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean binary cross-entropy of the segmenter on noised inputs.
pub fn segmentation_loss<'t, F: Scalar, R: Rng + ?Sized>(
    model: &SegModel<F>,
    params: &[Var<'t, F>],
    x0: &Array<F>,
    masks: &Array<F>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var<'t, F>> {
    validate_mask(x0, masks)?;
    let tape = params
        .first()
        .ok_or_else(|| DiffusionError::InvalidArgument("model has no parameters".into()))?
        .tape();
    let noised = draw_noising(x0, sched, rng)?;
    let logits = model.forward(params, tape.constant(noised.x_t), &noised.t)?;
    Ok(logits.bce_with_logits(masks)?.mean()?)
}

pub fn segmentation_loss_value<F: Scalar, M: Segmenter<F> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x0: &Array<F>,
    masks: &Array<F>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    validate_mask(x0, masks)?;
    let noised = draw_noising(x0, sched, rng)?;
    let probs = model.segment(&noised.x_t, &noised.t)?;
    Ok(binary_cross_entropy(
        &probs.to_f64_vec(),
        &masks.to_f64_vec(),
    ))
}

pub(crate) fn binary_cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    const FLOOR: f64 = 1e-12;
    let total: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &z)| -(z * p.max(FLOOR).ln() + (1.0 - z) * (1.0 - p).max(FLOOR).ln()))
        .sum();
    total / probs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::testutil::{randn, rng};

    struct PerfectPredictor<'a> {
        x0: &'a Array<f64>,
        sched: &'a NoiseSchedule,
    }

    impl NoisePredictor<f64> for PerfectPredictor<'_> {
        fn predict_noise(&self, x_t: &Array<f64>, t: &[usize]) -> Result<Array<f64>, NetworkError> {
            let per = x_t.len() / t.len();
            Ok(Array::from_fn(x_t.shape(), |i| {
                let ab = self.sched.alpha_bar(t[i / per]);
                (x_t.data()[i] - ab.sqrt() * self.x0.data()[i]) / (1.0 - ab).sqrt()
            }))
        }
    }

    struct Zero;

    impl NoisePredictor<f64> for Zero {
        fn predict_noise(&self, x_t: &Array<f64>, _: &[usize]) -> Result<Array<f64>, NetworkError> {
            Ok(Array::zeros(x_t.shape()))
        }
    }

    struct Constant(f64);

    impl Regressor<f64> for Constant {
        fn regress(&self, _: &Array<f64>, t: &[usize]) -> Result<Vec<f64>, NetworkError> {
            Ok(vec![self.0; t.len()])
        }
    }

    impl Segmenter<f64> for Constant {
        fn segment(&self, x: &Array<f64>, _: &[usize]) -> Result<Array<f64>, NetworkError> {
            let s = x.shape();
            Ok(Array::full(&[s[0], 1, s[2], s[3]], self.0))
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap()
    }

    #[test]
    fn q_sample_limits() {
        let s = sched();
        let x0 = randn(&mut rng(1), &[2, 1, 3, 3]);
        let eps = randn(&mut rng(2), &[2, 1, 3, 3]);
        let zero = Array::zeros(x0.shape());
        let t = [10, 60];
        let a = q_sample(&x0, &t, &zero, &s).unwrap();
        let b = q_sample(&zero, &t, &eps, &s).unwrap();
        for i in 0..x0.len() {
            let ab = s.alpha_bar(t[i / 9]);
            assert_eq!(a.data()[i], ab.sqrt() * x0.data()[i]);
            assert_eq!(b.data()[i], (1.0 - ab).sqrt() * eps.data()[i]);
        }
    }

    #[test]
    fn q_sample_direct_evaluation() {
        let one = Array::<f64>::ones(&[1]);
        let x = noise_at(&one, &one, &[0.25]).unwrap();
        let oracle = 0.5 + 0.75f64.sqrt();
        assert!((x.data()[0] - oracle).abs() < 1e-15);
    }

    #[test]
    fn q_sample_rejects_bad_input() {
        let s = sched();
        let x0 = Array::<f64>::zeros(&[2, 1, 2, 2]);
        assert!(q_sample(&x0, &[1, 2], &Array::zeros(&[2, 1, 2, 3]), &s).is_err());
        assert!(q_sample(&x0, &[0, 2], &Array::zeros(&[2, 1, 2, 2]), &s).is_err());
        assert!(q_sample(&x0, &[1], &Array::zeros(&[2, 1, 2, 2]), &s).is_err());
    }

    #[test]
    fn q_sample_variance_matches_one_minus_abar() {
        let s = sched();
        let t = 40;
        let n = 10_000;
        let x0 = Array::full(&[n, 1, 1, 1], 0.3);
        let eps = randn(&mut rng(3), &[n, 1, 1, 1]);
        let xt = q_sample(&x0, &vec![t; n], &eps, &s).unwrap();
        let m = xt.mean();
        let var = xt.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - s.alpha_bar(t);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = sched();
        let x0 = randn(&mut rng(4), &[5, 1, 4, 4]);
        let l = ddpm_loss_value(
            &PerfectPredictor { x0: &x0, sched: &s },
            &x0,
            &s,
            &mut rng(5),
        )
        .unwrap();
        assert!(l < 1e-20, "{l}");
    }

    #[test]
    fn zero_predictor_loss_is_noise_second_moment() {
        let s = sched();
        let x0 = randn(&mut rng(6), &[50, 1, 16, 16]);
        let l = ddpm_loss_value(&Zero, &x0, &s, &mut rng(7)).unwrap();
        assert!((l - 1.0).abs() < 0.02, "{l}");
    }

    #[test]
    fn task_loss_stubs() {
        let s = sched();
        let x0 = randn(&mut rng(8), &[2, 1, 4, 4]);
        let labels = [0.2, 0.4];
        let r = |c| regression_loss_value(&Constant(c), &x0, &labels, &s, &mut rng(9)).unwrap();
        assert!(r(0.3) < r(0.29) && r(0.3) < r(0.31));
        assert!((r(0.3) - 0.01).abs() < 1e-15);
        let masks = Array::from_fn(&[2, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let h = segmentation_loss_value(&Constant(0.5), &x0, &masks, &s, &mut rng(10)).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        let s = sched();
        let x0 = Array::<f64>::zeros(&[1, 1, 2, 2]);
        let masks = Array::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 0.5, 0.0]).unwrap();
        assert!(segmentation_loss_value(&Constant(0.5), &x0, &masks, &s, &mut rng(0)).is_err());
    }

    #[test]
    fn labels_do_not_depend_on_drawn_timesteps() {
        // The regression target is the clean label; only the inputs change.
        let s = sched();
        let x0 = randn(&mut rng(11), &[3, 1, 4, 4]);
        let labels = [0.1, 0.2, 0.3];
        let a = regression_loss_value(&Constant(0.0), &x0, &labels, &s, &mut rng(1)).unwrap();
        let b = regression_loss_value(&Constant(0.0), &x0, &labels, &s, &mut rng(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, (0.01 + 0.04 + 0.09) / 3.0);
    }
}
