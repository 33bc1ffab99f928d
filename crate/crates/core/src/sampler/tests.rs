use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::ScheduleKind;
use crate::synthlab::GaussianTask;
use crate::testutil::randn;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cosine(steps: usize) -> NoiseSchedule {
    NoiseSchedule::new(ScheduleKind::Cosine, steps).unwrap()
}

/// Direct 64-bit evaluation of the reverse update, written independently
/// of the library's coefficient grouping.
fn reverse_oracle(x: f64, e: f64, ab: f64, ab_prev: f64, sigma: f64, z: f64) -> f64 {
    let x0_pred = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
    ab_prev.sqrt() * x0_pred + (1.0 - ab_prev - sigma * sigma).sqrt() * e + sigma * z
}

/// Direct evaluation of the encoding update.
fn forward_oracle(x: f64, e: f64, ab: f64, ab_next: f64) -> f64 {
    let x0_pred = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
    ab_next.sqrt() * x0_pred + (1.0 - ab_next).sqrt() * e
}

fn rel(a: &Array<f64>, b: &Array<f64>) -> f64 {
    a.sub(b).unwrap().norm() / b.norm()
}

#[test]
fn reverse_step_without_noise_estimate_rescales() {
    let s = cosine(100);
    let x = randn(&mut rng(1), &[2, 1, 3, 3]);
    let zero = Array::zeros(x.shape());
    for t in [1, 50, 100] {
        let y = ddim_reverse_step(&x, &zero, t, &s, 0.0, None).unwrap();
        let k = (s.alpha_bar(t - 1) / s.alpha_bar(t)).sqrt();
        assert!(rel(&y, &x.scale(k)) < 1e-14);
    }
}

#[test]
fn final_reverse_step_collapses_to_prediction() {
    let s = cosine(100);
    let x = randn(&mut rng(2), &[1, 1, 4, 4]);
    let e = randn(&mut rng(3), &[1, 1, 4, 4]);
    let y = ddim_reverse_step(&x, &e, 1, &s, 0.0, None).unwrap();
    let ab = s.alpha_bar(1);
    let expect = Array::from_fn(x.shape(), |i| {
        (x.data()[i] - (1.0 - ab).sqrt() * e.data()[i]) / ab.sqrt()
    });
    assert!(rel(&y, &expect) < 1e-14);
}

#[test]
fn steps_match_formula_oracles() {
    let mut r = rng(4);
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = NoiseSchedule::new(kind, 500).unwrap();
        for _ in 0..20 {
            let t = r.random_range(1..500);
            let x = randn(&mut r, &[1, 1, 4, 4]);
            let e = randn(&mut r, &[1, 1, 4, 4]);
            let z = randn(&mut r, &[1, 1, 4, 4]);
            let sigma = 0.5 * (1.0 - s.alpha_bar(t - 1)).sqrt();
            let y = ddim_reverse_step(&x, &e, t, &s, sigma, Some(&z)).unwrap();
            let exp = Array::from_fn(x.shape(), |i| {
                reverse_oracle(
                    x.data()[i],
                    e.data()[i],
                    s.alpha_bar(t),
                    s.alpha_bar(t - 1),
                    sigma,
                    z.data()[i],
                )
            });
            assert!(rel(&y, &exp) < 1e-12);
            let f = ddim_forward_step(&x, &e, t, &s).unwrap();
            let exp = Array::from_fn(x.shape(), |i| {
                forward_oracle(x.data()[i], e.data()[i], s.alpha_bar(t), s.alpha_bar(t + 1))
            });
            assert!(rel(&f, &exp) < 1e-12);
        }
    }
}

#[test]
fn forward_step_without_noise_estimate_rescales() {
    let s = cosine(100);
    let x = randn(&mut rng(5), &[1, 1, 3, 3]);
    for t in [0, 10, 99] {
        let y = ddim_forward_step(&x, &Array::zeros(x.shape()), t, &s).unwrap();
        let k = (s.alpha_bar(t + 1) / s.alpha_bar(t)).sqrt();
        assert!(rel(&y, &x.scale(k)) < 1e-14);
    }
    assert!(ddim_forward_step(&x, &x, 100, &s).is_err());
}

#[test]
fn excessive_sigma_is_rejected() {
    let s = cosine(10);
    let x = Array::<f64>::zeros(&[1, 1, 2, 2]);
    assert!(ddim_reverse_step(&x, &x, 1, &s, 0.1, Some(&x)).is_err());
    assert!(ddim_reverse_step(&x, &x, 5, &s, 1.0, Some(&x)).is_err());
}

proptest! {
    #[test]
    fn forward_then_reverse_inverts(seed in 0u64..10_000, steps in 2usize..1000, frac in 0.0f64..1.0, linear: bool) {
        let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::Cosine };
        let s = NoiseSchedule::new(kind, steps).unwrap();
        let t = ((steps - 1) as f64 * frac) as usize;
        let mut r = rng(seed);
        let x = randn(&mut r, &[1, 1, 4, 4]);
        let e = randn(&mut r, &[1, 1, 4, 4]);
        let up = ddim_forward_step(&x, &e, t, &s).unwrap();
        let back = ddim_reverse_step(&up, &e, t + 1, &s, 0.0, None).unwrap();
        prop_assert!(rel(&back, &x) <= 1e-10);
    }
}

fn gaussian(steps: usize, variance: f64) -> GaussianTask {
    let mean = Array::from_fn(&[1, 1, 2, 2], |i| [0.2, -0.3, 0.5, 0.0][i]);
    GaussianTask::new(mean, variance, cosine(steps)).unwrap()
}

#[test]
fn single_tiny_step_is_near_identity() {
    let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
    let task = GaussianTask::new(Array::zeros(&[1, 1, 2, 2]), 1.0, s.clone()).unwrap();
    let x: Array<f64> = task.sample(4, &mut rng(6));
    let y = encode(&task, &x, &SamplerConfig::deterministic(1), &s).unwrap();
    assert!(y.sub(&x).unwrap().max_abs() < 1e-3);
}

#[test]
fn encoded_marginal_matches_closed_form() {
    let task = gaussian(1000, 0.3);
    let s = task.schedule.clone();
    let l = 400;
    let x: Array<f64> = task.sample(2500, &mut rng(7));
    let z = encode(&task, &x, &SamplerConfig::deterministic(l), &s).unwrap();
    let ab = s.alpha_bar(l);
    let var = ab * task.variance + 1.0 - ab;
    for p in 0..4 {
        let vals: Vec<f64> = z.data().iter().skip(p).step_by(4).copied().collect();
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
        let mu = ab.sqrt() * task.mean.data()[p];
        // 5% of the marginal standard deviation for the mean.
        assert!(
            (m - mu).abs() < 0.05 * var.sqrt(),
            "pixel {p}: mean {m} vs {mu}"
        );
        assert!((v / var - 1.0).abs() < 0.05, "pixel {p}: var {v} vs {var}");
    }
}

#[test]
fn encoding_is_injective_on_probes() {
    let task = gaussian(100, 0.3);
    let x: Array<f64> = task.sample(16, &mut rng(8));
    let z = encode(&task, &x, &SamplerConfig::deterministic(40), &task.schedule).unwrap();
    let items: Vec<Array<f64>> = (0..16).map(|i| z.batch_item(i).unwrap()).collect();
    for i in 0..16 {
        for j in i + 1..16 {
            assert!(items[i].sub(&items[j]).unwrap().max_abs() > 1e-9);
        }
    }
}

#[test]
fn analytic_round_trip_is_accurate() {
    let task = gaussian(1000, 0.3);
    let s = task.schedule.clone();
    let x: Array<f64> = task.sample(64, &mut rng(9));
    let y = translate(
        &task,
        None,
        &x,
        &GuidanceSpec::None,
        &SamplerConfig::deterministic(400),
        &s,
        false,
        &mut rng(0),
    )
    .unwrap()
    .output;
    assert!(rel(&y, &x) < 0.01, "{}", rel(&y, &x));
}

#[test]
fn strided_trajectories_visit_the_noise_level() {
    let cfg = SamplerConfig {
        noise_level: 10,
        sigma: SigmaMode::Deterministic,
        stride: 4,
    };
    assert_eq!(cfg.timesteps(), vec![0, 4, 8, 10]);
    assert_eq!(
        SamplerConfig::deterministic(3).timesteps(),
        vec![0, 1, 2, 3]
    );
    let s = cosine(100);
    assert_eq!(SamplerConfig::default_for(&s).noise_level, 40);
    assert!(SamplerConfig::deterministic(101).validate(&s).is_err());
    assert!(SamplerConfig::deterministic(0).validate(&s).is_err());
}

/// `R(x) = mean(x)` per item; the gradient is uniform.
struct MeanRegressor;

impl RegressionGuide<f64> for MeanRegressor {
    fn value_and_grad(
        &self,
        x: &Array<f64>,
        t: &[usize],
    ) -> Result<(Vec<f64>, Array<f64>), NetworkError> {
        let per = x.len() / t.len();
        let v = x
            .data()
            .chunks(per)
            .map(|c| c.iter().sum::<f64>() / per as f64)
            .collect();
        Ok((v, Array::full(x.shape(), 1.0 / per as f64)))
    }
}

/// Produces a NaN gradient once `t` falls to `at`.
struct Poisoned {
    at: usize,
}

impl RegressionGuide<f64> for Poisoned {
    fn value_and_grad(
        &self,
        x: &Array<f64>,
        t: &[usize],
    ) -> Result<(Vec<f64>, Array<f64>), NetworkError> {
        let g = if t[0] <= self.at { f64::NAN } else { 0.0 };
        Ok((vec![0.0; t.len()], Array::full(x.shape(), g)))
    }
}

/// `S(x) = sigmoid(x)` per pixel, with the exact BCE gradient.
struct PixelSegmenter;

impl SegmentationGuide<f64> for PixelSegmenter {
    fn bce_and_grad(
        &self,
        x: &Array<f64>,
        t: &[usize],
        mask: &Array<f64>,
    ) -> Result<(Vec<f64>, Array<f64>), NetworkError> {
        let per = x.len() / t.len();
        let p: Vec<f64> = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let h = p
            .chunks(per)
            .zip(mask.data().chunks(per))
            .map(|(p, z)| {
                p.iter()
                    .zip(z)
                    .map(|(p, z)| -(z * p.ln() + (1.0 - z) * (1.0 - p).ln()))
                    .sum::<f64>()
                    / per as f64
            })
            .collect();
        let g = Array::from_fn(x.shape(), |i| (p[i] - mask.data()[i]) / per as f64);
        Ok((h, g))
    }
}

fn run(
    guidance: &GuidanceSpec<f64>,
    task: Option<TaskModel<'_, f64>>,
) -> Result<TranslationResult<f64>> {
    let g = gaussian(100, 0.3);
    let x: Array<f64> = g.sample(3, &mut rng(10));
    translate(
        &g,
        task,
        &x,
        guidance,
        &SamplerConfig::deterministic(40),
        &g.schedule,
        true,
        &mut rng(0),
    )
}

#[test]
fn zero_scale_matches_unguided_bitwise() {
    let plain = run(&GuidanceSpec::None, None).unwrap().output;
    let reg = GuidanceSpec::Regression {
        target: 3.0,
        scale: 0.0,
        mode: RegressionMode::Adaptive,
    };
    let out = run(&reg, Some(TaskModel::Regression(&MeanRegressor))).unwrap();
    let bits = |a: &Array<f64>| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out.output), bits(&plain));
    let seg = GuidanceSpec::Segmentation {
        mask: Array::ones(&[1, 1, 2, 2]),
        scale: 0.0,
    };
    let out = run(&seg, Some(TaskModel::Segmentation(&PixelSegmenter))).unwrap();
    assert_eq!(bits(&out.output), bits(&plain));
}

#[test]
fn adaptive_scale_follows_the_sign_of_the_residual() {
    let reg = GuidanceSpec::Regression {
        target: 0.5,
        scale: 400.0,
        mode: RegressionMode::Adaptive,
    };
    let out = run(&reg, Some(TaskModel::Regression(&MeanRegressor))).unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.len(), 40);
    assert_eq!(trace[0].t, 40);
    for step in &trace {
        for (s, v) in step.scale.iter().zip(&step.value) {
            assert_eq!(*s, 0.5 - v);
        }
    }
    // A strong pull overshoots the target, so s_t changes sign along the way.
    let s0: Vec<f64> = trace.iter().map(|s| s.scale[0]).collect();
    assert!(
        s0.iter().any(|&s| s > 0.0) && s0.iter().any(|&s| s < 0.0),
        "{s0:?}"
    );
}

#[test]
fn fixed_sign_is_constant_and_pushes_that_way() {
    let plain = run(&GuidanceSpec::None, None).unwrap().output;
    for sign in [1.0, -1.0] {
        let reg = GuidanceSpec::Regression {
            target: 0.0,
            scale: 5.0,
            mode: RegressionMode::FixedSign(sign),
        };
        let out = run(&reg, Some(TaskModel::Regression(&MeanRegressor))).unwrap();
        assert!(out
            .trace
            .unwrap()
            .iter()
            .all(|s| s.scale.iter().all(|&v| v == sign)));
        let shift = out.output.sum() - plain.sum();
        assert!(shift * sign > 0.0, "sign {sign}: shift {shift}");
    }
}

#[test]
fn segmentation_guidance_moves_toward_the_mask() {
    let mask = Array::from_f64(&[1, 1, 2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let plain = run(&GuidanceSpec::None, None).unwrap().output;
    let seg = GuidanceSpec::Segmentation { mask, scale: 5.0 };
    let out = run(&seg, Some(TaskModel::Segmentation(&PixelSegmenter)))
        .unwrap()
        .output;
    for (i, (o, p)) in out.data().iter().zip(plain.data()).enumerate() {
        let up = i % 2 == 0;
        assert_eq!(o > p, up, "pixel {i}");
    }
}

#[test]
fn subtracting_the_cross_entropy_gradient_would_ascend_it() {
    // One reverse step with eps_hat = eps - k grad H raises H; the sampler
    // therefore injects the term with the opposite sign.
    let s = cosine(100);
    let t = 30;
    let x = Array::from_f64(&[1, 1, 1, 2], &[0.1, -0.2]).unwrap();
    let mask = Array::from_f64(&[1, 1, 1, 2], &[1.0, 0.0]).unwrap();
    let eps = Array::zeros(x.shape());
    let (h0, g) = PixelSegmenter.bce_and_grad(&x, &[t], &mask).unwrap();
    let k = 5.0 * (1.0 - s.alpha_bar(t)).sqrt();
    let h_after = |step: f64| {
        let mut e = eps.clone();
        e.axpy(step, &g).unwrap();
        let y = ddim_reverse_step(&x, &e, t, &s, 0.0, None).unwrap();
        // Compare at the same scale, removing the deterministic rescaling.
        let y = y.scale((s.alpha_bar(t) / s.alpha_bar(t - 1)).sqrt());
        PixelSegmenter.bce_and_grad(&y, &[t], &mask).unwrap().0[0]
    };
    assert!(h_after(-k) > h0[0]);
    assert!(h_after(k) < h0[0]);
}

#[test]
fn guidance_errors() {
    let reg = GuidanceSpec::Regression {
        target: 0.1,
        scale: 1.0,
        mode: RegressionMode::Adaptive,
    };
    assert!(matches!(
        run(&reg, None),
        Err(SamplerError::MissingTaskModel("regression"))
    ));
    assert!(matches!(
        run(&reg, Some(TaskModel::Segmentation(&PixelSegmenter))),
        Err(SamplerError::MissingTaskModel(_))
    ));
    match run(&reg, Some(TaskModel::Regression(&Poisoned { at: 17 }))) {
        Err(SamplerError::NonFinite { step, .. }) => assert_eq!(step, 17),
        other => panic!("{other:?}"),
    }
    let bad_sign = GuidanceSpec::Regression {
        target: 0.1,
        scale: 1.0,
        mode: RegressionMode::FixedSign(0.5),
    };
    assert!(run(&bad_sign, Some(TaskModel::Regression(&MeanRegressor))).is_err());
    let bad_mask = GuidanceSpec::Segmentation {
        mask: Array::full(&[1, 1, 2, 2], 0.5),
        scale: 1.0,
    };
    assert!(run(&bad_mask, Some(TaskModel::Segmentation(&PixelSegmenter))).is_err());
}

#[test]
fn unconditional_samples_follow_the_data_mean() {
    let task = gaussian(100, 0.3);
    let n = 1000;
    let xs: Array<f64> = sample_unconditional(
        &task,
        &task.schedule,
        &[n, 1, 2, 2],
        SigmaMode::Deterministic,
        1,
        &mut rng(11),
    )
    .unwrap();
    assert_eq!(xs.shape(), &[n, 1, 2, 2]);
    for p in 0..4 {
        let vals: Vec<f64> = xs.data().iter().skip(p).step_by(4).copied().collect();
        let m = vals.iter().sum::<f64>() / n as f64;
        let se = (task.variance / n as f64).sqrt();
        assert!((m - task.mean.data()[p]).abs() < 3.0 * se, "pixel {p}: {m}");
    }
    let again: Array<f64> = sample_unconditional(
        &task,
        &task.schedule,
        &[n, 1, 2, 2],
        SigmaMode::Deterministic,
        1,
        &mut rng(11),
    )
    .unwrap();
    assert_eq!(xs, again);
}

#[test]
fn ancestral_sampling_draws_fresh_noise() {
    let task = gaussian(50, 0.3);
    let a: Array<f64> = sample_unconditional(
        &task,
        &task.schedule,
        &[4, 1, 2, 2],
        SigmaMode::Ancestral,
        1,
        &mut rng(12),
    )
    .unwrap();
    let b: Array<f64> = sample_unconditional(
        &task,
        &task.schedule,
        &[4, 1, 2, 2],
        SigmaMode::Ancestral,
        1,
        &mut rng(12),
    )
    .unwrap();
    let c: Array<f64> = sample_unconditional(
        &task,
        &task.schedule,
        &[4, 1, 2, 2],
        SigmaMode::Ancestral,
        1,
        &mut rng(13),
    )
    .unwrap();
    assert!(a.all_finite());
    assert_eq!(a, b);
    assert_ne!(a, c);
}
