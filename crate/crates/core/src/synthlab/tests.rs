use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::diffnum::Array;
use crate::diffusion::{ddpm_loss_value, NoisePredictor, NoiseSchedule, ScheduleKind};
use crate::networks::NetworkError;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn count(m: &[bool]) -> usize {
    m.iter().filter(|&&b| b).count()
}

#[test]
fn healthy_scene_has_no_disk() {
    let s = gen_scene(&mut rng(1), &SceneConfig::default(), None).unwrap();
    assert_eq!(s.ratio, 0.0);
    assert_eq!(count(&s.mask), 0);
    assert!(s.is_healthy());
}

#[test]
fn scene_invariants() {
    let cfg = SceneConfig::default();
    let ds = gen_dataset(300, 4, &cfg).unwrap();
    for s in &ds.scenes {
        assert_eq!(s.ratio, count(&s.mask) as f64 / count(&s.foreground) as f64);
        assert!(s.mask.iter().zip(&s.foreground).all(|(&m, &f)| !m || f));
        assert!((0.0..=0.5).contains(&s.ratio));
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        if !s.is_healthy() {
            assert!(s.ratio >= cfg.ratio_range.0 && s.ratio < cfg.ratio_range.1);
        }
        // Intensity classes separate cleanly at the measurement threshold.
        let measured = measure_ratio(&s.image, &s.foreground, cfg.disk_threshold());
        assert_eq!(measured, s.ratio);
        assert_eq!(foreground_of(&s.image, &cfg), s.foreground);
    }
}

#[test]
fn rasterized_area_defines_ratio() {
    let cfg = SceneConfig::default();
    let s = gen_scene(&mut rng(9), &cfg, Some((0.1, 0.12))).unwrap();
    let d = s.params.disk.unwrap();
    let area = (0..32 * 32)
        .filter(|&i| {
            let (x, y) = ((i % 32) as f64 + 0.5, (i / 32) as f64 + 0.5);
            (x - d.cx).powi(2) + (y - d.cy).powi(2) <= d.radius * d.radius
        })
        .count();
    assert_eq!(s.ratio, area as f64 / count(&s.foreground) as f64);
}

#[test]
fn generation_is_deterministic_per_seed() {
    let cfg = SceneConfig::default();
    let a = gen_dataset(20, 7, &cfg).unwrap();
    let b = gen_dataset(20, 7, &cfg).unwrap();
    let c = gen_dataset(20, 8, &cfg).unwrap();
    assert_eq!(a.scenes, b.scenes);
    assert_ne!(a.scenes, c.scenes);
}

#[test]
fn healthy_count_is_exact() {
    let ds = gen_dataset(1000, 2, &SceneConfig::default()).unwrap();
    assert_eq!(ds.scenes.iter().filter(|s| s.is_healthy()).count(), 300);
    assert!(gen_dataset(0, 2, &SceneConfig::default()).is_err());
}

#[test]
fn ratio_histogram_is_flat() {
    let cfg = SceneConfig::default();
    let ds = gen_dataset(10_000, 3, &cfg).unwrap();
    let (lo, hi) = cfg.ratio_range;
    let mut bins = [0usize; 10];
    let mut n = 0;
    for s in ds.scenes.iter().filter(|s| !s.is_healthy()) {
        let k = (((s.ratio - lo) / (hi - lo)) * 10.0).floor() as usize;
        bins[k.min(9)] += 1;
        n += 1;
    }
    let expect = n as f64 / 10.0;
    for (k, &b) in bins.iter().enumerate() {
        assert!(
            (b as f64 / expect - 1.0).abs() <= 0.05,
            "decile {k}: {b} vs {expect}"
        );
    }
}

#[test]
fn inpainting_masks_are_legal() {
    let cfg = SceneConfig::default();
    let s = gen_scene(&mut rng(5), &cfg, None).unwrap();
    let mut r = rng(6);
    for _ in 0..20 {
        let m = random_disk_mask(&mut r, &cfg, &s).unwrap();
        assert!(count(&m) > 0);
        assert!(m.iter().zip(&s.foreground).all(|(&m, &f)| !m || f));
    }
}

#[test]
fn masks_placed_from_a_recovered_foreground_stay_inside_it() {
    let cfg = SceneConfig::default();
    let s = gen_scene(&mut rng(8), &cfg, None).unwrap();
    let quantized: Vec<f64> = s.image.iter().map(|&v| from_u8(to_u8(v))).collect();
    let fg = foreground_of(&quantized, &cfg);
    assert_eq!(fg, s.foreground);
    let mut r = rng(9);
    for _ in 0..20 {
        let m = random_disk_mask_in(&mut r, &cfg, &fg).unwrap();
        let ratio = count(&m) as f64 / count(&fg) as f64;
        assert!(
            ratio >= cfg.ratio_range.0 && ratio < cfg.ratio_range.1,
            "{ratio}"
        );
        assert!(dilate(&m, cfg.size, 1)
            .iter()
            .zip(&fg)
            .all(|(&m, &f)| !m || f));
    }
    assert!(random_disk_mask_in(&mut r, &cfg, &vec![false; cfg.size * cfg.size]).is_err());
}

fn task(variance: f64, steps: usize) -> GaussianTask {
    let mean = Array::from_fn(&[1, 1, 4, 4], |i| 0.1 * i as f64 - 0.5);
    GaussianTask::new(
        mean,
        variance,
        NoiseSchedule::new(ScheduleKind::Cosine, steps).unwrap(),
    )
    .unwrap()
}

#[test]
fn deterministic_data_recovers_exact_noise() {
    let task = task(0.0, 100);
    let eps = Array::from_fn(&[1, 1, 4, 4], |i| (i as f64).sin());
    for t in [1, 30, 100] {
        let ab = task.schedule.alpha_bar(t);
        let x_t = Array::from_fn(&[1, 1, 4, 4], |i| {
            ab.sqrt() * task.mean.data()[i] + (1.0 - ab).sqrt() * eps.data()[i]
        });
        let got = gaussian_optimal_epsilon(&task, &x_t, t).unwrap();
        assert!(got.sub(&eps).unwrap().max_abs() < 1e-12);
    }
}

#[test]
fn optimal_noise_vanishes_at_the_mean() {
    let task = task(0.3, 100);
    let ab = task.schedule.alpha_bar(40);
    let x_t = task.mean.scale(ab.sqrt());
    assert!(gaussian_optimal_epsilon(&task, &x_t, 40).unwrap().max_abs() < 1e-15);
}

#[test]
fn optimal_noise_matches_monte_carlo_posterior_mean() {
    // Scalar pixel: draw (x0, eps) jointly and average eps over draws whose
    // x_t lands in a narrow window. The posterior mean is linear in x_t, so
    // a symmetric window carries no bias.
    let (mu, s2, t) = (0.4, 0.5, 300);
    let sched = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
    let ab = sched.alpha_bar(t);
    let task = GaussianTask::new(Array::full(&[1, 1, 1, 1], mu), s2, sched).unwrap();
    let x_star = 0.3;
    let half = 0.05;
    let mut r = rng(11);
    let mut hits = Vec::new();
    for _ in 0..100_000 {
        let x0 = mu + s2.sqrt() * r.sample::<f64, _>(StandardNormal);
        let e: f64 = r.sample(StandardNormal);
        let x_t = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
        if (x_t - x_star).abs() < half {
            hits.push(e);
        }
    }
    let n = hits.len() as f64;
    let mean = hits.iter().sum::<f64>() / n;
    let sd = (hits.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let analytic = gaussian_optimal_epsilon(&task, &Array::full(&[1, 1, 1, 1], x_star), t)
        .unwrap()
        .data()[0];
    assert!(
        (mean - analytic).abs() < 3.0 * sd / n.sqrt(),
        "{mean} vs {analytic}, n={n}"
    );
}

struct Constant(f64);

impl NoisePredictor<f64> for Constant {
    fn predict_noise(&self, x: &Array<f64>, _: &[usize]) -> Result<Array<f64>, NetworkError> {
        Ok(Array::full(x.shape(), self.0))
    }
}

#[test]
fn optimal_noise_beats_constant_predictors() {
    let task = task(0.2, 200);
    let x0: Array<f64> = task.sample(64, &mut rng(12));
    let best = ddpm_loss_value(&task, &x0, &task.schedule, &mut rng(13)).unwrap();
    for c in [-0.1, 0.0, 0.1] {
        let l = ddpm_loss_value(&Constant(c), &x0, &task.schedule, &mut rng(13)).unwrap();
        assert!(best < l, "{best} vs {l} at c={c}");
    }
}

#[test]
fn optimal_loss_equals_posterior_variance() {
    // With t uniform on 1..=T the expected loss of the optimal predictor is
    // the average posterior variance abar s^2 / (abar s^2 + 1 - abar).
    let task = task(0.25, 1000);
    let sched = &task.schedule;
    let s2 = task.variance;
    let oracle: f64 = (1..=1000)
        .map(|t| {
            let ab = sched.alpha_bar(t);
            ab * s2 / (ab * s2 + 1.0 - ab)
        })
        .sum::<f64>()
        / 1000.0;
    let x0: Array<f64> = task.sample(20_000, &mut rng(14));
    let mc = ddpm_loss_value(&task, &x0, sched, &mut rng(15)).unwrap();
    assert!((mc / oracle - 1.0).abs() < 0.02, "{mc} vs {oracle}");
}

#[test]
fn dice_conventions() {
    let m = [true, false, true, true];
    let not: Vec<bool> = m.iter().map(|b| !b).collect();
    assert_eq!(dice(&m, &m).unwrap(), 1.0);
    assert_eq!(dice(&m, &not).unwrap(), 0.0);
    assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
    assert_eq!(
        dice(&[true, true, false, false], &[true, false, false, false]).unwrap(),
        2.0 / 3.0
    );
    assert!(dice(&m, &[true]).is_err());
}

#[test]
fn locality_and_dilation() {
    let mut mask = vec![false; 100];
    mask[55] = true;
    let diff: Vec<f64> = (0..100).map(|i| if i == 55 { 2.0 } else { 0.0 }).collect();
    assert_eq!(locality_score(&diff, &mask, 10, 0).unwrap(), 1.0);
    let grown = dilate(&mask, 10, 3);
    // Lattice points within radius 3 of the center.
    assert_eq!(count(&grown), 29);
    let mut spread = diff.clone();
    spread[0] = 2.0;
    assert_eq!(locality_score(&spread, &mask, 10, 3).unwrap(), 0.5);
    let (out, inside) = outside_inside_means(&spread, &mask, 10, 3).unwrap();
    assert_eq!(out, 2.0 / 71.0);
    assert_eq!(inside, 2.0 / 29.0);
}

#[test]
fn diff_map_sums_channels() {
    let x = Array::<f64>::from_f64(&[1, 2, 1, 2], &[0.0, 1.0, 0.5, 0.5]).unwrap();
    let y = Array::from_f64(&[1, 2, 1, 2], &[1.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(diff_map(&x, &y).unwrap().data(), &[1.5, 0.5]);
}

#[test]
fn psnr_and_mae() {
    assert_eq!(psnr(&[0.5; 4], &[0.5; 4]).unwrap(), f64::INFINITY);
    assert!((psnr(&[0.0; 4], &[0.1; 4]).unwrap() - 20.0).abs() < 1e-12);
    assert!((mae(&[0.1, 0.3], &[0.2, 0.2]).unwrap() - 0.1).abs() < 1e-15);
}

#[test]
fn byte_mapping_rounds_half_up() {
    assert_eq!(to_u8(0.0), 0);
    assert_eq!(to_u8(1.0), 255);
    assert_eq!(to_u8(0.5), 128);
    assert_eq!(to_u8(1.5 / 255.0), 2);
    assert_eq!(to_u8(-3.0), 0);
    assert_eq!(to_u8(7.0), 255);
}

#[test]
fn export_round_trip() {
    let cfg = SceneConfig::default();
    let ds = gen_dataset(12, 21, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_dataset(&ds, dir.path()).unwrap();
    assert_eq!(files.len(), 2 * 12 + 1);
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 12);
    assert_eq!(back.size, 32);
    for (i, s) in ds.scenes.iter().enumerate() {
        assert_eq!(back.masks[i], s.mask);
        assert_eq!(back.rows[i].ratio, s.ratio);
        assert_eq!(back.rows[i].healthy, s.is_healthy());
        assert_eq!(back.rows[i].seed, ds.seeds[i]);
        let err = back.images[i]
            .iter()
            .zip(&s.image)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 0.5 / 255.0 + 1e-12);
        assert_eq!(foreground_of(&back.images[i], &cfg), s.foreground);
    }
}
