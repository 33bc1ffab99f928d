//! Self-checks run by `gddm verify`: algebraic, gradient, oracle,
//! determinism, persistence and degenerate-guidance suites.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use gddm::diffnum::{grad_wrt_input, grad_wrt_params, Array, Scalar};
use gddm::diffusion::{load_checkpoint, Checkpoint, NoiseSchedule, ScheduleKind};
use gddm::networks::{EpsilonModel, Network, NetworkError, RegModel, SegModel, UNetConfig};
use gddm::sampler::{
    ddim_forward_step, ddim_reverse_step, translate, GuidanceSpec, RegressionGuide, RegressionMode,
    SamplerConfig, TaskModel,
};
use gddm::synthlab::GaussianTask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array<f64> {
    Array::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn rel(a: &Array<f64>, b: &Array<f64>) -> f64 {
    a.sub(b).expect("same shapes").norm() / b.norm().max(1e-300)
}

/// Encode-then-decode one step with a shared noise estimate, over random
/// schedules, timesteps and states. Returns the worst relative error.
pub fn inversion_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let kind = if k % 2 == 0 {
            ScheduleKind::Cosine
        } else {
            ScheduleKind::Linear
        };
        let steps = [50, 200, 1000][rng.random_range(0..3)];
        let sched = NoiseSchedule::new(kind, steps)?;
        let t = rng.random_range(0..steps);
        let x = randn(&mut rng, &[1, 1, 4, 4]);
        let eps = randn(&mut rng, &[1, 1, 4, 4]);
        let up = ddim_forward_step(&x, &eps, t, &sched)?;
        let back = ddim_reverse_step(&up, &eps, t + 1, &sched, 0.0, None)?;
        worst = worst.max(rel(&back, &x));
    }
    Ok(worst)
}

fn tiny_config() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        out_channels: 1,
        base_channels: 4,
        channel_mult: vec![1, 2],
        attention: vec![false, true],
        groups: 2,
        image_size: 8,
    }
}

/// Replaces every parameter with a small random draw, so no layer is at
/// its (partly zero) initialization.
fn scramble<N: Network<f64>>(net: &mut N, rng: &mut ChaCha8Rng) {
    for v in net.params_mut().values_mut() {
        for x in v.data_mut() {
            *x = 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn sample_coords(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count.min(len))
        .map(|_| rng.random_range(0..len))
        .collect()
}

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let n = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    d / n.max(1e-12)
}

type Forward<'n> = dyn for<'t> Fn(
        &[gddm::diffnum::Var<'t, f64>],
        gddm::diffnum::Var<'t, f64>,
        &[usize],
    ) -> gddm::diffnum::Result<gddm::diffnum::Var<'t, f64>, NetworkError>
    + 'n;

/// Central-difference check of input and parameter gradients of
/// `sum(w * f(x))` for a fixed random weighting `w`.
fn check_network(
    params: &[Array<f64>],
    forward: &Forward<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let x = randn(rng, &[2, 1, 8, 8]);
    let t = [3usize, 17];
    let probe = {
        let tape = gddm::diffnum::Tape::new();
        let p: Vec<_> = params.iter().map(|a| tape.constant(a.clone())).collect();
        let out = forward(&p, tape.constant(x.clone()), &t)?;
        let shape = out.shape().to_vec();
        randn(rng, &shape)
    };
    let objective = |params: &[Array<f64>], x: &Array<f64>| -> Result<f64> {
        let (v, _) = grad_wrt_params(params, |tape, p| {
            let out = forward(p, tape.constant(x.clone()), &t).map_err(to_diff)?;
            out.mul(tape.constant(probe.clone()))?.sum()
        })?;
        Ok(v)
    };

    let (_, gx) = grad_wrt_input(&x, |tape, xv| {
        let p: Vec<_> = params.iter().map(|a| tape.constant(a.clone())).collect();
        let out = forward(&p, xv, &t).map_err(to_diff)?;
        out.mul(tape.constant(probe.clone()))?.sum()
    })?;
    let h = 1e-5;
    let coords = sample_coords(x.len(), 12, rng);
    let mut fd = Vec::new();
    for &i in &coords {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        fd.push((objective(params, &xp)? - objective(params, &xm)?) / (2.0 * h));
    }
    let an: Vec<f64> = coords.iter().map(|&i| gx.data()[i]).collect();
    let input_err = rel_vec(&an, &fd);

    let (_, gp) = grad_wrt_params(params, |tape, p| {
        let out = forward(p, tape.constant(x.clone()), &t).map_err(to_diff)?;
        out.mul(tape.constant(probe.clone()))?.sum()
    })?;
    let mut an = Vec::new();
    let mut fd = Vec::new();
    for _ in 0..16 {
        let k = rng.random_range(0..params.len());
        let i = rng.random_range(0..params[k].len());
        let mut pp = params.to_vec();
        pp[k].data_mut()[i] += h;
        let mut pm = params.to_vec();
        pm[k].data_mut()[i] -= h;
        fd.push((objective(&pp, &x)? - objective(&pm, &x)?) / (2.0 * h));
        an.push(gp[k].data()[i]);
    }
    Ok((input_err, rel_vec(&an, &fd)))
}

fn to_diff(e: NetworkError) -> gddm::diffnum::DiffError {
    match e {
        NetworkError::Diff(d) => d,
        other => gddm::diffnum::DiffError::InvalidShape {
            op: "network",
            shape: Vec::new(),
            reason: other.to_string(),
        },
    }
}

/// Worst input and parameter gradient errors over all three
/// architectures, in 64-bit on 8x8 inputs.
pub fn gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut eps = EpsilonModel::<f64>::new(tiny_config(), 1)?;
    scramble(&mut eps, &mut rng);
    let (i, p) = check_network(
        eps.params().values(),
        &|p, x, t| eps.forward(p, x, t),
        &mut rng,
    )?;
    out.push(("epsilon", i, p));

    let mut reg = RegModel::<f64>::new(tiny_config(), 2)?;
    scramble(&mut reg, &mut rng);
    let (i, p) = check_network(
        reg.params().values(),
        &|p, x, t| reg.forward(p, x, t),
        &mut rng,
    )?;
    out.push(("regression", i, p));

    let mut seg = SegModel::<f64>::new(tiny_config(), 3)?;
    scramble(&mut seg, &mut rng);
    let (i, p) = check_network(
        seg.params().values(),
        &|p, x, t| seg.forward(p, x, t),
        &mut rng,
    )?;
    out.push(("segmentation", i, p));
    Ok(out)
}

fn gaussian_task(steps: usize) -> Result<GaussianTask> {
    let mean = Array::from_fn(&[1, 1, 4, 4], |i| 0.05 * i as f64 - 0.3);
    Ok(GaussianTask::new(
        mean,
        0.3,
        NoiseSchedule::new(ScheduleKind::Cosine, steps)?,
    )?)
}

/// Relative L2 error of the unguided round trip with the closed-form noise
/// predictor at `L = 0.4 T`.
pub fn oracle_round_trip_error(steps: usize, seed: u64) -> Result<f64> {
    let task = gaussian_task(steps)?;
    let sched = task.schedule.clone();
    let x: Array<f64> = task.sample(64, &mut ChaCha8Rng::seed_from_u64(seed));
    let cfg = SamplerConfig::default_for(&sched);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y = translate(
        &task,
        None,
        &x,
        &GuidanceSpec::None,
        &cfg,
        &sched,
        false,
        &mut rng,
    )?
    .output;
    Ok(rel(&y, &x))
}

/// A tiny random noise predictor, for pipeline-level checks.
fn random_epsilon<F: Scalar>(seed: u64) -> Result<EpsilonModel<F>> {
    let mut m = EpsilonModel::<F>::new(tiny_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in m.params_mut().values_mut() {
        for x in v.data_mut() {
            *x = F::from_f64(0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(m)
}

/// Runs a guided translation twice and compares the outputs bit for bit.
pub fn translation_is_repeatable<F: Scalar>() -> Result<bool> {
    let eps = random_epsilon::<F>(4)?;
    let reg = RegModel::<F>::new(tiny_config(), 5)?;
    let sched = NoiseSchedule::new(ScheduleKind::Cosine, 100)?;
    let x = Array::from_fn(&[2, 1, 8, 8], |i| F::from_f64(((i * 7) % 11) as f64 / 11.0));
    let g = GuidanceSpec::Regression {
        target: 0.2,
        scale: 5.0,
        mode: RegressionMode::Adaptive,
    };
    let run = || {
        translate(
            &eps,
            Some(TaskModel::Regression(&reg)),
            &x,
            &g,
            &SamplerConfig::default_for(&sched),
            &sched,
            false,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
    };
    let (a, b) = (run()?.output, run()?.output);
    Ok(a.to_f64_vec()
        .iter()
        .zip(b.to_f64_vec())
        .all(|(p, q)| p.to_bits() == q.to_bits()))
}

pub fn checkpoint_bytes_round_trip() -> Result<bool> {
    let eps = random_epsilon::<f32>(6)?;
    let sched = NoiseSchedule::new(ScheduleKind::Cosine, 100)?;
    let c = Checkpoint::from_network(&eps, Some(sched.spec()), 7, 8);
    let bytes = c.to_bytes();
    let back = Checkpoint::from_bytes(&bytes)?;
    Ok(back == c && back.to_bytes() == bytes)
}

/// A flipped payload byte must make loading fail.
pub fn tamper_is_detected() -> Result<bool> {
    let eps = random_epsilon::<f32>(9)?;
    let mut bytes = Checkpoint::from_network(&eps, None, 0, 0).to_bytes();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    Ok(Checkpoint::from_bytes(&bytes).is_err())
}

/// `R(x) = mean(x)`: its input gradient is uniform, so guidance shifts the
/// image mean predictably.
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

/// `(c = 0 output equals unguided, adaptive s_t changed sign)`.
pub fn degenerate_guidance() -> Result<(bool, bool)> {
    let task = gaussian_task(100)?;
    let sched = task.schedule.clone();
    let x: Array<f64> = task.sample(1, &mut ChaCha8Rng::seed_from_u64(3));
    let cfg = SamplerConfig::default_for(&sched);
    let run = |g: &GuidanceSpec<f64>, trace: bool| {
        let task_model: Option<TaskModel<'_, f64>> = match g {
            GuidanceSpec::None => None,
            _ => Some(TaskModel::Regression(&MeanRegressor)),
        };
        translate(
            &task,
            task_model,
            &x,
            g,
            &cfg,
            &sched,
            trace,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    };
    let plain = run(&GuidanceSpec::None, false)?.output;
    let zero = run(
        &GuidanceSpec::Regression {
            target: 1.0,
            scale: 0.0,
            mode: RegressionMode::Adaptive,
        },
        false,
    )?
    .output;
    let bitwise = plain
        .data()
        .iter()
        .zip(zero.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let target = x.mean() + 0.5;
    let guided = run(
        &GuidanceSpec::Regression {
            target,
            scale: 5000.0,
            mode: RegressionMode::Adaptive,
        },
        true,
    )?;
    let trace = guided.trace.context("trace requested")?;
    let s: Vec<f64> = trace.iter().map(|st| st.scale[0]).collect();
    let crossed = s.iter().any(|&v| v > 0.0) && s.iter().any(|&v| v < 0.0);
    Ok((bitwise, crossed))
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteResult {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e:#}")),
    };
    SuiteResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs every suite of `level`; `checkpoints` are external files that must
/// load cleanly.
pub fn run_suites(level: Level, checkpoints: &[PathBuf]) -> Vec<SuiteResult> {
    let full = level == Level::Full;
    let mut out = Vec::new();
    out.push(timed("inversion", || {
        let trials = if full { 1000 } else { 100 };
        let e = inversion_error(trials, 1)?;
        Ok((
            e <= 1e-10,
            format!("{trials} triples, worst relative error {e:.2e} (limit 1e-10)"),
        ))
    }));
    out.push(timed("gradients", || {
        let errs = gradient_errors(2)?;
        let worst = errs.iter().map(|(_, i, p)| i.max(*p)).fold(0.0, f64::max);
        let detail = errs
            .iter()
            .map(|(n, i, p)| format!("{n}: input {i:.1e}, params {p:.1e}"))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((worst < 1e-4, detail))
    }));
    out.push(timed("oracle", || {
        let e = oracle_round_trip_error(1000, 3)?;
        let mut ok = e < 0.01;
        let mut detail = format!("T=1000 L=400 relative error {e:.2e} (limit 1e-2)");
        if full {
            let errs: Vec<f64> = [50, 200, 1000]
                .iter()
                .map(|&t| oracle_round_trip_error(t, 3))
                .collect::<Result<_>>()?;
            let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
            ok &= decreasing;
            detail += &format!(
                "; sweep T=50,200,1000: {:.2e}, {:.2e}, {:.2e}{}",
                errs[0],
                errs[1],
                errs[2],
                if decreasing { "" } else { " (not decreasing)" }
            );
        }
        Ok((ok, detail))
    }));
    out.push(timed("determinism", || {
        let f64_ok = translation_is_repeatable::<f64>()?;
        let f32_ok = translation_is_repeatable::<f32>()?;
        let ck = checkpoint_bytes_round_trip()?;
        Ok((
            f64_ok && f32_ok && ck,
            format!("guided translation f64 {f64_ok}, f32 {f32_ok}; checkpoint bytes {ck}"),
        ))
    }));
    out.push(timed("persistence", || {
        let tamper = tamper_is_detected()?;
        let mut ok = tamper;
        let mut detail = format!("tampered payload rejected: {tamper}");
        for p in checkpoints {
            match load_checkpoint(p) {
                Ok(_) => detail += &format!("; {} ok", p.display()),
                Err(e) => {
                    ok = false;
                    detail += &format!("; {}: {e}", p.display());
                }
            }
        }
        Ok((ok, detail))
    }));
    out.push(timed("degenerate-guidance", || {
        let (bitwise, crossed) = degenerate_guidance()?;
        Ok((
            bitwise && crossed,
            format!("c=0 bitwise equal {bitwise}; adaptive sign change {crossed}"),
        ))
    }));
    out
}

/// Fails with the names of failing suites.
pub fn require_all(results: &[SuiteResult]) -> Result<()> {
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.to_string())
        .collect();
    ensure!(failed.is_empty(), crate::exit::VerificationFailed(failed));
    Ok(())
}
