//! End-to-end acceptance checks, one line per criterion.
//!
//! The recipe's networks are trained on first run and cached under
//! `target/desk-cache/<fingerprint>`; later runs only evaluate.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use gddm::diffnum::Array;
use gddm::diffusion::{load_checkpoint, Checkpoint};
use gddm::sampler::{translate, GuidanceSpec, RegressionMode, SamplerConfig, TaskModel};
use gddm_cli::desk::{dataset, prepare, DeskModels};
use gddm_cli::evaluate::{evaluate, EvalReport, Models};
use gddm_cli::models::{load_epsilon, load_regressor, load_segmenter};
use gddm_cli::recipe::Recipe;
use gddm_cli::verify::{
    checkpoint_bytes_round_trip, degenerate_guidance, gradient_errors, inversion_error,
    oracle_round_trip_error, translation_is_repeatable,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const INVERSION_LIMIT: f64 = 1e-10;
const GRADIENT_LIMIT: f64 = 1e-4;
const ORACLE_LIMIT: f64 = 0.01;
const PSNR_FLOOR: f64 = 20.0;
const TRAINING_BUDGET_SECONDS: f64 = 3600.0;
const MONOTONE_FLOOR: f64 = 0.9;
const MAE_LIMIT: f64 = 0.05;
const SIGN_FLOOR: f64 = 0.9;
const OUTSIDE_OVER_INSIDE_LIMIT: f64 = 0.25;
const LOCALITY_FLOOR: f64 = 0.6;
const DICE_FLOOR: f64 = 0.5;
const INSIDE_SHARE_FLOOR: f64 = 0.6;

struct Line {
    id: usize,
    passed: bool,
    detail: String,
}

/// Bypasses the harness's capture so the lines land in the test log.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn record(lines: &mut Vec<Line>, id: usize, outcome: Result<(bool, String)>) {
    let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e:#}")));
    emit(&format!(
        "criterion {id}: {} - {detail}",
        if passed { "PASS" } else { "FAIL" }
    ));
    lines.push(Line { id, passed, detail });
}

fn cache_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR"))
        .parent()
        .unwrap()
        .join("desk-cache")
}

fn inversion() -> Result<(bool, String)> {
    let e = inversion_error(100, 1)?;
    Ok((
        e <= INVERSION_LIMIT,
        format!("worst relative error {e:.2e} over 100 triples"),
    ))
}

fn gradients() -> Result<(bool, String)> {
    let errs = gradient_errors(2)?;
    let worst = errs.iter().map(|(_, i, p)| i.max(*p)).fold(0.0, f64::max);
    let names: Vec<&str> = errs.iter().map(|(n, _, _)| *n).collect();
    Ok((
        worst < GRADIENT_LIMIT && errs.len() == 3,
        format!(
            "worst relative error {worst:.2e} across {}",
            names.join(", ")
        ),
    ))
}

fn oracle() -> Result<(bool, String)> {
    let errs: Vec<f64> = [50, 200, 1000]
        .iter()
        .map(|&t| oracle_round_trip_error(t, 3))
        .collect::<Result<_>>()?;
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    Ok((
        errs[2] < ORACLE_LIMIT && decreasing,
        format!(
            "relative error {:.2e} at T=1000; T=50,200,1000 gives {:.2e}, {:.2e}, {:.2e}",
            errs[2], errs[0], errs[1], errs[2]
        ),
    ))
}

/// The synthetic checks plus the same properties on the trained networks.
fn determinism(
    recipe: &Recipe,
    m: &DeskModels,
    data: &gddm::synthlab::LoadedDataset,
) -> Result<(bool, String)> {
    let synthetic = translation_is_repeatable::<f64>()? && translation_is_repeatable::<f32>()?;
    let synthetic_bytes = checkpoint_bytes_round_trip()?;

    let (eps, sched) = load_epsilon::<f32>(&m.epsilon)?;
    let reg = load_regressor::<f32>(&m.regression)?.model;
    let s = data.size;
    let x = Array::from_fn(&[2, 1, s, s], |i| {
        data.images[i / (s * s)][i % (s * s)] as f32
    });
    let cfg = SamplerConfig {
        stride: recipe.sampler.stride,
        ..SamplerConfig::deterministic(recipe.noise_level(sched.steps()))
    };
    let g = GuidanceSpec::Regression {
        target: 0.2,
        scale: recipe.guidance.regression_scale,
        mode: RegressionMode::Adaptive,
    };
    let run = || {
        translate(
            &eps.model,
            Some(TaskModel::Regression(&reg)),
            &x,
            &g,
            &cfg,
            &sched,
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
    };
    let (a, b) = (run()?.output, run()?.output);
    let trained = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits());

    let bytes = fs::read(&m.epsilon)?;
    let back = load_checkpoint(&m.epsilon)?;
    let trained_bytes = back.to_bytes() == bytes && Checkpoint::from_bytes(&bytes)? == back;
    Ok((
        synthetic && synthetic_bytes && trained && trained_bytes,
        format!(
            "random nets: translation {synthetic}, checkpoint bytes {synthetic_bytes}; \
             trained nets: guided translation {trained}, checkpoint bytes {trained_bytes}"
        ),
    ))
}

fn training_seconds(m: &DeskModels) -> Result<f64> {
    let mut total = 0.0;
    for p in [&m.epsilon, &m.regression, &m.segmentation, &m.judge] {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(p.with_extension("json"))?)?;
        total += v["seconds"].as_f64().unwrap_or(f64::NAN);
    }
    Ok(total)
}

fn round_trip(r: &EvalReport, train_seconds: f64) -> Result<(bool, String)> {
    let rt = &r.round_trip;
    Ok((
        rt.n == 50
            && rt.psnr_mean >= PSNR_FLOOR
            && rt.psnr_mean > rt.psnr_shuffled_mean
            && train_seconds <= TRAINING_BUDGET_SECONDS,
        format!(
            "mean PSNR {:.2} dB over {} scenes, {:.2} dB against shuffled inputs; recipe trained in {:.0} s",
            rt.psnr_mean, rt.n, rt.psnr_shuffled_mean, train_seconds
        ),
    ))
}

fn regression(r: &EvalReport) -> Result<(bool, String)> {
    let (Some(s), Some(f)) = (&r.regression, &r.fixed_sign) else {
        anyhow::bail!("no regression results");
    };
    let achieved: Vec<String> = s
        .table
        .iter()
        .map(|t| format!("{}->{:.3}", t.target, t.achieved_mean))
        .collect();
    Ok((
        s.n == 20
            && s.monotone_fraction >= MONOTONE_FLOOR
            && s.mae <= MAE_LIMIT
            && f.plus_fraction >= SIGN_FLOOR
            && f.minus_fraction >= SIGN_FLOOR,
        format!(
            "{} scenes, monotone {:.0}%, MAE {:.4} ({}); fixed sign +1 raised {:.0}%, -1 lowered {:.0}%",
            s.n,
            100.0 * s.monotone_fraction,
            s.mae,
            achieved.join(", "),
            100.0 * f.plus_fraction,
            100.0 * f.minus_fraction
        ),
    ))
}

fn locality(r: &EvalReport) -> Result<(bool, String)> {
    let l = r
        .locality
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("no locality results"))?;
    Ok((
        l.outside_over_inside < OUTSIDE_OVER_INSIDE_LIMIT && l.locality_score >= LOCALITY_FLOOR,
        format!(
            "outside/inside {:.3}, locality score {:.3}, dilation {}",
            l.outside_over_inside, l.locality_score, l.dilation
        ),
    ))
}

fn inpainting(r: &EvalReport) -> Result<(bool, String)> {
    let s = r
        .segmentation
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("no inpainting results"))?;
    Ok((
        s.n == 20 && s.held_out_judge && s.dice_mean >= DICE_FLOOR && s.inside_fraction_mean >= INSIDE_SHARE_FLOOR,
        format!(
            "{} healthy scenes, held-out Dice {:.3} (inputs {:.3}), {:.0}% of change inside the dilated mask",
            s.n,
            s.dice_mean,
            s.input_dice_mean,
            100.0 * s.inside_fraction_mean
        ),
    ))
}

/// The stub check, plus `c = 0` through the trained networks.
fn degenerate(
    recipe: &Recipe,
    m: &DeskModels,
    data: &gddm::synthlab::LoadedDataset,
) -> Result<(bool, String)> {
    let (bitwise, crossed) = degenerate_guidance()?;
    let (eps, sched) = load_epsilon::<f32>(&m.epsilon)?;
    let reg = load_regressor::<f32>(&m.regression)?.model;
    let seg = load_segmenter::<f32>(&m.segmentation)?.model;
    let s = data.size;
    let x = Array::from_fn(&[1, 1, s, s], |i| data.images[0][i] as f32);
    let cfg = SamplerConfig {
        stride: recipe.sampler.stride,
        ..SamplerConfig::deterministic(recipe.noise_level(sched.steps()))
    };
    let run = |task, g: &GuidanceSpec<f32>| -> Result<Vec<u32>> {
        let y = translate(
            &eps.model,
            task,
            &x,
            g,
            &cfg,
            &sched,
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        Ok(y.output.data().iter().map(|v| v.to_bits()).collect())
    };
    let plain = run(None, &GuidanceSpec::None)?;
    let zero_reg = run(
        Some(TaskModel::Regression(&reg)),
        &GuidanceSpec::Regression {
            target: 0.2,
            scale: 0.0,
            mode: RegressionMode::Adaptive,
        },
    )?;
    let zero_seg = run(
        Some(TaskModel::Segmentation(&seg)),
        &GuidanceSpec::Segmentation {
            mask: Array::full(&[1, 1, s, s], 1.0),
            scale: 0.0,
        },
    )?;
    let trained = plain == zero_reg && plain == zero_seg;
    Ok((
        bitwise && crossed && trained,
        format!("c=0 bitwise on the stub {bitwise}, on trained nets {trained}; adaptive s_t changed sign {crossed}"),
    ))
}

#[test]
fn acceptance() {
    let recipe =
        Recipe::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml"))
            .expect("repository recipe loads");
    assert_eq!(
        recipe,
        Recipe::default(),
        "configs/desk.toml must match the built-in recipe"
    );
    let mut lines = Vec::new();
    record(&mut lines, 1, inversion());
    record(&mut lines, 2, gradients());
    record(&mut lines, 3, oracle());

    let models = prepare(&recipe, &cache_root(), &mut |s| emit(s)).expect("recipe training");
    let heldout = dataset(
        &recipe,
        recipe.data.heldout_n,
        recipe.data.heldout_seed,
        &models.dir.join("heldout"),
    )
    .expect("held-out scenes");
    record(&mut lines, 4, determinism(&recipe, &models, &heldout));

    let report = (|| -> Result<EvalReport> {
        let (eps, sched) = load_epsilon::<f32>(&models.epsilon)?;
        let reg = load_regressor::<f32>(&models.regression)?.model;
        let seg = load_segmenter::<f32>(&models.segmentation)?.model;
        let judge = load_segmenter::<f32>(&models.judge)?.model;
        let m = Models {
            epsilon: &eps.model,
            schedule: &sched,
            regressor: Some(&reg),
            segmenter: Some(&seg),
            judge: Some(&judge),
        };
        evaluate(&m, &heldout, &recipe)
    })();
    match report {
        Ok(r) => {
            let seconds = training_seconds(&models).unwrap_or(f64::NAN);
            record(&mut lines, 5, round_trip(&r, seconds));
            record(&mut lines, 6, regression(&r));
            record(&mut lines, 7, locality(&r));
            record(&mut lines, 8, inpainting(&r));
            let _ = fs::write(
                models.dir.join("heldout-report.json"),
                serde_json::to_string_pretty(&r).unwrap_or_default(),
            );
        }
        Err(e) => {
            for id in 5..=8 {
                record(
                    &mut lines,
                    id,
                    Err(anyhow::anyhow!("evaluation failed: {e:#}")),
                );
            }
        }
    }
    record(&mut lines, 9, degenerate(&recipe, &models, &heldout));

    let failed: Vec<String> = lines
        .iter()
        .filter(|l| !l.passed)
        .map(|l| format!("{}: {}", l.id, l.detail))
        .collect();
    emit(&format!(
        "acceptance: {}/{} criteria passed",
        lines.len() - failed.len(),
        lines.len()
    ));
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
