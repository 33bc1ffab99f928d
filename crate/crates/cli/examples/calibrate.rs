//! Sweeps the gradient scales on the calibration scenes, then prints the
//! metrics each choice achieves. The held-out scenes are never touched.
//!
//! cargo run --release -p gddm-cli --example calibrate -- --regression 3e4,1e5

use std::path::PathBuf;

use anyhow::Result;
use clap::Parser;
use gddm_cli::desk::{dataset, prepare};
use gddm_cli::evaluate::{evaluate, Models};
use gddm_cli::models::{load_epsilon, load_regressor, load_segmenter};
use gddm_cli::recipe::Recipe;

#[derive(Parser)]
struct Args {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "target/desk-cache")]
    cache: PathBuf,
    #[arg(long, value_delimiter = ',')]
    regression: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    fixed_sign: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    segmentation: Vec<f64>,
}

fn main() -> Result<()> {
    let a = Args::parse();
    let recipe = Recipe::load_or_default(a.config.as_deref())?;
    let m = prepare(&recipe, &a.cache, &mut |s| eprintln!("{s}"))?;
    let data = dataset(
        &recipe,
        recipe.data.calibration_n,
        recipe.data.calibration_seed,
        &m.dir.join("calibration"),
    )?;
    let (eps, sched) = load_epsilon::<f32>(&m.epsilon)?;
    let reg = load_regressor::<f32>(&m.regression)?.model;
    let seg = load_segmenter::<f32>(&m.segmentation)?.model;
    let judge = load_segmenter::<f32>(&m.judge)?.model;

    let n = a
        .regression
        .len()
        .max(a.fixed_sign.len())
        .max(a.segmentation.len())
        .max(1);
    for k in 0..n {
        let mut r = recipe.clone();
        r.evaluation.round_trip_n = if k == 0 { r.evaluation.round_trip_n } else { 1 };
        let pick = |v: &[f64], d: f64| v.get(k).copied().unwrap_or(d);
        r.guidance.regression_scale = pick(&a.regression, r.guidance.regression_scale);
        r.guidance.fixed_sign_scale = pick(&a.fixed_sign, r.guidance.fixed_sign_scale);
        r.guidance.segmentation_scale = pick(&a.segmentation, r.guidance.segmentation_scale);
        let with_reg = k < a.regression.len() || k < a.fixed_sign.len() || k == 0;
        let with_seg = k < a.segmentation.len() || k == 0;
        let models = Models {
            epsilon: &eps.model,
            schedule: &sched,
            regressor: with_reg.then_some(&reg),
            segmenter: with_seg.then_some(&seg),
            judge: Some(&judge),
        };
        let start = std::time::Instant::now();
        let report = evaluate(&models, &data, &r)?;
        println!(
            "{{\"regression_scale\":{},\"fixed_sign_scale\":{},\"segmentation_scale\":{},\"seconds\":{:.1},\"report\":{}}}",
            r.guidance.regression_scale,
            r.guidance.fixed_sign_scale,
            r.guidance.segmentation_scale,
            start.elapsed().as_secs_f64(),
            serde_json::to_string(&report)?
        );
    }
    Ok(())
}
