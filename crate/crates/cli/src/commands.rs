//! Flag definitions and the body of every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gddm::diffnum::{Array, DType, Scalar};
use gddm::diffusion::{save_checkpoint, DiffusionError, NoiseSchedule};
use gddm::networks::{EpsilonModel, RegModel, SegModel};
use gddm::sampler::{translate, GuidanceSpec, RegressionMode, SamplerConfig, TaskModel, TraceStep};
use gddm::synthlab::{
    export_dataset, foreground_of, gen_dataset, load_dataset, measure_ratio, psnr, read_mask_png,
    read_png, write_png,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::evaluate::{evaluate, Models};
use crate::exit::usage;
use crate::manifest::{Recorder, FILE_NAME};
use crate::models::{
    self, kind_of, load_epsilon, load_regressor, load_segmenter, precision_override, stored_dtype,
};
use crate::recipe::{Kind, Recipe};
use crate::verify::{require_all, run_suites, Level};

#[derive(Debug, Parser)]
#[command(
    name = "gddm",
    version,
    about = "Gradient-guided diffusion translation on synthetic disk scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a noise predictor, regressor or segmenter.
    Train(TrainArgs),
    /// Encode an image, then decode it with optional guidance.
    Translate(TranslateArgs),
    /// Score trained models on a dataset.
    Evaluate(EvaluateArgs),
    /// Run the built-in verification suites.
    Verify(VerifyArgs),
    /// Print the resolved recipe as TOML.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub healthy_frac: Option<f64>,
    #[arg(long)]
    pub size: Option<usize>,
    /// Recipe whose `[scene]` table sets the remaining scene parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the recipe's iteration count.
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Overrides the recipe's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceKind {
    None,
    Regression,
    Segmentation,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Noise-predictor checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub task_model: Option<PathBuf>,
    /// One or more grayscale PNGs; each runs as an independent pipeline.
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = GuidanceKind::None)]
    pub guidance: GuidanceKind,
    /// Desired regression value `i`.
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<f64>,
    /// Requested segmentation mask, binarized at 0.5.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Fixed regression scale `s_t`, +1 or -1.
    #[arg(long, allow_hyphen_values = true)]
    pub sign: Option<f64>,
    /// Noise level; defaults to 0.4 T.
    #[arg(long = "L")]
    pub noise_level: Option<usize>,
    /// Constant gradient scale; defaults to the recipe's value.
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a per-step CSV of `R` or `H`, `s_t` and gradient norms.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Regression and/or segmentation checkpoints used for guidance.
    #[arg(long)]
    pub task_model: Vec<PathBuf>,
    /// Separately trained segmenter that scores inpainting.
    #[arg(long)]
    pub judge: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Level::Fast)]
    pub level: Level,
    /// Checkpoints that must load with intact contents.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Translate(a) => translate_cmd(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Verify(a) => verify(&a),
        Command::Config(a) => {
            print!(
                "{}",
                Recipe::load_or_default(a.config.as_deref())?.to_toml()?
            );
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mut recipe = Recipe::load_or_default(a.config.as_deref())?;
    if let Some(f) = a.healthy_frac {
        if !(0.0..=1.0).contains(&f) {
            return Err(usage(format!("--healthy-frac {f} outside [0, 1]")));
        }
        recipe.scene.healthy_fraction = f;
    }
    if let Some(s) = a.size {
        recipe.scene.size = s;
    }
    recipe.scene.validate().map_err(|e| usage(e.to_string()))?;

    let mut rec = Recorder::new("gen-data");
    rec.config(&recipe.scene)?;
    rec.seeds(json!({ "dataset": a.seed }));
    let ds = gen_dataset(a.n, a.seed, &recipe.scene)?;
    create_dir(&a.out)?;
    let files = export_dataset(&ds, &a.out)?;
    for f in &files {
        rec.output(f)?;
    }
    let healthy = ds.scenes.iter().filter(|s| s.is_healthy()).count();
    rec.metrics(json!({ "scenes": a.n, "healthy": healthy }));
    rec.finish(&a.out.join(FILE_NAME))?;
    println!(
        "wrote {} scenes ({healthy} healthy) to {}",
        a.n,
        a.out.display()
    );
    Ok(())
}

fn check_dataset_dir(dir: &Path) -> Result<()> {
    ensure!(
        dir.is_dir(),
        "dataset directory {} does not exist",
        dir.display()
    );
    ensure!(
        dir.join("labels.csv").is_file(),
        "{} has no labels.csv; is it a gen-data output?",
        dir.display()
    );
    Ok(())
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["iteration", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:e}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let recipe = Recipe::load_or_default(a.config.as_deref())?;
    check_dataset_dir(&a.data)?;
    let mut cfg = recipe.train_config(a.kind).clone();
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = precision_override()? {
        cfg.precision = p;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = load_dataset(&a.data)?;
    ensure!(!data.is_empty(), "dataset {} is empty", a.data.display());
    let mut net = recipe.network.clone();
    net.image_size = data.size;
    create_dir(&a.out)?;

    let mut rec = Recorder::new("train");
    rec.config(
        &json!({ "kind": a.kind, "schedule": recipe.schedule, "network": net, "train": cfg }),
    )?;
    rec.seeds(json!({ "train": cfg.seed }));
    let periodic = |c: &gddm::diffusion::Checkpoint| -> Result<(), DiffusionError> {
        save_checkpoint(c, a.out.join(format!("checkpoint-{:06}.ckpt", c.iteration)))?;
        Ok(())
    };
    let result = match cfg.precision {
        DType::F32 => models::train::<f32>(
            a.kind,
            &net,
            recipe.schedule,
            &cfg,
            &models::train_set(&data, a.kind),
            periodic,
        ),
        DType::F64 => models::train::<f64>(
            a.kind,
            &net,
            recipe.schedule,
            &cfg,
            &models::train_set(&data, a.kind),
            periodic,
        ),
    };
    let trained = match result {
        Ok(t) => t,
        Err(DiffusionError::Diverged {
            iteration,
            loss,
            last_good,
        }) => {
            let p = a.out.join("last_good.ckpt");
            save_checkpoint(&last_good, &p)?;
            rec.output(&p)?;
            rec.metrics(json!({ "diverged_at": iteration, "loss": loss, "last_good_iteration": last_good.iteration }));
            rec.finish(&a.out.join(FILE_NAME))?;
            return Err(DiffusionError::Diverged {
                iteration,
                loss,
                last_good,
            })
            .context(format!(
                "training stopped; last good state saved to {}",
                p.display()
            ));
        }
        Err(e) => return Err(e.into()),
    };
    let report = &trained.report;
    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&report.checkpoint, &ckpt)?;
    let loss_csv = a.out.join("loss.csv");
    write_loss_csv(&loss_csv, &report.losses)?;
    let mut periodic: Vec<PathBuf> = fs::read_dir(&a.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint-"))
        })
        .collect();
    periodic.sort();
    for p in periodic.iter().chain([&ckpt, &loss_csv]) {
        rec.output(p)?;
    }
    rec.metrics(json!({
        "initial_probe": report.initial_probe(),
        "final_probe": report.final_probe(),
        "probe": report.probe,
        "final_loss": report.losses.last(),
    }));
    rec.finish(&a.out.join(FILE_NAME))?;
    println!(
        "{} network trained for {} iterations; probe loss {:.5} -> {:.5}; saved {}",
        a.kind.name(),
        cfg.iterations,
        report.initial_probe(),
        report.final_probe(),
        ckpt.display()
    );
    Ok(())
}

/// Flags of `translate` resolved against the recipe.
struct Request {
    guidance: GuidanceKind,
    target: Option<f64>,
    sign: Option<f64>,
    mask: Option<(Vec<bool>, usize)>,
    scale: f64,
}

fn resolve_request(a: &TranslateArgs, recipe: &Recipe) -> Result<Request> {
    let g = &recipe.guidance;
    let (scale, mask) = match a.guidance {
        GuidanceKind::None => {
            if a.target.is_some() || a.sign.is_some() || a.mask.is_some() {
                return Err(usage(
                    "--target, --sign and --mask need --guidance regression or segmentation",
                ));
            }
            (0.0, None)
        }
        GuidanceKind::Regression => {
            if a.mask.is_some() {
                return Err(usage("--mask belongs to segmentation guidance"));
            }
            match (a.target, a.sign) {
                (Some(_), Some(_)) => {
                    return Err(usage("give either --target or --sign, not both"))
                }
                (None, None) => return Err(usage("regression guidance needs --target or --sign")),
                (None, Some(s)) if s != 1.0 && s != -1.0 => {
                    return Err(usage(format!("--sign must be 1 or -1, got {s}")))
                }
                (None, Some(_)) => (a.c.unwrap_or(g.fixed_sign_scale), None),
                (Some(t), None) => {
                    let (lo, hi) = recipe.label_range();
                    if t < lo || t > hi {
                        eprintln!("warning: target {t} lies outside the label range [{lo}, {hi}]");
                    }
                    (a.c.unwrap_or(g.regression_scale), None)
                }
            }
        }
        GuidanceKind::Segmentation => {
            if a.target.is_some() || a.sign.is_some() {
                return Err(usage("--target and --sign belong to regression guidance"));
            }
            let path = a
                .mask
                .as_ref()
                .ok_or_else(|| usage("segmentation guidance needs --mask"))?;
            (
                a.c.unwrap_or(g.segmentation_scale),
                Some(read_mask_png(path)?),
            )
        }
    };
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(usage(format!("--c {scale} must be a non-negative number")));
    }
    if a.guidance != GuidanceKind::None && a.task_model.is_none() {
        return Err(usage("guided translation needs --task-model"));
    }
    Ok(Request {
        guidance: a.guidance,
        target: a.target,
        sign: a.sign,
        mask,
        scale,
    })
}

/// One finished input.
struct Outcome {
    input: PathBuf,
    files: Vec<PathBuf>,
    psnr: f64,
    input_ratio: f64,
    output_ratio: f64,
    trace_len: usize,
}

enum Task<F> {
    None,
    Regression(RegModel<F>),
    Segmentation(SegModel<F>),
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string()
}

fn write_trace(path: &Path, trace: &[TraceStep]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["t", "value", "scale", "grad_norm"])?;
    for s in trace {
        let v = |x: &[f64]| x.first().map_or(String::new(), |v| format!("{v:e}"));
        w.write_record([s.t.to_string(), v(&s.value), v(&s.scale), v(&s.grad_norm)])?;
    }
    w.flush()?;
    Ok(())
}

/// Input, output and difference map side by side.
fn grid(x: &[f64], y: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * size * size];
    for r in 0..size {
        for c in 0..size {
            let i = r * size + c;
            let row = r * 3 * size;
            out[row + c] = x[i];
            out[row + size + c] = y[i].clamp(0.0, 1.0);
            out[row + 2 * size + c] = (y[i].clamp(0.0, 1.0) - x[i]).abs();
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn translate_one<F: Scalar>(
    eps: &EpsilonModel<F>,
    sched: &NoiseSchedule,
    task: &Task<F>,
    req: &Request,
    cfg: &SamplerConfig,
    recipe: &Recipe,
    input: &Path,
    out_dir: &Path,
    trace: bool,
) -> Result<Outcome> {
    let size = eps.config().image_size;
    let (x, w) = read_png(input)?;
    ensure!(
        w == size && x.len() == size * size,
        "{}: expected a {size}x{size} image, the network's input size",
        input.display()
    );
    let xa = Array::from_fn(&[1, 1, size, size], |i| F::from_f64(x[i]));
    let guidance = match (req.guidance, &req.mask) {
        (GuidanceKind::None, _) => GuidanceSpec::None,
        (GuidanceKind::Regression, _) => GuidanceSpec::Regression {
            target: req.target.unwrap_or(0.0),
            scale: req.scale,
            mode: req
                .sign
                .map_or(RegressionMode::Adaptive, RegressionMode::FixedSign),
        },
        (GuidanceKind::Segmentation, Some((m, mw))) => {
            ensure!(
                *mw == size && m.len() == size * size,
                "mask must be {size}x{size}"
            );
            GuidanceSpec::Segmentation {
                mask: Array::from_fn(
                    &[1, 1, size, size],
                    |i| if m[i] { F::one() } else { F::zero() },
                ),
                scale: req.scale,
            }
        }
        (GuidanceKind::Segmentation, None) => unreachable!("resolved requests carry a mask"),
    };
    let task_model = match task {
        Task::None => None,
        Task::Regression(r) => Some(TaskModel::Regression(r)),
        Task::Segmentation(s) => Some(TaskModel::Segmentation(s)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let res = translate(eps, task_model, &xa, &guidance, cfg, sched, trace, &mut rng)?;
    let y = res.output.to_f64_vec();
    let yc: Vec<f64> = y.iter().map(|v| v.clamp(0.0, 1.0)).collect();

    let name = stem(input);
    let out_png = out_dir.join(format!("{name}.png"));
    write_png(&out_png, &yc, size)?;
    let grid_png = out_dir.join(format!("{name}_grid.png"));
    write_png(&grid_png, &grid(&x, &y, size), 3 * size)?;
    let mut files = vec![out_png, grid_png];
    let mut trace_len = 0;
    if let Some(t) = &res.trace {
        let p = out_dir.join(format!("{name}_trace.csv"));
        write_trace(&p, t)?;
        files.push(p);
        trace_len = t.len();
    }
    let fg = foreground_of(&x, &recipe.scene);
    let th = recipe.scene.disk_threshold();
    Ok(Outcome {
        input: input.to_path_buf(),
        files,
        psnr: psnr(&x, &yc)?,
        input_ratio: measure_ratio(&x, &fg, th),
        output_ratio: measure_ratio(&yc, &fg, th),
        trace_len,
    })
}

fn translate_typed<F: Scalar>(
    a: &TranslateArgs,
    recipe: &Recipe,
    req: &Request,
    rec: &mut Recorder,
) -> Result<Vec<Outcome>> {
    let (eps, sched) = load_epsilon::<F>(&a.model)?;
    let task = match (req.guidance, &a.task_model) {
        (GuidanceKind::None, _) => Task::None,
        (g, Some(p)) => {
            let kind = kind_of(p)?;
            match (g, kind) {
                (GuidanceKind::Regression, Kind::Regression) => {
                    Task::Regression(load_regressor::<F>(p)?.model)
                }
                (GuidanceKind::Segmentation, Kind::Segmentation) => {
                    Task::Segmentation(load_segmenter::<F>(p)?.model)
                }
                _ => {
                    return Err(usage(format!(
                        "{} guidance cannot use the {} network in {}",
                        if g == GuidanceKind::Regression {
                            "regression"
                        } else {
                            "segmentation"
                        },
                        kind.name(),
                        p.display()
                    )))
                }
            }
        }
        (_, None) => unreachable!("resolve_request demands a task model"),
    };
    if let Task::Regression(r) = &task {
        ensure!(
            r.config().image_size == eps.model.config().image_size,
            "task network input size differs"
        );
    } else if let Task::Segmentation(s) = &task {
        ensure!(
            s.config().image_size == eps.model.config().image_size,
            "task network input size differs"
        );
    }
    let cfg = SamplerConfig {
        stride: a.stride.unwrap_or(recipe.sampler.stride),
        ..SamplerConfig::deterministic(
            a.noise_level
                .unwrap_or_else(|| recipe.noise_level(sched.steps())),
        )
    };
    cfg.validate(&sched)?;
    rec.config(&json!({
        "guidance": format!("{:?}", req.guidance).to_lowercase(),
        "target": req.target,
        "sign": req.sign,
        "c": req.scale,
        "noise_level": cfg.noise_level,
        "stride": cfg.stride,
        "precision": F::DTYPE,
        "schedule": sched.spec(),
        "scene": recipe.scene,
    }))?;

    let threads = models::thread_count().min(a.input.len()).max(1);
    let mut outcomes: Vec<Option<Result<Outcome>>> = (0..a.input.len()).map(|_| None).collect();
    for (chunk_no, chunk) in a.input.chunks(threads).enumerate() {
        let results: Vec<Result<Outcome>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|p| {
                    let (eps, sched, task, cfg) = (&eps.model, &sched, &task, &cfg);
                    s.spawn(move || {
                        translate_one(eps, sched, task, req, cfg, recipe, p, &a.out, a.trace)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| bail!("translation worker panicked"))
                })
                .collect()
        });
        for (k, r) in results.into_iter().enumerate() {
            outcomes[chunk_no * threads + k] = Some(r);
        }
    }
    outcomes
        .into_iter()
        .map(|o| o.expect("every input ran"))
        .collect()
}

pub fn translate_cmd(a: &TranslateArgs) -> Result<()> {
    let recipe = Recipe::load_or_default(a.config.as_deref())?;
    let req = resolve_request(a, &recipe)?;
    create_dir(&a.out)?;
    let mut rec = Recorder::new("translate");
    rec.input(&a.model)?;
    if let Some(t) = &a.task_model {
        rec.input(t)?;
    }
    let ckpt = gddm::diffusion::load_checkpoint(&a.model)
        .with_context(|| format!("loading {}", a.model.display()))?;
    let precision = precision_override()?.unwrap_or_else(|| stored_dtype(&ckpt));
    let outcomes = match precision {
        DType::F32 => translate_typed::<f32>(a, &recipe, &req, &mut rec)?,
        DType::F64 => translate_typed::<f64>(a, &recipe, &req, &mut rec)?,
    };
    rec.seeds(json!({ "sampler": 0 }));
    let mut per = Vec::new();
    for o in &outcomes {
        for f in &o.files {
            rec.output(f)?;
        }
        println!(
            "{} -> {}: PSNR {:.2} dB, ratio {:.3} -> {:.3}",
            o.input.display(),
            o.files[0].display(),
            o.psnr,
            o.input_ratio,
            o.output_ratio
        );
        per.push(json!({
            "input": o.input,
            "output": o.files[0],
            "psnr": o.psnr,
            "input_ratio": o.input_ratio,
            "output_ratio": o.output_ratio,
            "trace_steps": o.trace_len,
        }));
    }
    rec.metrics(json!({ "inputs": per }));
    rec.finish(&a.out.join(FILE_NAME))
}

fn evaluate_typed<F: Scalar>(a: &EvaluateArgs, recipe: &Recipe) -> Result<serde_json::Value> {
    let (eps, sched) = load_epsilon::<F>(&a.model)?;
    let mut reg = None;
    let mut seg = None;
    for p in &a.task_model {
        match kind_of(p)? {
            Kind::Regression if reg.is_none() => reg = Some(load_regressor::<F>(p)?.model),
            Kind::Segmentation if seg.is_none() => seg = Some(load_segmenter::<F>(p)?.model),
            Kind::Epsilon => {
                return Err(usage(format!(
                    "{} is a noise predictor, not a task model",
                    p.display()
                )))
            }
            k => {
                return Err(usage(format!(
                    "more than one {} task model given",
                    k.name()
                )))
            }
        }
    }
    let judge = a
        .judge
        .as_deref()
        .map(load_segmenter::<F>)
        .transpose()?
        .map(|l| l.model);
    let data = load_dataset(&a.data)?;
    let models = Models {
        epsilon: &eps.model,
        schedule: &sched,
        regressor: reg.as_ref(),
        segmenter: seg.as_ref(),
        judge: judge.as_ref(),
    };
    let report = evaluate(&models, &data, recipe)?;
    print_report(&report);
    Ok(serde_json::to_value(report)?)
}

fn print_report(r: &crate::evaluate::EvalReport) {
    let rt = &r.round_trip;
    println!(
        "round trip: {} scenes, PSNR {:.2} dB (shuffled {:.2} dB)",
        rt.n, rt.psnr_mean, rt.psnr_shuffled_mean
    );
    if let Some(s) = &r.regression {
        println!("regression sweep (c = {}), {} scenes:", s.scale, s.n);
        println!("  target  achieved  mae");
        for row in &s.table {
            println!(
                "  {:<6}  {:<8.4}  {:.4}",
                row.target, row.achieved_mean, row.mae
            );
        }
        println!(
            "  MAE {:.4}, monotone {:.0}%",
            s.mae,
            100.0 * s.monotone_fraction
        );
    }
    if let Some(f) = &r.fixed_sign {
        println!(
            "fixed sign (c = {}): +1 raised {:.0}%, -1 lowered {:.0}%",
            f.scale,
            100.0 * f.plus_fraction,
            100.0 * f.minus_fraction
        );
    }
    if let Some(l) = &r.locality {
        println!(
            "locality: outside/inside {:.3}, score {:.3}",
            l.outside_over_inside, l.locality_score
        );
    }
    if let Some(s) = &r.segmentation {
        println!(
            "inpainting (c = {}): Dice {:.3} (input {:.3}), inside share {:.3}",
            s.scale, s.dice_mean, s.input_dice_mean, s.inside_fraction_mean
        );
    }
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let recipe = Recipe::load_or_default(a.config.as_deref())?;
    check_dataset_dir(&a.data)?;
    let mut rec = Recorder::new("evaluate");
    rec.config(&recipe)?;
    rec.input(&a.model)?;
    for p in a.task_model.iter().chain(a.judge.iter()) {
        rec.input(p)?;
    }
    let ckpt = gddm::diffusion::load_checkpoint(&a.model)
        .with_context(|| format!("loading {}", a.model.display()))?;
    let report = match precision_override()?.unwrap_or_else(|| stored_dtype(&ckpt)) {
        DType::F32 => evaluate_typed::<f32>(a, &recipe)?,
        DType::F64 => evaluate_typed::<f64>(a, &recipe)?,
    };
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", a.report.display()))?;
    rec.output(&a.report)?;
    rec.seeds(json!({
        "mask": recipe.evaluation.mask_seed,
        "shuffle": recipe.evaluation.shuffle_seed,
    }));
    rec.metrics(report);
    let mut manifest = a.report.clone().into_os_string();
    manifest.push(".manifest.json");
    rec.finish(Path::new(&manifest))
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let results = run_suites(a.level, &a.checkpoint);
    for r in &results {
        println!(
            "{:<20} {}  {:>7.2}s  {}",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.detail
        );
    }
    let passed = results.iter().filter(|r| r.passed).count();
    println!("{passed}/{} suites passed", results.len());
    require_all(&results)
}
