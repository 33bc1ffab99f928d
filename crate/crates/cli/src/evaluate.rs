//! The desk evaluation protocol over a dataset directory.

use anyhow::{bail, ensure, Result};
use gddm::diffnum::{Array, Scalar};
use gddm::diffusion::NoiseSchedule;
use gddm::networks::{EpsilonModel, RegModel, SegModel};
use gddm::sampler::{decode, encode, GuidanceSpec, RegressionMode, SamplerConfig, TaskModel};
use gddm::synthlab::{
    dice, foreground_of, locality_score, measure_ratio, psnr, random_disk_mask_in, LoadedDataset,
    SceneConfig, LOCALITY_DILATION,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::recipe::Recipe;

pub struct Models<'a, F> {
    pub epsilon: &'a EpsilonModel<F>,
    pub schedule: &'a NoiseSchedule,
    pub regressor: Option<&'a RegModel<F>>,
    pub segmenter: Option<&'a SegModel<F>>,
    /// Scores inpainting; should not be the guiding segmenter.
    pub judge: Option<&'a SegModel<F>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundTrip {
    pub n: usize,
    pub psnr: Vec<f64>,
    pub psnr_mean: f64,
    /// Output of scene `i` scored against input `i + k`, a fixed shift.
    pub psnr_shuffled_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetRow {
    pub target: f64,
    pub achieved_mean: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionSweep {
    pub n: usize,
    pub scale: f64,
    pub input_ratio: Vec<f64>,
    pub targets: Vec<f64>,
    /// `achieved[k][j]`: measured ratio of scene `j` translated to target `k`.
    pub achieved: Vec<Vec<f64>>,
    pub table: Vec<TargetRow>,
    pub mae: f64,
    /// Scenes whose achieved ratios are non-decreasing in the target.
    pub monotone_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedSign {
    pub scale: f64,
    pub input_ratio: Vec<f64>,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
    /// Scenes whose ratio rose under `s_t = +1`.
    pub plus_fraction: f64,
    /// Scenes whose ratio fell under `s_t = -1`.
    pub minus_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Locality {
    pub dilation: usize,
    /// Pooled mean absolute difference outside the change region.
    pub outside_mean: f64,
    pub inside_mean: f64,
    pub outside_over_inside: f64,
    /// Pooled share of absolute difference inside the change region.
    pub locality_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Inpainting {
    pub n: usize,
    pub scale: f64,
    pub dice: Vec<f64>,
    pub dice_mean: f64,
    /// Dice of the unedited inputs, for reference.
    pub input_dice_mean: f64,
    pub inside_fraction: Vec<f64>,
    pub inside_fraction_mean: f64,
    /// False when the guiding segmenter also scored the outputs.
    pub held_out_judge: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub noise_level: usize,
    pub stride: usize,
    pub round_trip: RoundTrip,
    pub regression: Option<RegressionSweep>,
    pub fixed_sign: Option<FixedSign>,
    pub locality: Option<Locality>,
    pub segmentation: Option<Inpainting>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn clamp01(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect()
}

struct Ctx<'a, F> {
    models: &'a Models<'a, F>,
    cfg: SamplerConfig,
    batch: usize,
    size: usize,
}

impl<F: Scalar> Ctx<'_, F> {
    fn stack(&self, images: &[&Vec<f64>]) -> Array<F> {
        let s = self.size;
        let items: Vec<Array<F>> = images
            .iter()
            .map(|im| Array::from_fn(&[1, 1, s, s], |i| F::from_f64(im[i])))
            .collect();
        Array::stack_batch(&items).expect("scenes share one size")
    }

    fn encode_all(&self, images: &[&Vec<f64>]) -> Result<Vec<Array<F>>> {
        images
            .chunks(self.batch)
            .map(|c| {
                Ok(encode(
                    self.models.epsilon,
                    &self.stack(c),
                    &self.cfg,
                    self.models.schedule,
                )?)
            })
            .collect()
    }

    /// Decodes every encoded chunk; `guidance(chunk_start, chunk_len)`
    /// supplies the request. Returns clamped per-scene outputs.
    fn decode_all(
        &self,
        latents: &[Array<F>],
        task: Option<TaskModel<'_, F>>,
        guidance: impl Fn(usize, usize) -> GuidanceSpec<F>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, x_l) in latents.iter().enumerate() {
            let n = x_l.shape()[0];
            let g = guidance(k * self.batch, n);
            let y = decode(
                self.models.epsilon,
                x_l,
                &self.cfg,
                self.models.schedule,
                &g,
                task,
                false,
                &mut rng,
            )?;
            for j in 0..n {
                out.push(clamp01(y.output.batch_item(j)?.to_f64_vec()));
            }
        }
        Ok(out)
    }
}

fn round_trip<F: Scalar>(
    ctx: &Ctx<'_, F>,
    images: &[&Vec<f64>],
    shift_seed: u64,
) -> Result<RoundTrip> {
    let n = images.len();
    let latents = ctx.encode_all(images)?;
    let outs = ctx.decode_all(&latents, None, |_, _| GuidanceSpec::None)?;
    let scores: Vec<f64> = outs
        .iter()
        .zip(images)
        .map(|(y, x)| psnr(x, y))
        .collect::<Result<_, _>>()?;
    let shifted = if n > 1 {
        let k = ChaCha8Rng::seed_from_u64(shift_seed).random_range(1..n);
        let s: Vec<f64> = (0..n)
            .map(|i| psnr(images[(i + k) % n], &outs[i]))
            .collect::<Result<_, _>>()?;
        mean(&s)
    } else {
        f64::NAN
    };
    Ok(RoundTrip {
        n,
        psnr_mean: mean(&scores),
        psnr: scores,
        psnr_shuffled_mean: shifted,
    })
}

/// Bright foreground pixels of an output, i.e. the disk it shows.
fn measured_disk(y: &[f64], fg: &[bool], threshold: f64) -> Vec<bool> {
    y.iter()
        .zip(fg)
        .map(|(&v, &f)| f && v >= threshold)
        .collect()
}

struct Pool {
    inside: f64,
    n_inside: usize,
    outside: f64,
    n_outside: usize,
}

impl Pool {
    fn add(&mut self, diff: &[f64], region: &[bool]) {
        for (&d, &r) in diff.iter().zip(region) {
            if r {
                self.inside += d;
                self.n_inside += 1;
            } else {
                self.outside += d;
                self.n_outside += 1;
            }
        }
    }

    fn finish(&self) -> Locality {
        let om = self.outside / self.n_outside.max(1) as f64;
        let im = self.inside / self.n_inside.max(1) as f64;
        let total = self.inside + self.outside;
        Locality {
            dilation: LOCALITY_DILATION,
            outside_mean: om,
            inside_mean: im,
            outside_over_inside: if im > 0.0 { om / im } else { f64::INFINITY },
            locality_score: if total > 0.0 {
                self.inside / total
            } else {
                1.0
            },
        }
    }
}

fn sweep<F: Scalar>(
    ctx: &Ctx<'_, F>,
    reg: &RegModel<F>,
    recipe: &Recipe,
    images: &[&Vec<f64>],
    masks: &[&Vec<bool>],
) -> Result<(RegressionSweep, FixedSign, Locality)> {
    let scene = &recipe.scene;
    let threshold = scene.disk_threshold();
    let fgs: Vec<Vec<bool>> = images.iter().map(|x| foreground_of(x, scene)).collect();
    let input_ratio: Vec<f64> = images
        .iter()
        .zip(&fgs)
        .map(|(x, f)| measure_ratio(x, f, threshold))
        .collect();
    let latents = ctx.encode_all(images)?;
    let task = Some(TaskModel::Regression(reg));
    let width = scene.size;
    let mut pool = Pool {
        inside: 0.0,
        n_inside: 0,
        outside: 0.0,
        n_outside: 0,
    };

    let targets = recipe.evaluation.targets.clone();
    let scale = recipe.guidance.regression_scale;
    let mut achieved = Vec::new();
    for &target in &targets {
        let outs = ctx.decode_all(&latents, task, |_, _| GuidanceSpec::Regression {
            target,
            scale,
            mode: RegressionMode::Adaptive,
        })?;
        let mut row = Vec::new();
        for (j, y) in outs.iter().enumerate() {
            row.push(measure_ratio(y, &fgs[j], threshold));
            let diff: Vec<f64> = y
                .iter()
                .zip(images[j].iter())
                .map(|(a, b)| (a - b).abs())
                .collect();
            let change: Vec<bool> = measured_disk(y, &fgs[j], threshold)
                .iter()
                .zip(masks[j].iter())
                .map(|(&a, &b)| a || b)
                .collect();
            pool.add(
                &diff,
                &gddm::synthlab::dilate(&change, width, LOCALITY_DILATION),
            );
        }
        achieved.push(row);
    }
    let n = images.len();
    let table: Vec<TargetRow> = targets
        .iter()
        .zip(&achieved)
        .map(|(&t, row)| TargetRow {
            target: t,
            achieved_mean: mean(row),
            mae: mean(&row.iter().map(|a| (a - t).abs()).collect::<Vec<_>>()),
        })
        .collect();
    let mae = mean(&table.iter().map(|r| r.mae).collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]));
    let monotone = (0..n)
        .filter(|&j| {
            order
                .windows(2)
                .all(|w| achieved[w[0]][j] <= achieved[w[1]][j])
        })
        .count();

    let fixed_scale = recipe.guidance.fixed_sign_scale;
    let mut signed = Vec::new();
    for sign in [1.0, -1.0] {
        let outs = ctx.decode_all(&latents, task, |_, _| GuidanceSpec::Regression {
            target: 0.0,
            scale: fixed_scale,
            mode: RegressionMode::FixedSign(sign),
        })?;
        signed.push(
            outs.iter()
                .zip(&fgs)
                .map(|(y, f)| measure_ratio(y, f, threshold))
                .collect::<Vec<_>>(),
        );
    }
    let minus = signed.pop().expect("two signs");
    let plus = signed.pop().expect("two signs");
    let frac = |v: &[f64], up: bool| {
        v.iter()
            .zip(&input_ratio)
            .filter(|(a, i)| if up { a > i } else { a < i })
            .count() as f64
            / n as f64
    };
    let fixed = FixedSign {
        scale: fixed_scale,
        plus_fraction: frac(&plus, true),
        minus_fraction: frac(&minus, false),
        input_ratio: input_ratio.clone(),
        plus,
        minus,
    };
    let sweep = RegressionSweep {
        n,
        scale,
        input_ratio,
        targets,
        achieved,
        table,
        mae,
        monotone_fraction: monotone as f64 / n as f64,
    };
    Ok((sweep, fixed, pool.finish()))
}

fn binarize<F: Scalar>(probs: &Array<F>) -> Vec<bool> {
    probs.to_f64_vec().into_iter().map(|p| p > 0.5).collect()
}

fn inpainting<F: Scalar>(
    ctx: &Ctx<'_, F>,
    seg: &SegModel<F>,
    judge: &SegModel<F>,
    held_out: bool,
    recipe: &Recipe,
    images: &[&Vec<f64>],
) -> Result<Inpainting> {
    let scene: &SceneConfig = &recipe.scene;
    let n = images.len();
    let size = scene.size;
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.evaluation.mask_seed);
    let masks: Vec<Vec<bool>> = images
        .iter()
        .map(|x| random_disk_mask_in(&mut rng, scene, &foreground_of(x, scene)))
        .collect::<Result<_, _>>()?;
    let mask_arrays: Vec<Array<F>> = masks
        .iter()
        .map(|m| {
            Array::from_fn(
                &[1, 1, size, size],
                |i| if m[i] { F::one() } else { F::zero() },
            )
        })
        .collect();
    let latents = ctx.encode_all(images)?;
    let scale = recipe.guidance.segmentation_scale;
    let outs = ctx.decode_all(
        &latents,
        Some(TaskModel::Segmentation(seg)),
        |start, len| GuidanceSpec::Segmentation {
            mask: Array::stack_batch(&mask_arrays[start..start + len])
                .expect("masks share one size"),
            scale,
        },
    )?;
    let judge_on = |ims: Vec<&Vec<f64>>| -> Result<Vec<Vec<bool>>> {
        let mut all = Vec::new();
        for c in ims.chunks(ctx.batch) {
            let x = ctx.stack(c);
            let p = judge.predict(&x, &vec![1; c.len()])?;
            for j in 0..c.len() {
                all.push(binarize(&p.batch_item(j)?));
            }
        }
        Ok(all)
    };
    let pred_out = judge_on(outs.iter().collect())?;
    let pred_in = judge_on(images.to_vec())?;
    let mut dices = Vec::new();
    let mut input_dices = Vec::new();
    let mut inside = Vec::new();
    for j in 0..n {
        dices.push(dice(&pred_out[j], &masks[j])?);
        input_dices.push(dice(&pred_in[j], &masks[j])?);
        let diff: Vec<f64> = outs[j]
            .iter()
            .zip(images[j].iter())
            .map(|(a, b)| (a - b).abs())
            .collect();
        inside.push(locality_score(&diff, &masks[j], size, LOCALITY_DILATION)?);
    }
    Ok(Inpainting {
        n,
        scale,
        dice_mean: mean(&dices),
        input_dice_mean: mean(&input_dices),
        inside_fraction_mean: mean(&inside),
        dice: dices,
        inside_fraction: inside,
        held_out_judge: held_out,
    })
}

/// Runs every protocol the supplied models allow.
pub fn evaluate<F: Scalar>(
    models: &Models<'_, F>,
    data: &LoadedDataset,
    recipe: &Recipe,
) -> Result<EvalReport> {
    if data.is_empty() {
        bail!("evaluation dataset is empty");
    }
    ensure!(
        data.size == recipe.scene.size,
        "dataset images are {}px, the recipe expects {}px",
        data.size,
        recipe.scene.size
    );
    let ev = &recipe.evaluation;
    let cfg = SamplerConfig {
        stride: recipe.sampler.stride,
        ..SamplerConfig::deterministic(recipe.noise_level(models.schedule.steps()))
    };
    cfg.validate(models.schedule)?;
    let ctx = Ctx {
        models,
        cfg,
        batch: ev.batch.max(1),
        size: data.size,
    };

    let rt_images: Vec<&Vec<f64>> = data.images.iter().take(ev.round_trip_n).collect();
    let round_trip = round_trip(&ctx, &rt_images, ev.shuffle_seed)?;

    let (lo, hi) = ev.mid_range;
    let mid: Vec<usize> = (0..data.len())
        .filter(|&i| data.rows[i].ratio >= lo && data.rows[i].ratio <= hi)
        .take(ev.regression_n)
        .collect();
    let (regression, fixed_sign, locality) = match models.regressor {
        Some(reg) if !mid.is_empty() => {
            let ims: Vec<&Vec<f64>> = mid.iter().map(|&i| &data.images[i]).collect();
            let ms: Vec<&Vec<bool>> = mid.iter().map(|&i| &data.masks[i]).collect();
            let (s, f, l) = sweep(&ctx, reg, recipe, &ims, &ms)?;
            (Some(s), Some(f), Some(l))
        }
        _ => (None, None, None),
    };

    let healthy: Vec<&Vec<f64>> = (0..data.len())
        .filter(|&i| data.rows[i].healthy)
        .take(ev.segmentation_n)
        .map(|i| &data.images[i])
        .collect();
    let segmentation = match models.segmenter {
        Some(seg) if !healthy.is_empty() => {
            let (judge, held_out) = match models.judge {
                Some(j) => (j, true),
                None => (seg, false),
            };
            Some(inpainting(&ctx, seg, judge, held_out, recipe, &healthy)?)
        }
        _ => None,
    };

    Ok(EvalReport {
        noise_level: cfg.noise_level,
        stride: cfg.stride,
        round_trip,
        regression,
        fixed_sign,
        locality,
        segmentation,
    })
}
