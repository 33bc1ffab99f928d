//! Loading networks from checkpoints and running the recipe's training
//! jobs.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gddm::diffnum::{DType, Scalar};
use gddm::diffusion::{
    ddpm_loss, fit, load_checkpoint, probe_loss, regression_loss, restore_params,
    segmentation_loss, Batch, Checkpoint, DiffusionError, FitReport, NoiseSchedule, ScheduleSpec,
    TrainConfig, TrainSet,
};
use gddm::networks::{EpsilonModel, NetworkSpec, RegModel, SegModel, UNetConfig};
use gddm::synthlab::LoadedDataset;

use crate::recipe::Kind;

/// Precision forced through the environment, if any.
pub const PRECISION_VAR: &str = "GDDM_PRECISION";
/// Worker threads for independent per-input pipelines.
pub const THREADS_VAR: &str = "GDDM_THREADS";

pub fn precision_override() -> Result<Option<DType>> {
    match std::env::var(PRECISION_VAR) {
        Ok(v) => match v.trim() {
            "f32" => Ok(Some(DType::F32)),
            "f64" => Ok(Some(DType::F64)),
            other => Err(crate::exit::usage(format!(
                "{PRECISION_VAR}={other}: expected f32 or f64"
            ))),
        },
        Err(_) => Ok(None),
    }
}

pub fn thread_count() -> usize {
    std::env::var(THREADS_VAR)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// The dtype a checkpoint's parameters were stored in.
pub fn stored_dtype(ckpt: &Checkpoint) -> DType {
    ckpt.params.first().map_or(DType::F32, |t| t.data.dtype())
}

pub struct Loaded<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
}

fn read(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn spec_of(ckpt: &Checkpoint, path: &Path, want: Kind) -> Result<UNetConfig> {
    let spec = ckpt
        .network
        .as_ref()
        .with_context(|| format!("{}: checkpoint records no network", path.display()))?;
    match (spec, want) {
        (NetworkSpec::Epsilon(c), Kind::Epsilon)
        | (NetworkSpec::Regression(c), Kind::Regression)
        | (NetworkSpec::Segmentation(c), Kind::Segmentation) => Ok(c.clone()),
        _ => bail!(
            "{}: holds a {} network, expected {}",
            path.display(),
            spec.kind_name(),
            want.name()
        ),
    }
}

pub fn load_epsilon<F: Scalar>(path: &Path) -> Result<(Loaded<EpsilonModel<F>>, NoiseSchedule)> {
    let ckpt = read(path)?;
    let cfg = spec_of(&ckpt, path, Kind::Epsilon)?;
    let spec = ckpt
        .schedule
        .with_context(|| format!("{}: epsilon checkpoint records no schedule", path.display()))?;
    let mut model = EpsilonModel::new(cfg, 0)?;
    restore_params(&mut model, &ckpt).with_context(|| format!("restoring {}", path.display()))?;
    Ok((
        Loaded {
            model,
            checkpoint: ckpt,
        },
        NoiseSchedule::from_spec(spec)?,
    ))
}

pub fn load_regressor<F: Scalar>(path: &Path) -> Result<Loaded<RegModel<F>>> {
    let ckpt = read(path)?;
    let mut model = RegModel::new(spec_of(&ckpt, path, Kind::Regression)?, 0)?;
    restore_params(&mut model, &ckpt).with_context(|| format!("restoring {}", path.display()))?;
    Ok(Loaded {
        model,
        checkpoint: ckpt,
    })
}

pub fn load_segmenter<F: Scalar>(path: &Path) -> Result<Loaded<SegModel<F>>> {
    let ckpt = read(path)?;
    let mut model = SegModel::new(spec_of(&ckpt, path, Kind::Segmentation)?, 0)?;
    restore_params(&mut model, &ckpt).with_context(|| format!("restoring {}", path.display()))?;
    Ok(Loaded {
        model,
        checkpoint: ckpt,
    })
}

/// The kind of network a checkpoint file holds.
pub fn kind_of(path: &Path) -> Result<Kind> {
    let ckpt = read(path)?;
    match ckpt.network {
        Some(NetworkSpec::Epsilon(_)) => Ok(Kind::Epsilon),
        Some(NetworkSpec::Regression(_)) => Ok(Kind::Regression),
        Some(NetworkSpec::Segmentation(_)) => Ok(Kind::Segmentation),
        None => bail!("{}: checkpoint records no network", path.display()),
    }
}

/// Images plus whatever targets `kind` trains on.
pub fn train_set<F: Scalar>(data: &LoadedDataset, kind: Kind) -> TrainSet<F> {
    let mut set = TrainSet::new(data.images_array());
    match kind {
        Kind::Epsilon => {}
        Kind::Regression => set.labels = Some(data.ratios()),
        Kind::Segmentation => set.masks = Some(data.masks_array()),
    }
    set
}

fn labels(b: &Batch<impl Scalar>) -> Result<&[f64], DiffusionError> {
    b.labels
        .as_deref()
        .ok_or_else(|| DiffusionError::InvalidArgument("regression training needs labels".into()))
}

fn masks<F: Scalar>(b: &Batch<F>) -> Result<&gddm::diffnum::Array<F>, DiffusionError> {
    b.masks
        .as_ref()
        .ok_or_else(|| DiffusionError::InvalidArgument("segmentation training needs masks".into()))
}

/// A finished training job.
pub struct Trained {
    pub report: FitReport,
    pub kind: Kind,
}

/// Trains a fresh network of `kind` from the config's seed.
///
/// `on_checkpoint` sees every periodic checkpoint.
pub fn train<F: Scalar>(
    kind: Kind,
    net: &UNetConfig,
    schedule: ScheduleSpec,
    cfg: &TrainConfig,
    data: &TrainSet<F>,
    on_checkpoint: impl FnMut(&Checkpoint) -> Result<(), DiffusionError>,
) -> Result<Trained, DiffusionError> {
    let sched = NoiseSchedule::from_spec(schedule)?;
    let report = match kind {
        Kind::Epsilon => {
            let mut m = EpsilonModel::new(net.clone(), cfg.seed)?;
            fit(
                &mut m,
                data,
                cfg,
                Some(schedule),
                |m, p, b, r| ddpm_loss(m, p, &b.x0, &sched, r),
                on_checkpoint,
            )?
        }
        Kind::Regression => {
            let mut m = RegModel::new(net.clone(), cfg.seed)?;
            fit(
                &mut m,
                data,
                cfg,
                Some(schedule),
                |m, p, b, r| regression_loss(m, p, &b.x0, labels(b)?, &sched, r),
                on_checkpoint,
            )?
        }
        Kind::Segmentation => {
            let mut m = SegModel::new(net.clone(), cfg.seed)?;
            fit(
                &mut m,
                data,
                cfg,
                Some(schedule),
                |m, p, b, r| segmentation_loss(m, p, &b.x0, masks(b)?, &sched, r),
                on_checkpoint,
            )?
        }
    };
    Ok(Trained { report, kind })
}

/// Recomputes the fixed-probe loss of a saved network on `data`.
pub fn reprobe<F: Scalar>(path: &Path, cfg: &TrainConfig, data: &TrainSet<F>) -> Result<f64> {
    let kind = kind_of(path)?;
    let ckpt = read(path)?;
    let schedule = ckpt
        .schedule
        .with_context(|| format!("{}: checkpoint records no schedule", path.display()))?;
    let sched = NoiseSchedule::from_spec(schedule)?;
    let v = match kind {
        Kind::Epsilon => {
            let m = load_epsilon::<F>(path)?.0.model;
            probe_loss(&m, data, cfg, |m, p, b, r| {
                ddpm_loss(m, p, &b.x0, &sched, r)
            })?
        }
        Kind::Regression => {
            let m = load_regressor::<F>(path)?.model;
            probe_loss(&m, data, cfg, |m, p, b, r| {
                regression_loss(m, p, &b.x0, labels(b)?, &sched, r)
            })?
        }
        Kind::Segmentation => {
            let m = load_segmenter::<F>(path)?.model;
            probe_loss(&m, data, cfg, |m, p, b, r| {
                segmentation_loss(m, p, &b.x0, masks(b)?, &sched, r)
            })?
        }
    };
    Ok(v)
}
