//! The recipe end to end: generate its datasets, train its four networks,
//! and keep the results in a cache keyed by everything training depends on.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gddm::diffusion::{save_checkpoint, TrainConfig};
use gddm::synthlab::{export_dataset, gen_dataset, load_dataset, LoadedDataset};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::models;
use crate::recipe::{Kind, Recipe};

/// Hash of the recipe fields that affect training, and nothing else, so
/// retuning the sampler or guidance reuses trained networks.
pub fn training_fingerprint(r: &Recipe) -> String {
    let key = json!({
        "scene": r.scene,
        "train_n": r.data.train_n,
        "train_seed": r.data.train_seed,
        "judge_seed": r.data.judge_seed,
        "schedule": r.schedule,
        "network": r.network,
        "runs": [r.epsilon, r.regression, r.segmentation, r.judge],
    });
    let bytes = serde_json::to_vec(&key).expect("recipe serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

/// Generates `n` scenes from `seed`, writes them under `dir` and reads them
/// back, so callers see exactly the 8-bit data the CLI would.
pub fn dataset(r: &Recipe, n: usize, seed: u64, dir: &Path) -> Result<LoadedDataset> {
    if !dir.join("labels.csv").is_file() {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        export_dataset(&gen_dataset(n, seed, &r.scene)?, &tmp)?;
        fs::rename(&tmp, dir).with_context(|| format!("moving dataset into {}", dir.display()))?;
    }
    Ok(load_dataset(dir)?)
}

#[derive(Debug, Clone)]
pub struct DeskModels {
    pub dir: PathBuf,
    pub epsilon: PathBuf,
    pub regression: PathBuf,
    pub segmentation: PathBuf,
    pub judge: PathBuf,
}

fn train_one(
    r: &Recipe,
    kind: Kind,
    cfg: &TrainConfig,
    data: &LoadedDataset,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<()> {
    if out.is_file() {
        return Ok(());
    }
    let mut net = r.network.clone();
    net.image_size = data.size;
    log(&format!(
        "training {} for {} iterations",
        out.display(),
        cfg.iterations
    ));
    let start = std::time::Instant::now();
    let t = match cfg.precision {
        gddm::diffnum::DType::F32 => models::train::<f32>(
            kind,
            &net,
            r.schedule,
            cfg,
            &models::train_set(data, kind),
            |_| Ok(()),
        )?,
        gddm::diffnum::DType::F64 => models::train::<f64>(
            kind,
            &net,
            r.schedule,
            cfg,
            &models::train_set(data, kind),
            |_| Ok(()),
        )?,
    };
    let tmp = out.with_extension("partial");
    save_checkpoint(&t.report.checkpoint, &tmp)?;
    fs::rename(&tmp, out)?;
    let summary = json!({
        "probe": t.report.probe,
        "seconds": start.elapsed().as_secs_f64(),
    });
    fs::write(
        out.with_extension("json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    log(&format!(
        "  probe {:.5} -> {:.5} in {:.0} s",
        t.report.initial_probe(),
        t.report.final_probe(),
        start.elapsed().as_secs_f64()
    ));
    Ok(())
}

/// Trains whatever is missing under `root/<fingerprint>` and returns the
/// checkpoint paths.
pub fn prepare(r: &Recipe, root: &Path, log: &mut dyn FnMut(&str)) -> Result<DeskModels> {
    let dir = root.join(training_fingerprint(r));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let m = DeskModels {
        epsilon: dir.join("epsilon.ckpt"),
        regression: dir.join("regression.ckpt"),
        segmentation: dir.join("segmentation.ckpt"),
        judge: dir.join("judge.ckpt"),
        dir: dir.clone(),
    };
    let train = dataset(r, r.data.train_n, r.data.train_seed, &dir.join("train"))?;
    train_one(r, Kind::Epsilon, &r.epsilon, &train, &m.epsilon, log)?;
    train_one(
        r,
        Kind::Regression,
        &r.regression,
        &train,
        &m.regression,
        log,
    )?;
    train_one(
        r,
        Kind::Segmentation,
        &r.segmentation,
        &train,
        &m.segmentation,
        log,
    )?;
    drop(train);
    let judge_data = dataset(
        r,
        r.data.train_n,
        r.data.judge_seed,
        &dir.join("judge_train"),
    )?;
    train_one(r, Kind::Segmentation, &r.judge, &judge_data, &m.judge, log)?;
    Ok(m)
}
