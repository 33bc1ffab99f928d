use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use super::scene::{bool_array, Dataset};
use super::{Result, SynthError};
use crate::diffnum::{Array, Scalar};

const LABELS: &str = "labels.csv";

/// `[0, 1] -> [0, 255]` with round-half-up; values outside are clamped.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes row-major intensities as an 8-bit grayscale PNG.
pub fn write_png(path: &Path, values: &[f64], width: usize) -> Result<()> {
    let height = values.len() / width;
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([to_u8(values[y as usize * width + x as usize])])
    });
    img.save(path).map_err(|e| SynthError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads any PNG as grayscale; returns intensities in `[0, 1]` and width.
pub fn read_png(path: &Path) -> Result<(Vec<f64>, usize)> {
    let img_err = |e: &dyn std::fmt::Display| SynthError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let img = ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()
        .map_err(|e| img_err(&e))?
        .to_luma8();
    let width = img.width() as usize;
    Ok((img.pixels().map(|p| from_u8(p.0[0])).collect(), width))
}

/// Mask PNGs are binarized at 0.5.
pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize)> {
    let (v, w) = read_png(path)?;
    Ok((v.into_iter().map(|x| x >= 0.5).collect(), w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub filename: String,
    pub ratio: f64,
    pub healthy: bool,
    pub seed: u64,
}

/// Writes `images/`, `masks/` and `labels.csv` under `dir`; returns every
/// file written.
pub fn export_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    for d in [&images, &masks] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut written = Vec::new();
    let labels_path = dir.join(LABELS);
    let mut csv = csv::Writer::from_path(&labels_path).map_err(|e| SynthError::Csv {
        path: labels_path.clone(),
        message: e.to_string(),
    })?;
    for (i, (scene, &seed)) in ds.scenes.iter().zip(&ds.seeds).enumerate() {
        let name = format!("{i:05}.png");
        let ip = images.join(&name);
        let mp = masks.join(&name);
        write_png(&ip, &scene.image, scene.size)?;
        let m: Vec<f64> = scene
            .mask
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        write_png(&mp, &m, scene.size)?;
        written.push(ip);
        written.push(mp);
        csv.serialize(LabelRow {
            filename: name,
            ratio: scene.ratio,
            healthy: scene.is_healthy(),
            seed,
        })
        .map_err(|e| SynthError::Csv {
            path: labels_path.clone(),
            message: e.to_string(),
        })?;
    }
    csv.flush().map_err(io_err(&labels_path))?;
    written.push(labels_path);
    Ok(written)
}

/// A dataset read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub size: usize,
    pub rows: Vec<LabelRow>,
    pub images: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn images_array<F: Scalar>(&self) -> Array<F> {
        let s = self.size;
        let items: Vec<Array<F>> = self
            .images
            .iter()
            .map(|im| Array::from_fn(&[1, 1, s, s], |i| F::from_f64(im[i])))
            .collect();
        Array::stack_batch(&items).expect("images share one size")
    }

    pub fn masks_array<F: Scalar>(&self) -> Array<F> {
        let items: Vec<Array<F>> = self
            .masks
            .iter()
            .map(|m| bool_array(m, self.size))
            .collect();
        Array::stack_batch(&items).expect("masks share one size")
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.ratio).collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let labels_path = dir.join(LABELS);
    let csv_err = |e: csv::Error| SynthError::Csv {
        path: labels_path.clone(),
        message: e.to_string(),
    };
    let mut reader = csv::Reader::from_path(&labels_path).map_err(csv_err)?;
    let rows: Vec<LabelRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(csv_err)?;
    let mut images = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    let mut size = 0;
    for row in &rows {
        let (im, w) = read_png(&dir.join("images").join(&row.filename))?;
        let (m, mw) = read_mask_png(&dir.join("masks").join(&row.filename))?;
        if im.len() != w * w || mw != w || m.len() != im.len() || (size != 0 && w != size) {
            return Err(SynthError::Shape(format!(
                "{}: images and masks must be square and share one size",
                row.filename
            )));
        }
        size = w;
        images.push(im);
        masks.push(m);
    }
    Ok(LoadedDataset {
        size,
        rows,
        images,
        masks,
    })
}
