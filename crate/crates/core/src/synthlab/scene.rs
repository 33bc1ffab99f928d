use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SynthError};
use crate::diffnum::{Array, Scalar};

/// Geometry and appearance of generated disk scenes.
///
/// Lengths are given for a 32-pixel canvas and scale with `size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    /// Disk-to-foreground area ratios are drawn from this range.
    pub ratio_range: (f64, f64),
    pub background: f64,
    pub disk_intensity: f64,
    pub texture_amplitude: f64,
    /// Minimum gap between disk edge and foreground edge, in pixels.
    pub margin: f64,
    pub healthy_fraction: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 32,
            ratio_range: (0.02, 0.25),
            background: 0.45,
            disk_intensity: 0.9,
            texture_amplitude: 0.05,
            margin: 1.5,
            healthy_fraction: 0.3,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        let (lo, hi) = self.ratio_range;
        if self.size < 8 {
            return bad(format!("canvas size {} is below 8", self.size));
        }
        if !(0.0 < lo && lo < hi && hi <= 0.3) {
            return bad(format!(
                "ratio range ({lo}, {hi}) must satisfy 0 < lo < hi <= 0.3"
            ));
        }
        if !(0.0..=1.0).contains(&self.healthy_fraction) {
            return bad(format!(
                "healthy fraction {} outside [0, 1]",
                self.healthy_fraction
            ));
        }
        if self.background_max() >= self.disk_min()
            || self.disk_max() > 1.0
            || self.background_min() <= 0.0
        {
            return bad("texture amplitude leaves no contrast between tissue and disk".into());
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.size as f64 / 32.0
    }

    // Background texture spans +-2 amplitudes, disk texture +-1.
    fn background_min(&self) -> f64 {
        self.background - 2.0 * self.texture_amplitude
    }

    fn background_max(&self) -> f64 {
        self.background + 2.0 * self.texture_amplitude
    }

    fn disk_min(&self) -> f64 {
        self.disk_intensity - self.texture_amplitude
    }

    fn disk_max(&self) -> f64 {
        self.disk_intensity + self.texture_amplitude
    }

    /// Intensity halfway between the brightest tissue and the dimmest disk
    /// pixel; used to read disk areas back from images.
    pub fn disk_threshold(&self) -> f64 {
        0.5 * (self.background_max() + self.disk_min())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl Disk {
    fn contains(&self, x: f64, y: f64, extra: f64) -> bool {
        let r = self.radius + extra;
        (x - self.cx).powi(2) + (y - self.cy).powi(2) <= r * r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub fx: f64,
    pub fy: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub cx: f64,
    pub cy: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub angle: f64,
    pub waves: Vec<Wave>,
    pub disk: Option<Disk>,
}

/// A single-channel ellipse "organ" with an optional bright disk "lesion".
#[derive(Debug, Clone, PartialEq)]
pub struct DiskScene {
    pub size: usize,
    /// Row-major intensities in `[0, 1]`.
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
    pub foreground: Vec<bool>,
    pub ratio: f64,
    pub params: SceneParams,
}

impl DiskScene {
    pub fn is_healthy(&self) -> bool {
        self.params.disk.is_none()
    }

    pub fn image_array<F: Scalar>(&self) -> Array<F> {
        Array::from_fn(&[1, 1, self.size, self.size], |i| {
            F::from_f64(self.image[i])
        })
    }

    pub fn mask_array<F: Scalar>(&self) -> Array<F> {
        bool_array(&self.mask, self.size)
    }
}

pub(crate) fn bool_array<F: Scalar>(m: &[bool], size: usize) -> Array<F> {
    Array::from_fn(
        &[1, 1, size, size],
        |i| if m[i] { F::one() } else { F::zero() },
    )
}

fn pixel_centers(size: usize) -> impl Iterator<Item = (f64, f64)> {
    (0..size * size).map(move |i| ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5))
}

fn ratio_of(mask: &[bool], fg: &[bool]) -> f64 {
    let m = mask.iter().filter(|&&v| v).count();
    let f = fg.iter().filter(|&&v| v).count();
    m as f64 / f as f64
}

/// Box from which disk centres are drawn.
#[derive(Debug, Clone, Copy)]
struct Window {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
}

impl Window {
    fn of_params(p: &SceneParams) -> Self {
        Window {
            cx: p.cx,
            cy: p.cy,
            half_w: p.semi_a,
            half_h: p.semi_b,
        }
    }

    /// Bounding box of the set pixels; `None` if there are none.
    fn of_mask(m: &[bool], size: usize) -> Option<Self> {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for ((x, y), _) in pixel_centers(size).zip(m).filter(|(_, &v)| v) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        (x0 <= x1).then(|| Window {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            half_w: (0.5 * (x1 - x0)).max(0.5),
            half_h: (0.5 * (y1 - y0)).max(0.5),
        })
    }
}

/// Draws a disk fully inside `fg` (with margin) whose rasterized area ratio
/// falls in `range`. Returns `None` if no placement is found quickly.
fn place_disk<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SceneConfig,
    centre: Window,
    fg: &[bool],
    range: (f64, f64),
) -> Option<(Disk, Vec<bool>)> {
    let size = cfg.size;
    let fg_area = fg.iter().filter(|&&v| v).count() as f64;
    let margin = cfg.margin * cfg.scale();
    for _ in 0..2000 {
        let rho = rng.random_range(range.0..range.1);
        let disk = Disk {
            cx: centre.cx + rng.random_range(-centre.half_w..centre.half_w),
            cy: centre.cy + rng.random_range(-centre.half_h..centre.half_h),
            radius: (rho * fg_area / PI).sqrt(),
        };
        let mask: Vec<bool> = pixel_centers(size)
            .map(|(x, y)| disk.contains(x, y, 0.0))
            .collect();
        let inside = pixel_centers(size)
            .zip(fg)
            .all(|((x, y), &f)| f || !disk.contains(x, y, margin));
        if !inside {
            continue;
        }
        let r = ratio_of(&mask, fg);
        if r > 0.0 && r >= range.0 && r < range.1 {
            return Some((disk, mask));
        }
    }
    None
}

fn draw_geometry<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> SceneParams {
    let s = cfg.scale();
    let c = cfg.size as f64 / 2.0;
    let cx = c + rng.random_range(-1.5..1.5) * s;
    let cy = c + rng.random_range(-1.5..1.5) * s;
    let semi_a = rng.random_range(11.0..13.5) * s;
    let semi_b = rng.random_range(9.0..12.0) * s;
    let angle = rng.random_range(0.0..PI);
    let waves = (0..3)
        .map(|_| Wave {
            fx: rng.random_range(0.05..0.2) / s,
            fy: rng.random_range(0.05..0.2) / s,
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    SceneParams {
        cx,
        cy,
        semi_a,
        semi_b,
        angle,
        waves,
        disk: None,
    }
}

fn foreground(params: &SceneParams, size: usize) -> Vec<bool> {
    let (sin, cos) = params.angle.sin_cos();
    pixel_centers(size)
        .map(|(x, y)| {
            let u = (x - params.cx) * cos + (y - params.cy) * sin;
            let v = -(x - params.cx) * sin + (y - params.cy) * cos;
            (u / params.semi_a).powi(2) + (v / params.semi_b).powi(2) <= 1.0
        })
        .collect()
}

fn render(cfg: &SceneConfig, params: &SceneParams, fg: &[bool], mask: &[bool]) -> Vec<f64> {
    let amp = cfg.texture_amplitude;
    pixel_centers(cfg.size)
        .enumerate()
        .map(|(i, (x, y))| {
            // Sum of three unit sinusoids, so within [-3, 3].
            let tex: f64 = params
                .waves
                .iter()
                .map(|w| (2.0 * PI * (w.fx * x + w.fy * y) + w.phase).sin())
                .sum();
            if mask[i] {
                cfg.disk_intensity + amp * tex / 3.0
            } else if fg[i] {
                cfg.background + 2.0 * amp * tex / 3.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Generates one scene. `ratio_range = None` yields a healthy scene.
pub fn gen_scene<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SceneConfig,
    ratio_range: Option<(f64, f64)>,
) -> Result<DiskScene> {
    cfg.validate()?;
    loop {
        let mut params = draw_geometry(rng, cfg);
        let fg = foreground(&params, cfg.size);
        let mask = match ratio_range {
            None => vec![false; fg.len()],
            Some(range) => match place_disk(rng, cfg, Window::of_params(&params), &fg, range) {
                Some((disk, mask)) => {
                    params.disk = Some(disk);
                    mask
                }
                None => continue,
            },
        };
        let ratio = if params.disk.is_some() {
            ratio_of(&mask, &fg)
        } else {
            0.0
        };
        let image = render(cfg, &params, &fg, &mask);
        return Ok(DiskScene {
            size: cfg.size,
            image,
            mask,
            foreground: fg,
            ratio,
            params,
        });
    }
}

/// A fresh legal disk mask for an existing scene, e.g. an inpainting target.
pub fn random_disk_mask<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SceneConfig,
    scene: &DiskScene,
) -> Result<Vec<bool>> {
    place_disk(
        rng,
        cfg,
        Window::of_params(&scene.params),
        &scene.foreground,
        cfg.ratio_range,
    )
    .map(|(_, m)| m)
    .ok_or_else(|| SynthError::Config("no legal disk placement inside this scene".into()))
}

/// Like [`random_disk_mask`], for an image known only by its foreground
/// (row-major, `cfg.size` columns).
pub fn random_disk_mask_in<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SceneConfig,
    foreground: &[bool],
) -> Result<Vec<bool>> {
    if foreground.len() != cfg.size * cfg.size {
        return Err(SynthError::Shape(format!(
            "foreground has {} pixels, expected {}",
            foreground.len(),
            cfg.size * cfg.size
        )));
    }
    let window = Window::of_mask(foreground, cfg.size)
        .ok_or_else(|| SynthError::Config("image has no foreground".into()))?;
    place_disk(rng, cfg, window, foreground, cfg.ratio_range)
        .map(|(_, m)| m)
        .ok_or_else(|| SynthError::Config("no legal disk placement inside this foreground".into()))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SceneConfig,
    pub scenes: Vec<DiskScene>,
    /// Seed of each scene's own generator.
    pub seeds: Vec<u64>,
}

const STRATA: usize = 10;

/// Generates `n` scenes with exactly `round(n * healthy_fraction)` healthy.
///
/// Disk-bearing scenes cycle through ten equal-width ratio strata, so the
/// ratio histogram is flat by construction.
pub fn gen_dataset(n: usize, seed: u64, cfg: &SceneConfig) -> Result<Dataset> {
    cfg.validate()?;
    if n == 0 {
        return Err(SynthError::Config(
            "dataset needs at least one scene".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let healthy = (n as f64 * cfg.healthy_fraction).round() as usize;
    let mut is_healthy: Vec<bool> = (0..n).map(|i| i < healthy).collect();
    is_healthy.shuffle(&mut rng);
    let mut strata: Vec<usize> = (0..n - healthy).map(|k| k % STRATA).collect();
    strata.shuffle(&mut rng);
    let (lo, hi) = cfg.ratio_range;
    let width = (hi - lo) / STRATA as f64;
    let mut strata = strata.into_iter();
    let mut scenes = Vec::with_capacity(n);
    let mut seeds = Vec::with_capacity(n);
    for &h in &is_healthy {
        let s = rng.next_u64();
        let range = if h {
            None
        } else {
            let k = strata.next().expect("one stratum per disk scene") as f64;
            Some((lo + k * width, lo + (k + 1.0) * width))
        };
        scenes.push(gen_scene(&mut ChaCha8Rng::seed_from_u64(s), cfg, range)?);
        seeds.push(s);
    }
    Ok(Dataset {
        config: cfg.clone(),
        scenes,
        seeds,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn images<F: Scalar>(&self) -> Array<F> {
        let items: Vec<Array<F>> = self.scenes.iter().map(|s| s.image_array()).collect();
        Array::stack_batch(&items).expect("scenes share one size")
    }

    pub fn masks<F: Scalar>(&self) -> Array<F> {
        let items: Vec<Array<F>> = self.scenes.iter().map(|s| s.mask_array()).collect();
        Array::stack_batch(&items).expect("scenes share one size")
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.scenes.iter().map(|s| s.ratio).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            config: self.config.clone(),
            scenes: indices.iter().map(|&i| self.scenes[i].clone()).collect(),
            seeds: indices.iter().map(|&i| self.seeds[i]).collect(),
        }
    }
}

/// Fraction of foreground pixels of `image` at or above `threshold`.
pub fn measure_ratio(image: &[f64], foreground: &[bool], threshold: f64) -> f64 {
    let bright: Vec<bool> = image
        .iter()
        .zip(foreground)
        .map(|(&v, &f)| f && v >= threshold)
        .collect();
    ratio_of(&bright, foreground)
}

/// Foreground recovered from an image: every pixel brighter than half the
/// dimmest tissue intensity.
pub fn foreground_of(image: &[f64], cfg: &SceneConfig) -> Vec<bool> {
    let cut = 0.5 * cfg.background_min();
    image.iter().map(|&v| v > cut).collect()
}
