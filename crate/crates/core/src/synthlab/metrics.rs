use super::{Result, SynthError};
use crate::diffnum::{Array, Scalar};

fn same_len(a: usize, b: usize, op: &str) -> Result<()> {
    if a != b {
        return Err(SynthError::Shape(format!(
            "{op}: lengths {a} and {b} differ"
        )));
    }
    Ok(())
}

/// `2|a ∩ b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    same_len(a.len(), b.len(), "dice")?;
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len(pred.len(), truth.len(), "mae")?;
    if pred.is_empty() {
        return Err(SynthError::Shape("mae of nothing".into()));
    }
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Per-pixel absolute difference summed over channels: `[n, c, h, w]` in,
/// `[n, 1, h, w]` out.
pub fn diff_map<F: Scalar>(x: &Array<F>, y: &Array<F>) -> Result<Array<f64>> {
    x.expect_same_shape(y, "diff_map")?;
    let [n, c, h, w] = x.dims4("diff_map")?;
    let plane = h * w;
    Ok(Array::from_fn(&[n, 1, h, w], |i| {
        let (item, p) = (i / plane, i % plane);
        (0..c)
            .map(|ch| {
                let j = (item * c + ch) * plane + p;
                (x.data()[j] - y.data()[j])
                    .abs()
                    .to_f64()
                    .unwrap_or(f64::NAN)
            })
            .sum()
    }))
}

/// Grows `mask` (row-major, `width` columns) by a Euclidean disk of `radius`.
pub fn dilate(mask: &[bool], width: usize, radius: usize) -> Vec<bool> {
    let height = mask.len() / width;
    let r = radius as isize;
    let mut out = vec![false; mask.len()];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (x0, y0) = ((i % width) as isize, (i / width) as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (x0 + dx, y0 + dy);
                if dx * dx + dy * dy <= r * r
                    && x >= 0
                    && y >= 0
                    && (x as usize) < width
                    && (y as usize) < height
                {
                    out[y as usize * width + x as usize] = true;
                }
            }
        }
    }
    out
}

/// Fraction of the total absolute difference inside `mask` grown by
/// `dilation` pixels. A zero difference map scores 1.
pub fn locality_score(diff: &[f64], mask: &[bool], width: usize, dilation: usize) -> Result<f64> {
    same_len(diff.len(), mask.len(), "locality_score")?;
    let region = dilate(mask, width, dilation);
    let total: f64 = diff.iter().sum();
    let inside: f64 = diff
        .iter()
        .zip(&region)
        .filter(|(_, &r)| r)
        .map(|(d, _)| d)
        .sum();
    Ok(if total == 0.0 { 1.0 } else { inside / total })
}

/// Mean difference outside and inside `mask` grown by `dilation` pixels.
pub fn outside_inside_means(
    diff: &[f64],
    mask: &[bool],
    width: usize,
    dilation: usize,
) -> Result<(f64, f64)> {
    same_len(diff.len(), mask.len(), "outside_inside_means")?;
    let region = dilate(mask, width, dilation);
    let (mut so, mut no, mut si, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for (&d, &r) in diff.iter().zip(&region) {
        if r {
            si += d;
            ni += 1;
        } else {
            so += d;
            no += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(so, no), mean(si, ni)))
}

/// Peak signal-to-noise ratio in dB for signals with peak value 1.
pub fn psnr(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len(x.len(), y.len(), "psnr")?;
    let mse = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}
