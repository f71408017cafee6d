//! Volume quality metrics: PSNR, 3D windowed SSIM, IoU and Dice.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Reported PSNR for identical volumes.
pub const PSNR_IDENTICAL: f64 = 999.0;
pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub iou: f64,
    pub dice: f64,
    pub data_range_used: f64,
    pub threshold_used: f64,
}

fn check_dims(gt: &Volume, pred: &Volume) -> Result<()> {
    if gt.dims != pred.dims {
        return Err(Error::invalid(format!("dims differ: {:?} vs {:?}", gt.dims, pred.dims)));
    }
    Ok(())
}

fn resolve_range(gt: &Volume, data_range: Option<f64>) -> Result<f64> {
    let r = match data_range {
        Some(r) => r,
        None => (gt.max_value() - gt.min_value()) as f64,
    };
    if r > 0.0 && r.is_finite() {
        Ok(r)
    } else {
        Err(Error::invalid("data range is zero (constant ground truth); pass an explicit range"))
    }
}

/// `20 log10(R / RMSE)`; `R` defaults to the ground-truth value span.
pub fn psnr(gt: &Volume, pred: &Volume, data_range: Option<f64>) -> Result<f64> {
    check_dims(gt, pred)?;
    let range = resolve_range(gt, data_range)?;
    let mse = gt
        .data
        .iter()
        .zip(&pred.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / gt.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(20.0 * (range / mse.sqrt()).log10())
}

/// Inclusive 3D prefix sums with a zero border: `(nx+1)(ny+1)(nz+1)` entries.
struct Integral {
    sums: Vec<f64>,
    sx: usize,
    sy: usize,
}

impl Integral {
    fn new(dims: [usize; 3], value: impl Fn(usize) -> f64) -> Self {
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut sums = vec![0.0; sx * sy * (nz + 1)];
        let at = |i: usize, j: usize, k: usize| i + sx * (j + sy * k);
        for k in 1..=nz {
            for j in 1..=ny {
                for i in 1..=nx {
                    let v = value((i - 1) + nx * ((j - 1) + ny * (k - 1)));
                    sums[at(i, j, k)] = v + sums[at(i - 1, j, k)] + sums[at(i, j - 1, k)] + sums[at(i, j, k - 1)]
                        - sums[at(i - 1, j - 1, k)]
                        - sums[at(i - 1, j, k - 1)]
                        - sums[at(i, j - 1, k - 1)]
                        + sums[at(i - 1, j - 1, k - 1)];
                }
            }
        }
        Self { sums, sx, sy }
    }

    /// Sum over the cube `[i, i+w) x [j, j+w) x [k, k+w)`.
    fn window(&self, i: usize, j: usize, k: usize, w: usize) -> f64 {
        let at = |i: usize, j: usize, k: usize| self.sums[i + self.sx * (j + self.sy * k)];
        let (a, b, c) = (i + w, j + w, k + w);
        at(a, b, c) - at(i, b, c) - at(a, j, c) - at(a, b, k) + at(i, j, c) + at(i, b, k) + at(a, j, k) - at(i, j, k)
    }
}

/// Mean local SSIM over every fully interior 7x7x7 uniform window.
/// Local (co)variances use the unbiased `N / (N - 1)` normalization.
pub fn ssim(gt: &Volume, pred: &Volume, data_range: Option<f64>) -> Result<f64> {
    check_dims(gt, pred)?;
    let w = SSIM_WINDOW;
    if gt.dims.iter().any(|&d| d < w) {
        return Err(Error::invalid(format!("SSIM needs every dimension >= {w}, got {:?}", gt.dims)));
    }
    let range = resolve_range(gt, data_range)?;
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let x = |i: usize| gt.data[i] as f64;
    let y = |i: usize| pred.data[i] as f64;
    let sx = Integral::new(gt.dims, x);
    let sy = Integral::new(gt.dims, y);
    let sxx = Integral::new(gt.dims, |i| x(i) * x(i));
    let syy = Integral::new(gt.dims, |i| y(i) * y(i));
    let sxy = Integral::new(gt.dims, |i| x(i) * y(i));
    let n = (w * w * w) as f64;
    let cov_norm = n / (n - 1.0);
    let [nx, ny, nz] = gt.dims;
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..=nz - w {
        for j in 0..=ny - w {
            for i in 0..=nx - w {
                let mx = sx.window(i, j, k, w) / n;
                let my = sy.window(i, j, k, w) / n;
                let vx = cov_norm * (sxx.window(i, j, k, w) / n - mx * mx);
                let vy = cov_norm * (syy.window(i, j, k, w) / n - my * my);
                let cxy = cov_norm * (sxy.window(i, j, k, w) / n - mx * my);
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Overlap of the masks `gt > threshold` and `pred > threshold`. Two empty
/// masks count as a perfect match.
pub fn iou_dice(gt: &Volume, pred: &Volume, threshold: f64) -> Result<(f64, f64)> {
    check_dims(gt, pred)?;
    let a = gt.data.iter().map(|&v| v as f64 > threshold);
    let b = pred.data.iter().map(|&v| v as f64 > threshold);
    Ok(mask_overlap(a, b))
}

pub fn mask_overlap(a: impl Iterator<Item = bool>, b: impl Iterator<Item = bool>) -> (f64, f64) {
    let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
    for (x, y) in a.zip(b) {
        inter += u64::from(x && y);
        na += u64::from(x);
        nb += u64::from(y);
    }
    let union = na + nb - inter;
    if union == 0 {
        return (1.0, 1.0);
    }
    (inter as f64 / union as f64, 2.0 * inter as f64 / (na + nb) as f64)
}

/// All four metrics. The threshold defaults to half the ground-truth maximum.
pub fn evaluate(gt: &Volume, pred: &Volume, data_range: Option<f64>, threshold: Option<f64>) -> Result<MetricReport> {
    let range = resolve_range(gt, data_range)?;
    let threshold = threshold.unwrap_or(0.5 * gt.max_value() as f64);
    let (iou, dice) = iou_dice(gt, pred, threshold)?;
    Ok(MetricReport {
        psnr_db: psnr(gt, pred, Some(range))?,
        ssim: ssim(gt, pred, Some(range))?,
        iou,
        dice,
        data_range_used: range,
        threshold_used: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::phantom::builtin_phantom;
    use crate::rng::Prng;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume {
        Volume::from_data(dims, Vec3::splat(1.0), Vec3::ZERO, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let gt = builtin_phantom("blocks", [16, 16, 16]).unwrap();
        assert_eq!(psnr(&gt, &gt, None).unwrap(), PSNR_IDENTICAL);
        let shifted = Volume { data: gt.data.iter().map(|v| v + 0.1).collect(), ..gt.clone() };
        assert!((psnr(&gt, &shifted, None).unwrap() - 20.0).abs() < 1e-5);
        let a = psnr(&gt, &shifted, Some(1.0)).unwrap();
        let b = psnr(&gt.scaled(2.0), &shifted.scaled(2.0), Some(2.0)).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn psnr_errors() {
        let a = vol([2, 1, 1], vec![1.0, 1.0]);
        let b = vol([1, 2, 1], vec![1.0, 1.0]);
        assert!(psnr(&a, &b, None).is_err());
        assert!(psnr(&a, &a, None).is_err());
        assert_eq!(psnr(&a, &a, Some(1.0)).unwrap(), PSNR_IDENTICAL);
    }

    #[test]
    fn ssim_identity_symmetry_and_bounds() {
        let gt = builtin_phantom("shepp3d", [12, 12, 12]).unwrap();
        assert_eq!(ssim(&gt, &gt, None).unwrap(), 1.0);
        let mut rng = Prng::new(1);
        let noisy = Volume { data: gt.data.iter().map(|v| v + 0.2 * rng.uniform() as f32).collect(), ..gt.clone() };
        let s1 = ssim(&gt, &noisy, Some(1.0)).unwrap();
        let s2 = ssim(&noisy, &gt, Some(1.0)).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 < 1.0 && s1 > -1.0);
    }

    #[test]
    fn ssim_of_constant_prediction_is_low() {
        let gt = builtin_phantom("blocks", [32, 32, 32]).unwrap();
        let flat = Volume { data: vec![gt.mean() as f32; gt.len()], ..gt.clone() };
        let s = ssim(&gt, &flat, None).unwrap();
        assert!(s < 0.1, "{s}");
    }

    #[test]
    fn ssim_matches_brute_force_window() {
        let mut rng = Prng::new(4);
        let dims = [8, 9, 7];
        let a: Vec<f32> = (0..504).map(|_| rng.uniform() as f32).collect();
        let b: Vec<f32> = a.iter().map(|v| v * 0.7 + 0.3 * rng.uniform() as f32).collect();
        let (va, vb) = (vol(dims, a), vol(dims, b));
        let fast = ssim(&va, &vb, Some(1.0)).unwrap();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for k0 in 0..=dims[2] - 7 {
            for j0 in 0..=dims[1] - 7 {
                for i0 in 0..=dims[0] - 7 {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for k in k0..k0 + 7 {
                        for j in j0..j0 + 7 {
                            for i in i0..i0 + 7 {
                                xs.push(va.get(i, j, k) as f64);
                                ys.push(vb.get(i, j, k) as f64);
                            }
                        }
                    }
                    let n = xs.len() as f64;
                    let mx = xs.iter().sum::<f64>() / n;
                    let my = ys.iter().sum::<f64>() / n;
                    let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0);
                    let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0);
                    let cxy = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / (n - 1.0);
                    total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
        }
        assert!((fast - total / count as f64).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_volumes() {
        let a = vol([6, 7, 7], vec![0.0; 294]);
        assert!(ssim(&a, &a, Some(1.0)).is_err());
    }

    #[test]
    fn overlap_examples() {
        let a = vol([4, 1, 1], vec![1.0, 1.0, 0.0, 0.0]);
        let b = vol([4, 1, 1], vec![0.0, 1.0, 1.0, 0.0]);
        let c = vol([4, 1, 1], vec![0.0, 0.0, 1.0, 1.0]);
        let z = vol([4, 1, 1], vec![0.0; 4]);
        assert_eq!(iou_dice(&a, &a, 0.5).unwrap(), (1.0, 1.0));
        assert_eq!(iou_dice(&a, &c, 0.5).unwrap(), (0.0, 0.0));
        let (iou, dice) = iou_dice(&a, &b, 0.5).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-15 && (dice - 0.5).abs() < 1e-15);
        assert_eq!(iou_dice(&z, &z, 0.5).unwrap(), (1.0, 1.0));
        assert!(iou_dice(&a, &vol([2, 2, 1], vec![0.0; 4]), 0.5).is_err());
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let gt = builtin_phantom("blocks", [24, 24, 24]).unwrap();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1] {
            let mut rng = Prng::new(7);
            let noisy = Volume { data: gt.data.iter().map(|v| v + amp * (2.0 * rng.uniform() as f32 - 1.0)).collect(), ..gt.clone() };
            let p = psnr(&gt, &noisy, None).unwrap();
            assert!(p < last);
            last = p;
        }
    }
}
