//! Image quality metrics and the experiment harness.

pub mod harness;

pub use harness::{
    ablation_eval, pose_eval, random_rotation_baseline_median_deg, views_sweep, AblationOutcome,
    AblationVariant, EvalProtocol, PoseEvalOutcome,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Peak signal-to-noise ratio in dB between two images in [-1, 1].
/// Identical images return `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "psnr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    // Map to [0, 1]: halving the range quarters the squared error.
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x - y) * 0.5;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Structural similarity with a uniform 7x7 window over valid positions,
/// computed on the [0, 1] range and averaged over channels and positions.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let shape = a.shape();
    if shape.len() != 3 {
        return Err(Error::contract("ssim expects [c, h, w] images"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let to01 = |v: f64| (v + 1.0) * 0.5;
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..=h - SSIM_WINDOW {
            for x in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let va = to01(pa[(y + dy) * w + (x + dx)]);
                        let vb = to01(pb[(y + dy) * w + (x + dx)]);
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                let val = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Percentile-bootstrap confidence interval for the mean of paired gaps.
pub fn bootstrap_ci_mean(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    use rand::Rng;
    use rand::SeedableRng;
    assert!(!values.is_empty());
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let mut acc = 0.0;
            for _ in 0..values.len() {
                acc += values[rng.gen_range(0..values.len())];
            }
            acc / values.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let lo = means[(resamples as f64 * 0.025) as usize];
    let hi = means[((resamples as f64 * 0.975) as usize).min(resamples - 1)];
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn psnr_identical_is_infinite() {
        let a = Tensor::full(&[3, 4, 4], 0.25);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_uniform_offset_analytic() {
        // 0.2 offset in [0,1] space = 0.4 in [-1,1]; MSE 0.04 -> 13.9794 dB.
        let a = Tensor::full(&[1, 2, 2], -0.2);
        let b = Tensor::full(&[1, 2, 2], 0.2);
        let got = psnr(&a, &b).unwrap();
        assert!((got - 13.9794).abs() < 1e-4, "{got}");
    }

    #[test]
    fn psnr_matches_scalar_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = crate::tensor::randn(&[2, 3, 3], &mut rng);
        let b = crate::tensor::randn(&[2, 3, 3], &mut rng);
        let mut acc = 0.0;
        for i in 0..a.numel() {
            let x = (a.data()[i] + 1.0) * 0.5;
            let y = (b.data()[i] + 1.0) * 0.5;
            acc += (x - y) * (x - y);
        }
        let want = 10.0 * (a.numel() as f64 / acc).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let base = crate::tensor::randn(&[1, 8, 8], &mut rng);
        let mut prev = f64::INFINITY;
        for sigma in [0.01, 0.05, 0.1] {
            let noisy = Tensor::from_vec(
                base.shape(),
                base.data()
                    .iter()
                    .map(|&v| v + sigma * crate::tensor::Normal.sample_std(&mut rng))
                    .collect(),
            )
            .unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < prev, "sigma {sigma}: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_self_is_one_and_symmetric() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = crate::tensor::randn(&[1, 8, 8], &mut rng);
        let b = crate::tensor::randn(&[1, 8, 8], &mut rng);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_small_image_is_config_error() {
        let a = Tensor::zeros(&[1, 6, 6]);
        assert!(matches!(ssim(&a, &a), Err(Error::Config(_))));
    }

    /// Direct per-window oracle on a hand-built 8x8 case.
    #[test]
    fn ssim_matches_windowed_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut a_d = vec![0.0; 64];
        let mut b_d = vec![0.0; 64];
        for i in 0..64 {
            a_d[i] = ((i % 8) as f64 / 7.0) * 2.0 - 1.0; // horizontal ramp
            b_d[i] = a_d[i] + rng.gen_range(-0.2..0.2);
        }
        let a = Tensor::from_vec(&[1, 8, 8], a_d.clone()).unwrap();
        let b = Tensor::from_vec(&[1, 8, 8], b_d.clone()).unwrap();

        // Oracle: explicit window stats, means first, centered moments.
        let mut vals = Vec::new();
        for y in 0..=1usize {
            for x in 0..=1usize {
                let mut wa = Vec::new();
                let mut wb = Vec::new();
                for dy in 0..7 {
                    for dx in 0..7 {
                        wa.push((a_d[(y + dy) * 8 + x + dx] + 1.0) / 2.0);
                        wb.push((b_d[(y + dy) * 8 + x + dx] + 1.0) / 2.0);
                    }
                }
                let n = 49.0;
                let ma = wa.iter().sum::<f64>() / n;
                let mb = wb.iter().sum::<f64>() / n;
                let va = wa.iter().map(|v| (v - ma) * (v - ma)).sum::<f64>() / n;
                let vb = wb.iter().map(|v| (v - mb) * (v - mb)).sum::<f64>() / n;
                let cov = wa
                    .iter()
                    .zip(&wb)
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum::<f64>()
                    / n;
                vals.push(
                    ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                        / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4)),
                );
            }
        }
        let want = vals.iter().sum::<f64>() / vals.len() as f64;
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn bootstrap_ci_of_constant_is_the_constant() {
        let values = vec![0.7; 25];
        let (lo, hi) = bootstrap_ci_mean(&values, 200, 1);
        assert_eq!(lo, 0.7);
        assert_eq!(hi, 0.7);
    }
}
