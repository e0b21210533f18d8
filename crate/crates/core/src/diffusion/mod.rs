//! Noise schedule, forward noising, and the two training losses.

pub mod sample;
pub mod train;

pub use sample::{ddpm_sample, SampleResult};
pub use train::{
    draw_sample, model_gradient_probe, train_loop, train_step, TrainMetrics, Trainer,
    TrainingSample,
};

use crate::error::{Error, Result};
use crate::scene::PointMapPair;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Linear-beta DDPM schedule with cumulative products kept in f64.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub k: usize,
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

/// Desk-scale defaults. The classic 1000-step range (1e-4, 0.02) subsampled
/// to 100 steps keeps the same total noise budget, so the terminal
/// signal-to-noise ratio stays below 0.2.
pub const DEFAULT_K: usize = 100;
pub const DEFAULT_BETA_MIN: f64 = 1e-3;
pub const DEFAULT_BETA_MAX: f64 = 0.2;

pub fn make_schedule(k: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if k < 2 {
        return Err(Error::config(format!("schedule needs k >= 2, got {k}")));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::config(format!(
            "invalid beta range ({beta_min}, {beta_max})"
        )));
    }
    let betas: Vec<f64> = (0..k)
        .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (k - 1) as f64)
        .collect();
    let mut alphas_cumprod = Vec::with_capacity(k);
    let mut acc = 1.0f64;
    for &b in &betas {
        acc *= 1.0 - b;
        alphas_cumprod.push(acc);
    }
    Ok(NoiseSchedule {
        k,
        betas,
        alphas_cumprod,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_K, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("valid defaults")
    }
}

impl NoiseSchedule {
    pub fn terminal_snr(&self) -> f64 {
        let a = self.alphas_cumprod[self.k - 1];
        a / (1.0 - a)
    }
}

/// Forward noising of the complete bundle: image and pose channels jointly.
pub fn q_sample(b0: &Tensor, k: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Tensor {
    assert_eq!(b0.shape(), eps.shape(), "eps must match the bundle");
    let a = schedule.alphas_cumprod[k];
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = b0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| sa * x + sn * e)
        .collect();
    Tensor::from_vec(b0.shape(), data).expect("same shape")
}

/// Mean squared error over all elements and both channel groups, equally
/// weighted; `pose_weight` scales the pose group's squared residuals.
pub fn loss_diff(
    g: &mut Graph,
    pred_img: Var,
    eps_img: &Tensor,
    pred_pose: Option<Var>,
    eps_pose: Option<&Tensor>,
    pose_weight: f64,
) -> Result<Var> {
    let target_img = g.constant(eps_img.clone());
    let d_img = g.sub(pred_img, target_img)?;
    let sq_img = g.square(d_img);
    let mut total = g.sum(sq_img);
    let mut numel = eps_img.numel();
    if let (Some(pp), Some(ep)) = (pred_pose, eps_pose) {
        let target_pose = g.constant(ep.clone());
        let d_pose = g.sub(pp, target_pose)?;
        let sq_pose = g.square(d_pose);
        let sum_pose = g.sum(sq_pose);
        let weighted = g.scale(sum_pose, pose_weight);
        total = g.add(total, weighted)?;
        numel += ep.numel();
    }
    Ok(g.scale(total, 1.0 / numel as f64))
}

/// Alignment loss: per element t, the mean over mask-valid positions of the
/// squared 6-vector distance to the oracle point-map pair, averaged over T.
pub fn loss_align(g: &mut Graph, f: Var, oracle: &[PointMapPair]) -> Result<Var> {
    let shape = g.shape(f).to_vec();
    if shape.len() != 4 || shape[1] != 6 {
        return Err(Error::Dimension {
            op: "loss_align",
            lhs: shape,
            rhs: vec![0, 6, 0, 0],
        });
    }
    let (t, h, w) = (shape[0], shape[2], shape[3]);
    if oracle.len() != t {
        return Err(Error::contract(format!(
            "expected {t} oracle pairs, got {}",
            oracle.len()
        )));
    }
    let hw = h * w;
    let mut target = vec![0.0; t * 6 * hw];
    let mut weight = vec![0.0; t * hw];
    for (ti, pair) in oracle.iter().enumerate() {
        if pair.height != h || pair.width != w {
            return Err(Error::contract(format!(
                "oracle pair {ti} is {}x{}, expected {h}x{w}",
                pair.height, pair.width
            )));
        }
        let valid = pair.mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            continue; // fully invalid element contributes zero
        }
        let inv = 1.0 / valid as f64;
        for i in 0..hw {
            if pair.mask[i] {
                weight[ti * hw + i] = inv;
            }
        }
        for c in 0..6 {
            for i in 0..hw {
                target[(ti * 6 + c) * hw + i] = pair.data.data()[c * hw + i];
            }
        }
    }
    let d = g.constant(Tensor::from_vec(&[t, 6, h, w], target)?);
    let wt = g.constant(Tensor::from_vec(&[t, 1, h, w], weight)?);
    let diff = g.sub(f, d)?;
    let sq = g.square(diff);
    let masked = g.mul(sq, wt)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / t as f64))
}

/// Everything the training loop needs to know, all spec-pinned defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: u64,
    /// Loss re-weighting factor for the alignment term.
    #[serde(default = "d_lambda")]
    pub lambda_align: f64,
    /// Bundle sequence length T.
    #[serde(default = "d_t")]
    pub t: usize,
    #[serde(default = "d_ncmin")]
    pub n_cond_min: usize,
    #[serde(default = "d_ncmax")]
    pub n_cond_max: usize,
    #[serde(default = "d_s")]
    pub latent_downsample: usize,
    #[serde(default = "d_k")]
    pub k_steps: usize,
    #[serde(default = "d_bmin")]
    pub beta_min: f64,
    #[serde(default = "d_bmax")]
    pub beta_max: f64,
    #[serde(default = "d_ckpt")]
    pub checkpoint_interval: u64,
    /// Keep condition-segment latents clean instead of noising the full
    /// bundle. Off by default.
    #[serde(default)]
    pub keep_condition_latents_clean: bool,
    /// Optional extra weight on pose-channel residuals inside the diffusion
    /// loss. 1.0 = uniform weighting.
    #[serde(default = "d_pw")]
    pub pose_loss_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_lr() -> f64 {
    1e-5
}
fn d_batch() -> usize {
    2
}
fn d_steps() -> u64 {
    20_000
}
fn d_lambda() -> f64 {
    0.1
}
fn d_t() -> usize {
    8
}
fn d_ncmin() -> usize {
    1
}
fn d_ncmax() -> usize {
    4
}
fn d_s() -> usize {
    2
}
fn d_k() -> usize {
    DEFAULT_K
}
fn d_bmin() -> f64 {
    DEFAULT_BETA_MIN
}
fn d_bmax() -> f64 {
    DEFAULT_BETA_MAX
}
fn d_ckpt() -> u64 {
    2000
}
fn d_pw() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_align < 0.0 {
            return Err(Error::config("lambda must be >= 0"));
        }
        if self.n_cond_min < 1 || self.n_cond_max >= self.t || self.n_cond_min > self.n_cond_max {
            return Err(Error::config(format!(
                "condition count range [{}, {}] invalid for t = {}",
                self.n_cond_min, self.n_cond_max, self.t
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("batch size and steps must be positive"));
        }
        make_schedule(self.k_steps, self.beta_min, self.beta_max)?;
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        make_schedule(self.k_steps, self.beta_min, self.beta_max).expect("validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn cumprod_strictly_decreasing() {
        let s = NoiseSchedule::default();
        assert_eq!(s.k, 100);
        for w in s.alphas_cumprod.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(s.alphas_cumprod[0] > 0.99);
    }

    #[test]
    fn first_cumprod_is_one_minus_beta_min() {
        let s = make_schedule(100, 1e-3, 0.2).unwrap();
        assert!((s.alphas_cumprod[0] - (1.0 - 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn terminal_snr_below_threshold_for_defaults() {
        let s = NoiseSchedule::default();
        assert!(s.terminal_snr() < 0.2, "snr = {}", s.terminal_snr());
    }

    #[test]
    fn q_sample_with_zero_noise_scales_signal() {
        let s = NoiseSchedule::default();
        let b0 = Tensor::from_vec(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let eps = Tensor::zeros(&[2, 2]);
        let bk = q_sample(&b0, 10, &eps, &s);
        let sa = s.alphas_cumprod[10].sqrt();
        for (x, y) in b0.data().iter().zip(bk.data()) {
            assert!((x * sa - y).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_monte_carlo_moments() {
        let s = NoiseSchedule::default();
        let k = s.k - 1;
        let b0 = Tensor::from_vec(&[1], vec![0.7]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq_dev = 0.0;
        let signal = s.alphas_cumprod[k].sqrt() * 0.7;
        for _ in 0..n {
            let eps = crate::tensor::randn(&[1], &mut rng);
            let bk = q_sample(&b0, k, &eps, &s);
            sum += bk.data()[0];
            let dev = bk.data()[0] - signal;
            sum_sq_dev += dev * dev;
        }
        let mean = sum / n as f64;
        let var = sum_sq_dev / n as f64;
        let want_var = 1.0 - s.alphas_cumprod[k];
        // Mean within 3 sigma of the signal term.
        let sigma_mean = (want_var / n as f64).sqrt();
        assert!((mean - signal).abs() < 3.0 * sigma_mean, "{mean} vs {signal}");
        assert!((var - want_var).abs() / want_var < 0.05, "{var} vs {want_var}");
    }

    #[test]
    fn posterior_mean_reconstruction_recovers_b0() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let b0 = crate::tensor::randn(&[3, 4], &mut rng);
        let eps = crate::tensor::randn(&[3, 4], &mut rng);
        for k in [0, 17, 50, 99] {
            let bk = q_sample(&b0, k, &eps, &s);
            let a = s.alphas_cumprod[k];
            for i in 0..b0.numel() {
                let x0 = (bk.data()[i] - (1.0 - a).sqrt() * eps.data()[i]) / a.sqrt();
                assert!((x0 - b0.data()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn loss_diff_trivials_and_scalar_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let eps_i = crate::tensor::randn(&[2, 3, 2, 2], &mut rng);
        let eps_p = crate::tensor::randn(&[2, 6, 2, 2], &mut rng);
        // Exact prediction -> 0.
        {
            let mut g = Graph::new();
            let pi = g.constant(eps_i.clone());
            let pp = g.constant(eps_p.clone());
            let l = loss_diff(&mut g, pi, &eps_i, Some(pp), Some(&eps_p), 1.0).unwrap();
            assert_eq!(g.value(l).data()[0], 0.0);
        }
        // Off-by-one everywhere -> 1.
        {
            let mut g = Graph::new();
            let one_i = Tensor::from_vec(
                eps_i.shape(),
                eps_i.data().iter().map(|v| v + 1.0).collect(),
            )
            .unwrap();
            let one_p = Tensor::from_vec(
                eps_p.shape(),
                eps_p.data().iter().map(|v| v + 1.0).collect(),
            )
            .unwrap();
            let pi = g.constant(one_i);
            let pp = g.constant(one_p);
            let l = loss_diff(&mut g, pi, &eps_i, Some(pp), Some(&eps_p), 1.0).unwrap();
            assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);
        }
        // Random case against a flat loop.
        {
            let pred_i = crate::tensor::randn(eps_i.shape(), &mut rng);
            let pred_p = crate::tensor::randn(eps_p.shape(), &mut rng);
            let mut g = Graph::new();
            let pi = g.constant(pred_i.clone());
            let pp = g.constant(pred_p.clone());
            let l = loss_diff(&mut g, pi, &eps_i, Some(pp), Some(&eps_p), 1.0).unwrap();
            let mut acc = 0.0;
            for (a, b) in pred_i.data().iter().zip(eps_i.data()) {
                acc += (a - b) * (a - b);
            }
            for (a, b) in pred_p.data().iter().zip(eps_p.data()) {
                acc += (a - b) * (a - b);
            }
            let want = acc / (eps_i.numel() + eps_p.numel()) as f64;
            assert!((g.value(l).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_align_matches_flat_loop_reference() {
        use crate::scene::PointMapPair;
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (t, h, w) = (2, 4, 4);
        let f_val = crate::tensor::randn(&[t, 6, h, w], &mut rng);
        let mut pairs = Vec::new();
        for ti in 0..t {
            let data = crate::tensor::randn(&[6, h, w], &mut rng);
            let mask: Vec<bool> = (0..h * w).map(|i| (i + ti) % 3 != 0).collect();
            pairs.push(PointMapPair {
                data,
                mask,
                height: h,
                width: w,
            });
        }
        let mut g = Graph::new();
        let f = g.constant(f_val.clone());
        let l = loss_align(&mut g, f, &pairs).unwrap();

        // Flat reference loop.
        let hw = h * w;
        let mut total = 0.0;
        for (ti, pair) in pairs.iter().enumerate() {
            let valid = pair.mask.iter().filter(|&&m| m).count();
            let mut acc = 0.0;
            for i in 0..hw {
                if !pair.mask[i] {
                    continue;
                }
                for c in 0..6 {
                    let fv = f_val.data()[(ti * 6 + c) * hw + i];
                    let dv = pair.data.data()[c * hw + i];
                    acc += (fv - dv) * (fv - dv);
                }
            }
            total += acc / valid as f64;
        }
        let want = total / t as f64;
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn loss_align_trivials() {
        use crate::scene::PointMapPair;
        let (t, h, w) = (2, 2, 2);
        let pairs: Vec<PointMapPair> = (0..t)
            .map(|_| PointMapPair {
                data: Tensor::zeros(&[6, h, w]),
                mask: vec![false; h * w],
                height: h,
                width: w,
            })
            .collect();
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[t, 6, h, w], 3.0));
        let l = loss_align(&mut g, f, &pairs).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0, "fully invalid masks -> 0");
    }
}
