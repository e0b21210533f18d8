//! Ancestral DDPM sampling over image-pose bundles.

use super::NoiseSchedule;
use crate::bundle::BundleSequence;
use crate::camera::PluckerMap;
use crate::error::{Error, Result};
use crate::model::DualStreamModel;
use crate::tensor::graph::Graph;
use crate::tensor::{randn, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub struct SampleResult {
    /// Generated target-segment latents, positions 0..N (position 0 is the
    /// regenerated anchor, which callers may replace with the given one).
    pub images: Vec<Tensor>,
    /// Generated condition-segment pose maps, positions N..T, with ray
    /// directions renormalized per pixel. Empty for image-only models.
    pub pose_maps: Vec<PluckerMap>,
    /// The full denoised bundle tensor `[T, c, h', w']`.
    pub x0: Tensor,
}

/// Sample a complete bundle from pure noise, conditioning fixed throughout.
/// Consumes exactly K model forwards and is deterministic for a seed.
pub fn ddpm_sample(
    model: &DualStreamModel,
    conditional: &BundleSequence,
    schedule: &NoiseSchedule,
    seed: u64,
    anchor_image: &Tensor,
) -> Result<SampleResult> {
    conditional.validate()?;
    let cfg = &model.config;
    let t = conditional.len();
    let (h, w) = conditional.latent_hw();
    let c = cfg.noisy_channels();
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0xD1342543DE82EF95).wrapping_add(11));
    let mut x = randn(&[t, c, h, w], &mut rng);
    let cond_stacked = conditional.stacked();

    for k in (0..schedule.k).rev() {
        let mut g = Graph::inference();
        let nv = g.constant(x.clone());
        let cv = g.constant(cond_stacked.clone());
        let anchor_feat = model.anchor_encode(&mut g, anchor_image)?;
        let out = model.forward(
            &mut g,
            nv,
            cv,
            k,
            &conditional.extrinsics,
            &conditional.extrinsics_mask,
            anchor_feat,
        )?;
        // eps prediction over the full noisy stream.
        let eps = match out.eps_pose {
            Some(pv) => {
                let both = g.concat(&[out.eps_img, pv], 1)?;
                g.value(both).clone()
            }
            None => g.value(out.eps_img).clone(),
        };

        let beta = schedule.betas[k];
        let alpha = 1.0 - beta;
        let a_bar = schedule.alphas_cumprod[k];
        let coeff = beta / (1.0 - a_bar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let sigma = if k > 0 {
            let a_bar_prev = schedule.alphas_cumprod[k - 1];
            ((1.0 - a_bar_prev) / (1.0 - a_bar) * beta).sqrt()
        } else {
            0.0
        };
        let z = if k > 0 {
            randn(&[t, c, h, w], &mut rng)
        } else {
            Tensor::zeros(&[t, c, h, w])
        };
        for i in 0..x.numel() {
            let mean = inv_sqrt_alpha * (x.data()[i] - coeff * eps.data()[i]);
            x.data_mut()[i] = mean + sigma * z.data()[i];
        }
        if !x.is_finite() {
            return Err(Error::Sampling {
                step: k as u64,
                msg: "non-finite state during ancestral sampling".into(),
            });
        }
    }

    let n = conditional.n_target;
    let hw = h * w;
    let frame = c * hw;
    let mut images = Vec::with_capacity(n);
    for pos in 0..n {
        let mut img = vec![0.0; cfg.c_img * hw];
        img.copy_from_slice(&x.data()[pos * frame..pos * frame + cfg.c_img * hw]);
        images.push(Tensor::from_vec(&[cfg.c_img, h, w], img)?);
    }
    let mut pose_maps = Vec::new();
    if cfg.dual_stream {
        for pos in n..t {
            let mut map = vec![0.0; 6 * hw];
            map.copy_from_slice(
                &x.data()[pos * frame + cfg.c_img * hw..pos * frame + (cfg.c_img + 6) * hw],
            );
            // Renormalize directions per pixel before pose solving.
            for i in 0..hw {
                let (dx, dy, dz) = (map[i], map[hw + i], map[2 * hw + i]);
                let norm = (dx * dx + dy * dy + dz * dz).sqrt();
                if norm > 1e-12 {
                    map[i] /= norm;
                    map[hw + i] /= norm;
                    map[2 * hw + i] /= norm;
                }
            }
            pose_maps.push(PluckerMap::from_data(h, w, map)?);
        }
    }
    Ok(SampleResult {
        images,
        pose_maps,
        x0: x,
    })
}
