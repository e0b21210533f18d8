//! Image-pose bundle sequences: latent encoding, target/condition partition,
//! anchor duplication, masking, and the training-window sampler.
//!
//! A sequence holds T bundles. Positions 0..N are the target segment and
//! N..T the condition segment; position 0 and position N both carry the
//! anchor view, whose relative extrinsics are the identity.

use crate::camera::{plucker_embed, relative_to_anchor, CameraPose, PluckerMap};
use crate::error::{Error, Result};
use crate::scene::RenderedView;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BundleKind {
    /// Fully populated: the denoising target.
    Complete,
    /// Masked conditioning input: target latents and condition poses zeroed.
    Conditional,
}

#[derive(Debug, Clone)]
pub struct ImagePoseBundle {
    /// `[c_img, h', w']` latent image.
    pub latent: Tensor,
    /// `[6, h', w']` Plücker pose channels.
    pub pose: Tensor,
}

#[derive(Debug, Clone)]
pub struct BundleSequence {
    pub bundles: Vec<ImagePoseBundle>,
    pub n_target: usize,
    pub n_condition: usize,
    /// Anchor-relative camera-to-world extrinsics per position, unmasked;
    /// consumers apply `extrinsics_mask` before embedding.
    pub extrinsics: Vec<CameraPose>,
    /// true = pose provided (target segment), false = masked (condition).
    pub extrinsics_mask: Vec<bool>,
    pub kind: BundleKind,
    /// Bundle position -> index into the view list given to [`assemble`];
    /// training bookkeeping for the point-map oracle. Zeros when the
    /// sequence was built without source views.
    pub source_indices: Vec<usize>,
}

impl BundleSequence {
    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        let s = self.bundles[0].latent.shape();
        (s[1], s[2])
    }

    pub fn c_img(&self) -> usize {
        self.bundles[0].latent.shape()[0]
    }

    /// Channel-stacked `[T, c_img + 6, h', w']` tensor of all bundles.
    pub fn stacked(&self) -> Tensor {
        let (h, w) = self.latent_hw();
        let c = self.c_img() + 6;
        let t = self.len();
        let mut data = Vec::with_capacity(t * c * h * w);
        for b in &self.bundles {
            data.extend_from_slice(b.latent.data());
            data.extend_from_slice(b.pose.data());
        }
        Tensor::from_vec(&[t, c, h, w], data).expect("stacked shape")
    }

    /// `[T, c_img, h', w']` image latents only, for the image-only ablation.
    pub fn stacked_images_only(&self) -> Tensor {
        let (h, w) = self.latent_hw();
        let c = self.c_img();
        let t = self.len();
        let mut data = Vec::with_capacity(t * c * h * w);
        for b in &self.bundles {
            data.extend_from_slice(b.latent.data());
        }
        Tensor::from_vec(&[t, c, h, w], data).expect("stacked shape")
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.n_target + self.n_condition != t || self.n_target < 1 || self.n_condition < 1 {
            return Err(Error::contract(format!(
                "segment sizes {} + {} != {}",
                self.n_target, self.n_condition, t
            )));
        }
        if self.extrinsics.len() != t || self.extrinsics_mask.len() != t {
            return Err(Error::contract("extrinsics length mismatch"));
        }
        for idx in [0, self.n_target] {
            let e = &self.extrinsics[idx];
            if (e.rotation - nalgebra::Matrix3::identity()).abs().max() > 1e-9
                || e.center.norm() > 1e-9
            {
                return Err(Error::contract(format!(
                    "anchor extrinsics at position {idx} not identity"
                )));
            }
        }
        Ok(())
    }
}

/// `s x s` average pooling per channel; the latent stand-in for a learned
/// encoder. `s = 1` is the identity.
pub fn encode_latent(image: &Tensor, s: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "encode_latent",
            lhs: shape.to_vec(),
            rhs: vec![3, 0, 0],
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::config(format!(
            "latent downsample {s} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / s, w / s);
    let mut out = vec![0.0; c * ho * wo];
    let inv = 1.0 / (s * s) as f64;
    for ch in 0..c {
        let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += plane[(y * s + dy) * w + (x * s + dx)];
                    }
                }
                out[ch * ho * wo + y * wo + x] = acc * inv;
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out)
}

/// Nearest-neighbor upsampling back to image size, for previews.
pub fn decode_latent_nearest(latent: &Tensor, s: usize) -> Tensor {
    let shape = latent.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h * s, w * s);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                out[ch * ho * wo + y * wo + x] = latent.data()[ch * h * w + (y / s) * w + (x / s)];
            }
        }
    }
    Tensor::from_vec(&[c, ho, wo], out).expect("decode shape")
}

fn zeroed_like(t: &Tensor) -> Tensor {
    Tensor::zeros(t.shape())
}

/// Assemble the complete sequence B and its masked counterpart B_c from
/// rendered views. Both index lists must contain the anchor (their single
/// shared element); the anchor leads both segments, and non-anchor condition
/// views are shuffled with the given seed.
pub fn assemble(
    views: &[RenderedView],
    condition_indices: &[usize],
    target_indices: &[usize],
    seed: u64,
    s: usize,
) -> Result<(BundleSequence, BundleSequence)> {
    let n = target_indices.len();
    let m = condition_indices.len();
    if n < 1 || m < 1 {
        return Err(Error::contract("need at least one target and one condition"));
    }
    let shared: Vec<usize> = target_indices
        .iter()
        .filter(|i| condition_indices.contains(i))
        .copied()
        .collect();
    if shared.len() != 1 {
        return Err(Error::contract(format!(
            "index lists must share exactly the anchor, shared = {shared:?}"
        )));
    }
    let anchor = shared[0];
    for &i in target_indices.iter().chain(condition_indices) {
        if i >= views.len() {
            return Err(Error::contract(format!("view index {i} out of range")));
        }
    }

    // Bundle position -> view index. Anchor leads both segments.
    let mut order = Vec::with_capacity(n + m);
    order.push(anchor);
    order.extend(target_indices.iter().filter(|&&i| i != anchor));
    order.push(anchor);
    let mut cond_rest: Vec<usize> = condition_indices
        .iter()
        .filter(|&&i| i != anchor)
        .copied()
        .collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0xD6E8FEB86659FD93).wrapping_add(5));
    cond_rest.shuffle(&mut rng);
    order.extend(cond_rest);

    let poses: Vec<CameraPose> = order.iter().map(|&i| views[i].pose).collect();
    let mut rel = relative_to_anchor(&poses, 0)?;
    // Position n is the duplicated anchor; pin it to the exact identity too.
    rel[n] = CameraPose::identity();

    let (h, w) = (views[anchor].height(), views[anchor].width());
    if h % s != 0 || w % s != 0 {
        return Err(Error::config(format!(
            "latent downsample {s} does not divide {h}x{w}"
        )));
    }
    let (hp, wp) = (h / s, w / s);

    let mut bundles = Vec::with_capacity(n + m);
    for (pos, &vi) in order.iter().enumerate() {
        let latent = encode_latent(&views[vi].image, s)?;
        let pmap: PluckerMap = plucker_embed(&views[vi].intrinsics, &rel[pos], hp, wp)?;
        bundles.push(ImagePoseBundle {
            latent,
            pose: Tensor::from_vec(&[6, hp, wp], pmap.data)?,
        });
    }

    let mut mask = vec![true; n];
    mask.extend(vec![false; m]);
    let complete = BundleSequence {
        bundles,
        n_target: n,
        n_condition: m,
        extrinsics: rel,
        extrinsics_mask: mask,
        kind: BundleKind::Complete,
        source_indices: order,
    };
    complete.validate()?;

    let mut conditional = complete.clone();
    conditional.kind = BundleKind::Conditional;
    for pos in 0..n {
        conditional.bundles[pos].latent = zeroed_like(&conditional.bundles[pos].latent);
    }
    for pos in n..n + m {
        conditional.bundles[pos].pose = zeroed_like(&conditional.bundles[pos].pose);
    }
    Ok((complete, conditional))
}

/// Build the conditional sequence directly from what inference actually has:
/// the anchor image, unposed condition images, and target poses relative to
/// the anchor.
pub fn assemble_conditional(
    anchor: &RenderedView,
    condition_views: &[&RenderedView],
    target_poses_rel: &[CameraPose],
    seed: u64,
    s: usize,
) -> Result<BundleSequence> {
    let n = 1 + target_poses_rel.len();
    let m = 1 + condition_views.len();
    let (h, w) = (anchor.height(), anchor.width());
    let (hp, wp) = (h / s, w / s);
    let anchor_latent = encode_latent(&anchor.image, s)?;

    let mut bundles = Vec::with_capacity(n + m);
    let mut extrinsics = Vec::with_capacity(n + m);
    // Target segment: zero latents, given pose maps.
    let mut target_rel = vec![CameraPose::identity()];
    target_rel.extend_from_slice(target_poses_rel);
    for pose in &target_rel {
        let pmap = plucker_embed(&anchor.intrinsics, pose, hp, wp)?;
        bundles.push(ImagePoseBundle {
            latent: Tensor::zeros(anchor_latent.shape()),
            pose: Tensor::from_vec(&[6, hp, wp], pmap.data)?,
        });
        extrinsics.push(*pose);
    }
    // Condition segment: given latents, zero pose maps; anchor first, then
    // the seeded shuffle of the remaining condition views.
    let mut order: Vec<usize> = (0..condition_views.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0xD6E8FEB86659FD93).wrapping_add(5));
    order.shuffle(&mut rng);
    bundles.push(ImagePoseBundle {
        latent: anchor_latent.clone(),
        pose: Tensor::zeros(&[6, hp, wp]),
    });
    extrinsics.push(CameraPose::identity());
    for &i in &order {
        bundles.push(ImagePoseBundle {
            latent: encode_latent(&condition_views[i].image, s)?,
            pose: Tensor::zeros(&[6, hp, wp]),
        });
        // Unknown pose: identity placeholder, masked out below.
        extrinsics.push(CameraPose::identity());
    }

    let mut mask = vec![true; n];
    mask.extend(vec![false; m]);
    let source_indices = vec![0; n + m];
    let seq = BundleSequence {
        bundles,
        n_target: n,
        n_condition: m,
        extrinsics,
        extrinsics_mask: mask,
        kind: BundleKind::Conditional,
        source_indices,
    };
    seq.validate()?;
    Ok(seq)
}

/// Frame window for one training sample: `t` strided frame indices plus the
/// condition picks (anchor always included). The bundle built from a window
/// has `t + 1` elements because the anchor is duplicated.
pub fn sample_training_window(
    t_max: usize,
    t: usize,
    n_cond: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if t_max < t {
        return Err(Error::contract(format!("t_max {t_max} < t {t}")));
    }
    if t < 2 || n_cond < 1 || n_cond > t {
        return Err(Error::contract(format!(
            "invalid window request: t {t}, n_cond {n_cond}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(9));
    let r_max = t_max / t;
    let r = rng.gen_range(1..=r_max);
    let span = (t - 1) * r;
    let start = rng.gen_range(0..t_max - span);
    let frames: Vec<usize> = (0..t).map(|i| start + i * r).collect();
    let mut picks = vec![frames[0]];
    let mut rest: Vec<usize> = frames[1..].to_vec();
    for _ in 1..n_cond {
        let j = rng.gen_range(0..rest.len());
        picks.push(rest.swap_remove(j));
    }
    picks[1..].sort_unstable();
    Ok((frames, picks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{rotation_geodesic_deg, solve_pose_from_rays, CameraIntrinsics};
    use crate::scene::render::render;
    use crate::scene::trajectory::{sample_trajectory, TrajectoryKind};
    use crate::scene::gen_scene;

    #[test]
    fn constant_image_pools_to_constant() {
        let img = Tensor::full(&[3, 4, 4], 0.37);
        let lat = encode_latent(&img, 2).unwrap();
        assert_eq!(lat.shape(), &[3, 2, 2]);
        assert!(lat.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    #[test]
    fn s1_is_identity() {
        let img = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let lat = encode_latent(&img, 1).unwrap();
        assert_eq!(lat.data(), img.data());
    }

    #[test]
    fn block_means_hand_case() {
        let img = Tensor::from_vec(
            &[1, 4, 4],
            vec![
                1.0, 2.0, 5.0, 6.0, //
                3.0, 4.0, 7.0, 8.0, //
                -1.0, -2.0, 0.0, 0.0, //
                -3.0, -4.0, 0.0, 4.0,
            ],
        )
        .unwrap();
        let lat = encode_latent(&img, 2).unwrap();
        assert_eq!(lat.data(), &[2.5, 6.5, -2.5, 1.0]);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let img = Tensor::zeros(&[3, 5, 4]);
        assert!(matches!(encode_latent(&img, 2), Err(Error::Config(_))));
    }

    fn make_views(count: usize) -> Vec<RenderedView> {
        let scene = gen_scene(42);
        let k = CameraIntrinsics::from_fov(60.0, 16, 16).unwrap();
        let poses = sample_trajectory(7, TrajectoryKind::Random, count).unwrap();
        poses
            .iter()
            .map(|p| render(&scene, &k, p, 16, 16).unwrap())
            .collect()
    }

    #[test]
    fn masking_and_anchor_invariants_all_partitions_t8() {
        let views = make_views(7);
        for n in 1..=7usize {
            let m = 8 - n;
            // Anchor view 0; targets 1..n; conditions n..7.
            let target_indices: Vec<usize> = std::iter::once(0).chain(1..n).collect();
            let condition_indices: Vec<usize> = std::iter::once(0).chain(n..7).collect();
            assert_eq!(target_indices.len(), n);
            assert_eq!(condition_indices.len(), m);
            let (b, bc) = assemble(&views, &condition_indices, &target_indices, 11, 2).unwrap();
            assert_eq!(b.len(), 8);
            assert_eq!(b.n_target, n);
            assert_eq!(b.n_condition, m);

            // B_c: target latents exactly zero, condition poses exactly zero.
            let zero_lat: f64 = bc.bundles[..n]
                .iter()
                .map(|bb| bb.latent.data().iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            assert_eq!(zero_lat, 0.0);
            let zero_pose: f64 = bc.bundles[n..]
                .iter()
                .map(|bb| bb.pose.data().iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            assert_eq!(zero_pose, 0.0);
            // Everything else matches B.
            for pos in n..8 {
                assert_eq!(bc.bundles[pos].latent.data(), b.bundles[pos].latent.data());
            }
            for pos in 0..n {
                assert_eq!(bc.bundles[pos].pose.data(), b.bundles[pos].pose.data());
            }

            // Anchor duplication and identity extrinsics.
            assert_eq!(b.bundles[0].latent.data(), b.bundles[n].latent.data());
            b.validate().unwrap();
            bc.validate().unwrap();
            assert_eq!(&b.extrinsics_mask[..n], vec![true; n].as_slice());
            assert_eq!(&b.extrinsics_mask[n..], vec![false; m].as_slice());
        }
    }

    #[test]
    fn shuffle_permutes_but_preserves_multiset() {
        let views = make_views(7);
        let condition_indices = [0, 3, 4, 5, 6];
        let target_indices = [0, 1, 2];
        let (b1, _) = assemble(&views, &condition_indices, &target_indices, 1, 2).unwrap();
        let (b2, _) = assemble(&views, &condition_indices, &target_indices, 2, 2).unwrap();
        let lat_sum = |b: &BundleSequence, pos: usize| -> f64 {
            b.bundles[pos].latent.data().iter().sum()
        };
        let mut sums1: Vec<f64> = (4..8).map(|p| lat_sum(&b1, p)).collect();
        let mut sums2: Vec<f64> = (4..8).map(|p| lat_sum(&b2, p)).collect();
        sums1.sort_by(f64::total_cmp);
        sums2.sort_by(f64::total_cmp);
        assert_eq!(sums1, sums2, "same multiset of condition views");
        // And the same seed reproduces the exact order.
        let (b1b, _) = assemble(&views, &condition_indices, &target_indices, 1, 2).unwrap();
        for (x, y) in b1.bundles.iter().zip(&b1b.bundles) {
            assert_eq!(x.latent.data(), y.latent.data());
            assert_eq!(x.pose.data(), y.pose.data());
        }
    }

    #[test]
    fn bundle_pose_maps_round_trip_to_extrinsics() {
        let views = make_views(7);
        let (b, _) = assemble(&views, &[0, 4, 5, 6], &[0, 1, 2, 3], 3, 2).unwrap();
        let k = views[0].intrinsics;
        for pos in 0..b.len() {
            let pose_t = &b.bundles[pos].pose;
            let map = crate::camera::PluckerMap::from_data(8, 8, pose_t.data().to_vec()).unwrap();
            let sol = solve_pose_from_rays(&map, &k).unwrap();
            let want = &b.extrinsics[pos];
            assert!(
                rotation_geodesic_deg(&sol.pose.rotation, &want.rotation) < 1e-6,
                "position {pos}"
            );
            assert!((sol.pose.center - want.center).norm() < 1e-6);
        }
    }

    #[test]
    fn disjointness_is_enforced() {
        let views = make_views(5);
        // Shares two indices.
        assert!(assemble(&views, &[0, 1, 2], &[0, 1, 3], 0, 2).is_err());
        // Shares none.
        assert!(assemble(&views, &[1, 2], &[3, 4], 0, 2).is_err());
    }

    #[test]
    fn window_forced_when_tmax_equals_t() {
        let (frames, picks) = sample_training_window(8, 8, 3, 123).unwrap();
        assert_eq!(frames, (0..8).collect::<Vec<_>>());
        assert_eq!(picks[0], 0);
        assert_eq!(picks.len(), 3);
    }

    #[test]
    fn window_indices_increasing_and_in_range() {
        for seed in 0..1000 {
            let (frames, picks) = sample_training_window(40, 8, 4, seed).unwrap();
            assert!(frames.windows(2).all(|w| w[0] < w[1]));
            assert!(*frames.last().unwrap() < 40);
            assert_eq!(picks[0], frames[0]);
            assert!(picks.iter().all(|p| frames.contains(p)));
            let mut dedup = picks.clone();
            dedup.sort_unstable();
            dedup.dedup();
            assert_eq!(dedup.len(), picks.len());
        }
    }

    #[test]
    fn interval_distribution_is_uniform() {
        // chi-square over r in [1, 5] with 10000 draws; critical value for
        // df = 4 at p = 0.01 is 13.2767.
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for seed in 0..draws {
            let (frames, _) = sample_training_window(40, 8, 2, seed).unwrap();
            let r = frames[1] - frames[0];
            counts[r - 1] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 13.2767, "chi-square {chi2}, counts {counts:?}");
    }

    #[test]
    fn tmax_below_t_is_contract_error() {
        assert!(sample_training_window(5, 8, 2, 0).is_err());
    }

    #[test]
    fn conditional_assembly_matches_masked_assemble() {
        let views = make_views(7);
        let condition_indices = [0, 4, 5];
        let target_indices = [0, 1, 2, 3];
        let (_, bc) = assemble(&views, &condition_indices, &target_indices, 9, 2).unwrap();
        // Rebuild from inference-available inputs only.
        let rel = relative_to_anchor(
            &[views[0].pose, views[1].pose, views[2].pose, views[3].pose],
            0,
        )
        .unwrap();
        let cond_refs: Vec<&RenderedView> = vec![&views[4], &views[5]];
        let direct = assemble_conditional(&views[0], &cond_refs, &rel[1..], 9, 2).unwrap();
        assert_eq!(direct.len(), bc.len());
        assert_eq!(direct.n_target, bc.n_target);
        for (a, b) in direct.bundles.iter().zip(&bc.bundles) {
            assert_eq!(a.latent.data(), b.latent.data());
            assert_eq!(a.pose.data(), b.pose.data());
        }
    }
}
