//! Depth maps to anchor-frame point maps: the analytic stand-in for a dense
//! stereo predictor during alignment training.

use super::{render::render, PointMapPair, RenderedView, SceneSpec};
use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::Result;
use crate::tensor::Tensor;

/// Per-pixel 3D points of `view`, expressed in the anchor camera frame.
/// Mask is false at background (depth sentinel 0) pixels.
pub fn depth_to_pointmap(view: &RenderedView, anchor: &CameraPose) -> (Tensor, Vec<bool>) {
    let (h, w) = (view.height(), view.width());
    let hw = h * w;
    let mut points = vec![0.0; 3 * hw];
    let mut mask = vec![false; hw];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let z = view.depth.data()[i];
            if z <= 0.0 {
                continue;
            }
            mask[i] = true;
            // Camera-frame ray with unit z component, scaled by z-depth.
            let ray = view.intrinsics.ray_cam(u, v);
            let p_world = view.pose.to_world(&(ray * z));
            let p_anchor = anchor.to_camera(&p_world);
            points[i] = p_anchor.x;
            points[hw + i] = p_anchor.y;
            points[2 * hw + i] = p_anchor.z;
        }
    }
    (
        Tensor::from_vec(&[3, h, w], points).expect("pointmap shape"),
        mask,
    )
}

/// Build a [`PointMapPair`] from two already-rendered views.
pub fn pointmap_pair_from_views(
    anchor_view: &RenderedView,
    t_view: &RenderedView,
) -> PointMapPair {
    let anchor_pose = anchor_view.pose;
    let (pa, ma) = depth_to_pointmap(anchor_view, &anchor_pose);
    let (pt, mt) = depth_to_pointmap(t_view, &anchor_pose);
    let (h, w) = (anchor_view.height(), anchor_view.width());
    let hw = h * w;
    let mut data = vec![0.0; 6 * hw];
    let mut mask = vec![false; hw];
    for i in 0..hw {
        if ma[i] && mt[i] {
            mask[i] = true;
            for c in 0..3 {
                data[c * hw + i] = pa.data()[c * hw + i];
                data[(3 + c) * hw + i] = pt.data()[c * hw + i];
            }
        }
    }
    PointMapPair {
        data: Tensor::from_vec(&[6, h, w], data).expect("pair shape"),
        mask,
        height: h,
        width: w,
    }
}

/// Render anchor and view `t`, convert both depths to anchor-frame points,
/// and concatenate (anchor first). Invalid pixels carry zeros, mask false.
pub fn oracle_pointmap_pair(
    scene: &SceneSpec,
    k: &CameraIntrinsics,
    pose_t: &CameraPose,
    anchor_pose: &CameraPose,
    height: usize,
    width: usize,
) -> Result<PointMapPair> {
    let anchor_view = render(scene, k, anchor_pose, height, width)?;
    let t_view = render(scene, k, pose_t, height, width)?;
    Ok(pointmap_pair_from_views(&anchor_view, &t_view))
}

/// Area-average a point-map pair down to `h x w`, averaging only valid
/// source pixels per block; a block with no valid pixel stays masked out.
pub fn resize_pointmap_pair(pair: &PointMapPair, h: usize, w: usize) -> PointMapPair {
    assert!(pair.height % h == 0 && pair.width % w == 0, "integer factor");
    let (fy, fx) = (pair.height / h, pair.width / w);
    let src_hw = pair.height * pair.width;
    let hw = h * w;
    let mut data = vec![0.0; 6 * hw];
    let mut mask = vec![false; hw];
    for y in 0..h {
        for x in 0..w {
            let mut count = 0usize;
            let mut acc = [0.0; 6];
            for dy in 0..fy {
                for dx in 0..fx {
                    let si = (y * fy + dy) * pair.width + (x * fx + dx);
                    if pair.mask[si] {
                        count += 1;
                        for c in 0..6 {
                            acc[c] += pair.data.data()[c * src_hw + si];
                        }
                    }
                }
            }
            let di = y * w + x;
            if count > 0 {
                mask[di] = true;
                for c in 0..6 {
                    data[c * hw + di] = acc[c] / count as f64;
                }
            }
        }
    }
    PointMapPair {
        data: Tensor::from_vec(&[6, h, w], data).expect("resized shape"),
        mask,
        height: h,
        width: w,
    }
}
