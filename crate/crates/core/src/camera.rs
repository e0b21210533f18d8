//! Camera conventions, Plücker ray maps, closed-form pose recovery, and the
//! pose error metrics used by evaluation.
//!
//! Conventions: camera-to-world extrinsics, +z forward, +x right, +y down in
//! the image; world up is +y. Rays are sampled at pixel centers `(u+0.5,
//! v+0.5)` with intrinsics rescaled to the requested grid resolution.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Symmetric pinhole with the given horizontal field of view.
    pub fn from_fov(fov_x_deg: f64, width: usize, height: usize) -> Result<Self> {
        let f = width as f64 * 0.5 / (fov_x_deg.to_radians() * 0.5).tan();
        CameraIntrinsics::new(f, f, width as f64 * 0.5, height as f64 * 0.5, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::config(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64)
            || !(0.0 <= self.cy && self.cy < self.height as f64)
        {
            return Err(Error::config(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for a resampled grid covering the same sensor area.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        CameraIntrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Camera-frame ray through pixel center (u+0.5, v+0.5), z = 1.
    pub fn ray_cam(&self, u: usize, v: usize) -> Vector3<f64> {
        Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Continuous pixel coordinates of a camera-frame point (z > 0).
    pub fn project(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        (
            p_cam.x / p_cam.z * self.fx + self.cx,
            p_cam.y / p_cam.z * self.fy + self.cy,
        )
    }
}

/// Camera-to-world rotation and camera center, i.e. the 3x4 matrix [R | c].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub center: Vector3<f64>,
}

impl CameraPose {
    pub fn identity() -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            center: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        let p = CameraPose { rotation, center };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if dev > ORTHONORMALITY_TOL {
            return Err(Error::config(format!(
                "rotation not orthonormal, deviation {dev:.3e}"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(Error::config(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    /// Look-at pose with +z toward `target` and world up +y.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        CameraPose {
            rotation: Matrix3::from_columns(&[x, y, z]),
            center: eye,
        }
    }

    /// World point of a camera-frame point.
    pub fn to_world(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.center
    }

    /// Camera-frame point of a world point.
    pub fn to_camera(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p_world - self.center)
    }

    /// The optical axis in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    /// Row-major 3x4 [R | c] for serialization.
    pub fn to_rows(&self) -> [[f64; 4]; 3] {
        let r = &self.rotation;
        let c = &self.center;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], c.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], c.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], c.z],
        ]
    }

    pub fn from_rows(rows: &[[f64; 4]; 3]) -> Result<Self> {
        let rotation = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        );
        let center = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        CameraPose::new(rotation, center)
    }

    /// Flat 12-vector (row-major 3x4), the extrinsics embedding input.
    pub fn to_flat12(&self) -> [f64; 12] {
        let rows = self.to_rows();
        let mut out = [0.0; 12];
        for (i, row) in rows.iter().enumerate() {
            out[i * 4..(i + 1) * 4].copy_from_slice(row);
        }
        out
    }
}

/// Express each pose relative to `poses[anchor_index]`; the anchor becomes
/// the identity and pairwise relative transforms are preserved.
pub fn relative_to_anchor(poses: &[CameraPose], anchor_index: usize) -> Result<Vec<CameraPose>> {
    let anchor = poses
        .get(anchor_index)
        .ok_or_else(|| Error::contract(format!("anchor index {anchor_index} out of range")))?;
    let rt = anchor.rotation.transpose();
    Ok(poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == anchor_index {
                // Exactly the identity, not R^T R with rounding.
                CameraPose::identity()
            } else {
                CameraPose {
                    rotation: rt * p.rotation,
                    center: rt * (p.center - anchor.center),
                }
            }
        })
        .collect())
}

/// 6-channel per-pixel ray map: channels 0-2 unit direction, 3-5 moment.
#[derive(Debug, Clone, PartialEq)]
pub struct PluckerMap {
    pub height: usize,
    pub width: usize,
    /// Layout `[6, height, width]`, row-major.
    pub data: Vec<f64>,
}

impl PluckerMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        PluckerMap {
            height,
            width,
            data: vec![0.0; 6 * height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 6 * height * width {
            return Err(Error::contract(format!(
                "plucker map data length {} != 6*{}*{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(PluckerMap {
            height,
            width,
            data,
        })
    }

    pub fn direction(&self, v: usize, u: usize) -> Vector3<f64> {
        let hw = self.height * self.width;
        let i = v * self.width + u;
        Vector3::new(self.data[i], self.data[hw + i], self.data[2 * hw + i])
    }

    pub fn moment(&self, v: usize, u: usize) -> Vector3<f64> {
        let hw = self.height * self.width;
        let i = v * self.width + u;
        Vector3::new(
            self.data[3 * hw + i],
            self.data[4 * hw + i],
            self.data[5 * hw + i],
        )
    }

    fn set(&mut self, v: usize, u: usize, d: &Vector3<f64>, m: &Vector3<f64>) {
        let hw = self.height * self.width;
        let i = v * self.width + u;
        self.data[i] = d.x;
        self.data[hw + i] = d.y;
        self.data[2 * hw + i] = d.z;
        self.data[3 * hw + i] = m.x;
        self.data[4 * hw + i] = m.y;
        self.data[5 * hw + i] = m.z;
    }

    /// Max deviation from the unit-direction and orthogonality invariants.
    pub fn invariant_deviation(&self) -> (f64, f64) {
        let mut unit_dev: f64 = 0.0;
        let mut ortho_dev: f64 = 0.0;
        for v in 0..self.height {
            for u in 0..self.width {
                let d = self.direction(v, u);
                let m = self.moment(v, u);
                unit_dev = unit_dev.max((d.norm() - 1.0).abs());
                ortho_dev = ortho_dev.max(d.dot(&m).abs());
            }
        }
        (unit_dev, ortho_dev)
    }
}

/// Per-pixel Plücker embedding of a posed pinhole camera on an h x w grid.
pub fn plucker_embed(
    k: &CameraIntrinsics,
    pose: &CameraPose,
    height: usize,
    width: usize,
) -> Result<PluckerMap> {
    if height == 0 || width == 0 {
        return Err(Error::config("plucker_embed grid must be at least 1x1"));
    }
    k.validate()?;
    let ks = k.rescaled(width, height);
    let mut map = PluckerMap::zeros(height, width);
    for v in 0..height {
        for u in 0..width {
            let d = (pose.rotation * ks.ray_cam(u, v)).normalize();
            let m = pose.center.cross(&d);
            map.set(v, u, &d, &m);
        }
    }
    Ok(map)
}

/// Pose recovered from a ray map, with conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct PoseSolve {
    pub pose: CameraPose,
    pub condition_number: f64,
    pub ill_conditioned: bool,
}

/// Closed-form pose recovery from a Plücker map.
///
/// Rotation by orthogonal Procrustes over ray directions (SVD with
/// determinant correction); center by linear least squares over the stacked
/// cross-product constraints `m = c x d`.
pub fn solve_pose_from_rays(rays: &PluckerMap, k: &CameraIntrinsics) -> Result<PoseSolve> {
    let (h, w) = (rays.height, rays.width);
    let ks = k.rescaled(w, h);
    let mut cross_cov = Matrix3::<f64>::zeros();
    let mut a = Matrix3::<f64>::zeros();
    let mut b = Vector3::<f64>::zeros();
    for v in 0..h {
        for u in 0..w {
            let mut d = rays.direction(v, u);
            let n = d.norm();
            if n < 1e-12 {
                continue;
            }
            d /= n; // renormalize defensively, moments untouched
            let m = rays.moment(v, u);
            let d_hat = (ks.ray_cam(u, v)).normalize();
            cross_cov += d * d_hat.transpose();
            a += Matrix3::identity() - d * d.transpose();
            b += d.cross(&m);
        }
    }

    let svd = nalgebra::SVD::new(cross_cov, true, true);
    let (u_m, v_t) = (
        svd.u.ok_or_else(|| Error::degenerate("SVD failed"))?,
        svd.v_t.ok_or_else(|| Error::degenerate("SVD failed"))?,
    );
    let sv = svd.singular_values;
    if sv[2] < 1e-12 * sv[0].max(1e-300) {
        return Err(Error::degenerate(
            "ray directions are rank deficient (parallel rays)",
        ));
    }
    let rotation = if cross_cov.determinant() > 0.0 {
        // Polar factor via Newton iteration; quadratic convergence takes the
        // SVD-level solution down to machine precision.
        polar_rotation(&cross_cov).ok_or_else(|| Error::degenerate("polar iteration failed"))?
    } else {
        let mut u_fix = u_m;
        u_fix.column_mut(2).neg_mut();
        u_fix * v_t
    };

    let eig = a.symmetric_eigen();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for &ev in eig.eigenvalues.iter() {
        lo = lo.min(ev);
        hi = hi.max(ev);
    }
    if lo <= 1e-12 * hi.max(1e-300) {
        return Err(Error::degenerate(
            "center system singular (parallel rays)",
        ));
    }
    let condition_number = hi / lo;
    let lu = a.lu();
    let mut center = lu
        .solve(&b)
        .ok_or_else(|| Error::degenerate("center solve failed"))?;
    // One step of iterative refinement.
    if let Some(corr) = lu.solve(&(b - a * center)) {
        center += corr;
    }

    // Re-orthonormalize to guard against accumulated numeric drift.
    let pose = CameraPose::new(rotation, center)?;
    Ok(PoseSolve {
        pose,
        condition_number,
        ill_conditioned: condition_number > 1e8,
    })
}

/// Orthogonal polar factor of a nonsingular 3x3 matrix by the scaled Newton
/// iteration `X <- (X + X^-T) / 2`.
fn polar_rotation(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let scale = m.norm();
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let mut x = m / scale;
    for _ in 0..60 {
        let inv_t = x.try_inverse()?.transpose();
        let next = (x + inv_t) * 0.5;
        let delta = (next - x).abs().max();
        x = next;
        if delta < 1e-15 {
            break;
        }
    }
    Some(x)
}

/// Geodesic distance on SO(3) in degrees:
/// `arccos(clamp((trace(Raᵀ Rb) - 1) / 2, -1, 1))`.
///
/// Evaluated in the equivalent atan2 form, which keeps full precision for
/// near-identical rotations where the arccos argument saturates at 1.
pub fn rotation_geodesic_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let q = ra.transpose() * rb;
    let cos_theta = ((q.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_theta = Vector3::new(
        q[(2, 1)] - q[(1, 2)],
        q[(0, 2)] - q[(2, 0)],
        q[(1, 0)] - q[(0, 1)],
    )
    .norm()
        * 0.5;
    sin_theta.atan2(cos_theta).to_degrees()
}

/// Mean center error after least-squares scale alignment, normalized by the
/// ground-truth furthest-view translation norm. Inputs are anchor-relative
/// camera centers of the evaluated (non-anchor) views.
pub fn translation_error_normalized(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    translation_error_impl(est, gt, true)
}

/// Same metric without the scale alignment, for side-by-side reporting.
pub fn translation_error_unaligned(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    translation_error_impl(est, gt, false)
}

fn translation_error_impl(est: &[Vector3<f64>], gt: &[Vector3<f64>], align: bool) -> Result<f64> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::contract(format!(
            "center counts differ: {} vs {}",
            est.len(),
            gt.len()
        )));
    }
    let furthest = gt.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if furthest <= 0.0 {
        return Err(Error::degenerate(
            "ground-truth furthest-view translation norm is zero",
        ));
    }
    let s = if align {
        let denom: f64 = est.iter().map(|c| c.norm_squared()).sum();
        if denom > 0.0 {
            est.iter().zip(gt).map(|(e, g)| e.dot(g)).sum::<f64>() / denom
        } else {
            0.0
        }
    } else {
        1.0
    };
    let mean_err: f64 =
        est.iter().zip(gt).map(|(e, g)| (e * s - g).norm()).sum::<f64>() / est.len() as f64;
    Ok(mean_err / furthest)
}

/// Difficulty bands over anchor-relative rotation angles, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Easy,
    Medium,
    Hard,
    Unclassified,
}

impl std::fmt::Display for Tier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Tier::Easy => "easy",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
            Tier::Unclassified => "unclassified",
        };
        f.write_str(s)
    }
}

/// Tier assignment together with the angles that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyTier {
    pub tier: Tier,
    pub theta_cond: f64,
    pub theta_target: f64,
}

pub fn classify_difficulty(theta_cond: f64, theta_target: f64) -> DifficultyTier {
    let tier = if theta_cond < 10.0 && theta_target < 10.0 {
        Tier::Easy
    } else if (10.0..30.0).contains(&theta_cond) && (10.0..30.0).contains(&theta_target) {
        Tier::Medium
    } else if (60.0..120.0).contains(&theta_cond) && (30.0..60.0).contains(&theta_target) {
        Tier::Hard
    } else {
        Tier::Unclassified
    };
    DifficultyTier {
        tier,
        theta_cond,
        theta_target,
    }
}
