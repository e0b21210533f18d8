//! Camera trajectory sampling: orbit rings, random viewpoints, and smooth
//! video-like paths with bounded per-step rotation.

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const ORBIT_RADIUS: f64 = 3.0;
pub const ORBIT_ELEVATION_DEG: f64 = 20.0;
pub const MAX_SMOOTH_STEP_DEG: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Orbit,
    Random,
    Smooth,
}

fn look_at_origin(az_rad: f64, el_rad: f64, radius: f64) -> CameraPose {
    let eye = Vector3::new(
        radius * el_rad.cos() * az_rad.cos(),
        radius * el_rad.sin(),
        radius * el_rad.cos() * az_rad.sin(),
    );
    CameraPose::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0))
}

/// Deterministic trajectory of `count` look-at-origin poses.
pub fn sample_trajectory(seed: u64, kind: TrajectoryKind, count: usize) -> Result<Vec<CameraPose>> {
    if count < 2 {
        return Err(Error::contract(format!(
            "trajectory needs at least 2 poses, got {count}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0xA24BAED4963EE407).wrapping_add(3));
    let poses = match kind {
        TrajectoryKind::Orbit => (0..count)
            .map(|i| {
                let az = (i as f64) * std::f64::consts::TAU / count as f64;
                look_at_origin(az, ORBIT_ELEVATION_DEG.to_radians(), ORBIT_RADIUS)
            })
            .collect(),
        TrajectoryKind::Random => (0..count)
            .map(|_| {
                let az = rng.gen_range(0.0..std::f64::consts::TAU);
                let el = rng.gen_range((-10f64).to_radians()..45f64.to_radians());
                let radius = rng.gen_range(2.5..3.5);
                look_at_origin(az, el, radius)
            })
            .collect(),
        TrajectoryKind::Smooth => {
            // Endpoint separation budgeted so that smoothstep interpolation
            // (max slope 1.5) keeps every step under the rotation cap.
            let budget = MAX_SMOOTH_STEP_DEG.to_radians() * (count as f64 - 1.0) / 1.5;
            let az0 = rng.gen_range(0.0..std::f64::consts::TAU);
            let el0 = rng.gen_range((-10f64).to_radians()..45f64.to_radians());
            let r0 = rng.gen_range(2.5..3.5);
            let daz = rng.gen_range(-0.55..0.55) * budget;
            let del_max = (0.25 * budget)
                .min(45f64.to_radians() - el0)
                .max(0.0);
            let del_min = (-0.25 * budget).max((-10f64).to_radians() - el0).min(0.0);
            let del = rng.gen_range(del_min..=del_max);
            let dr: f64 = rng.gen_range(-0.5..0.5);
            (0..count)
                .map(|i| {
                    let t = i as f64 / (count as f64 - 1.0);
                    let s = t * t * (3.0 - 2.0 * t);
                    look_at_origin(
                        az0 + daz * s,
                        el0 + del * s,
                        (r0 + dr * s).clamp(2.5, 3.5),
                    )
                })
                .collect()
        }
    };
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::rotation_geodesic_deg;

    #[test]
    fn orbit_gaps_are_exactly_uniform() {
        let poses = sample_trajectory(0, TrajectoryKind::Orbit, 36).unwrap();
        for i in 0..36 {
            let a = &poses[i];
            let b = &poses[(i + 1) % 36];
            let az_a = a.center.z.atan2(a.center.x);
            let az_b = b.center.z.atan2(b.center.x);
            let mut gap = (az_b - az_a).to_degrees();
            if gap < -180.0 {
                gap += 360.0;
            }
            assert!((gap - 10.0).abs() < 1e-9, "gap {gap}");
        }
    }

    #[test]
    fn all_kinds_produce_orthonormal_poses() {
        for kind in [
            TrajectoryKind::Orbit,
            TrajectoryKind::Random,
            TrajectoryKind::Smooth,
        ] {
            for seed in 0..5 {
                for pose in sample_trajectory(seed, kind, 12).unwrap() {
                    pose.validate().unwrap();
                }
            }
        }
    }

    #[test]
    fn smooth_steps_stay_under_rotation_cap() {
        for seed in 0..100 {
            let poses = sample_trajectory(seed, TrajectoryKind::Smooth, 40).unwrap();
            for pair in poses.windows(2) {
                let step = rotation_geodesic_deg(&pair[0].rotation, &pair[1].rotation);
                assert!(step <= MAX_SMOOTH_STEP_DEG, "seed {seed}: step {step}");
            }
        }
    }

    #[test]
    fn count_below_two_is_contract_error() {
        assert!(sample_trajectory(0, TrajectoryKind::Orbit, 1).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = sample_trajectory(9, TrajectoryKind::Random, 8).unwrap();
        let b = sample_trajectory(9, TrajectoryKind::Random, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.center, y.center);
            assert_eq!(x.rotation, y.rotation);
        }
    }
}
