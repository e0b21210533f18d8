//! Analytic raycast renderer: nearest primitive hit, Lambertian shading with
//! a 0.25 ambient term, vertical-gradient background.

use super::{Primitive, RenderedView, SceneSpec};
use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use nalgebra::Vector3;

const T_EPS: f64 = 1e-9;
pub const AMBIENT: f64 = 0.25;

pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub albedo: [f64; 3],
}

fn sphere_hit(center: &Vector3<f64>, radius: f64, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
    let oc = o - center;
    let b = oc.dot(d);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    if t0 > T_EPS {
        return Some(t0);
    }
    let t1 = -b + sq;
    if t1 > T_EPS {
        return Some(t1);
    }
    None
}

fn box_hit(min: &Vector3<f64>, max: &Vector3<f64>, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis_near = 0usize;
    let mut sign_near = 0.0f64;
    for axis in 0..3 {
        let (o_a, d_a) = (o[axis], d[axis]);
        if d_a.abs() < 1e-15 {
            if o_a < min[axis] || o_a > max[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d_a;
        let mut t0 = (min[axis] - o_a) * inv;
        let mut t1 = (max[axis] - o_a) * inv;
        let mut sign = -1.0;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
            sign = 1.0;
        }
        if t0 > t_near {
            t_near = t0;
            axis_near = axis;
            sign_near = sign;
        }
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > T_EPS {
        let mut n = Vector3::zeros();
        n[axis_near] = sign_near;
        Some((t_near, n))
    } else {
        None
    }
    // Rays starting inside the box are rejected by the camera precondition.
}

/// Nearest intersection along a world-space ray, including the ground disk.
pub fn trace(scene: &SceneSpec, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |hit: Hit| {
        if best.as_ref().map_or(true, |b| hit.t < b.t) {
            best = Some(hit);
        }
    };
    for p in &scene.primitives {
        match p {
            Primitive::Sphere(s) => {
                let c = Vector3::from(s.center);
                if let Some(t) = sphere_hit(&c, s.radius, o, d) {
                    let point = o + d * t;
                    consider(Hit {
                        t,
                        normal: (point - c) / s.radius,
                        albedo: s.albedo,
                    });
                }
            }
            Primitive::Box(b) => {
                let (mn, mx) = (Vector3::from(b.min), Vector3::from(b.max));
                if let Some((t, normal)) = box_hit(&mn, &mx, o, d) {
                    consider(Hit {
                        t,
                        normal,
                        albedo: b.albedo,
                    });
                }
            }
        }
    }
    // Ground disk at y = height.
    let g = &scene.ground;
    if d.y.abs() > 1e-15 {
        let t = (g.height - o.y) / d.y;
        if t > T_EPS {
            let p = o + d * t;
            if p.x * p.x + p.z * p.z <= g.radius * g.radius {
                let parity = ((p.x / g.cell).floor() as i64 + (p.z / g.cell).floor() as i64)
                    .rem_euclid(2);
                let albedo = if parity == 0 { g.albedo_a } else { g.albedo_b };
                consider(Hit {
                    t,
                    normal: Vector3::new(0.0, 1.0, 0.0),
                    albedo,
                });
            }
        }
    }
    best
}

fn camera_inside_primitive(scene: &SceneSpec, c: &Vector3<f64>) -> bool {
    scene.primitives.iter().any(|p| match p {
        Primitive::Sphere(s) => (c - Vector3::from(s.center)).norm() <= s.radius,
        Primitive::Box(b) => (0..3).all(|i| b.min[i] <= c[i] && c[i] <= b.max[i]),
    })
}

fn background_color(scene: &SceneSpec, d: &Vector3<f64>) -> [f64; 3] {
    let mix = (0.5 * (d.y + 1.0)).clamp(0.0, 1.0);
    let (b, t) = (&scene.background.bottom, &scene.background.top);
    [
        b[0] + (t[0] - b[0]) * mix,
        b[1] + (t[1] - b[1]) * mix,
        b[2] + (t[2] - b[2]) * mix,
    ]
}

/// Raycast one pinhole view. Deterministic and pure.
pub fn render(
    scene: &SceneSpec,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    height: usize,
    width: usize,
) -> Result<RenderedView> {
    if camera_inside_primitive(scene, &pose.center) {
        return Err(Error::config("camera is inside a scene primitive"));
    }
    let ks = k.rescaled(width, height);
    let light = Vector3::from(scene.light_dir);
    let forward = pose.forward();
    let hw = height * width;
    let mut image = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; hw];
    for v in 0..height {
        for u in 0..width {
            let d = (pose.rotation * ks.ray_cam(u, v)).normalize();
            let i = v * width + u;
            let rgb = match trace(scene, &pose.center, &d) {
                Some(hit) => {
                    let p = pose.center + d * hit.t;
                    depth[i] = (p - pose.center).dot(&forward);
                    let lambert = hit.normal.dot(&light).max(0.0);
                    let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
                    [
                        hit.albedo[0] * shade,
                        hit.albedo[1] * shade,
                        hit.albedo[2] * shade,
                    ]
                }
                None => background_color(scene, &d),
            };
            for ch in 0..3 {
                image[ch * hw + i] = rgb[ch] * 2.0 - 1.0;
            }
        }
    }
    Ok(RenderedView {
        image: Tensor::from_vec(&[3, height, width], image)?,
        depth: Tensor::from_vec(&[height, width], depth)?,
        pose: *pose,
        intrinsics: ks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_scene, Background, GroundPlane, Sphere};
    use nalgebra::Matrix3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn k33() -> CameraIntrinsics {
        CameraIntrinsics::new(28.0, 28.0, 16.5, 16.5, 33, 33).unwrap()
    }

    #[test]
    fn looking_away_gives_background_and_zero_depth() {
        let scene = gen_scene(3);
        // Scene content and ground live below/around the origin; look straight up.
        let pose = CameraPose::look_at(
            nalgebra::Vector3::new(0.0, 0.5, -3.0),
            nalgebra::Vector3::new(0.0, 40.0, -3.0),
            nalgebra::Vector3::new(0.0, 0.0, 1.0),
        );
        let view = render(&scene, &k33(), &pose, 16, 16).unwrap();
        assert!(view.depth.data().iter().all(|&d| d == 0.0));
        // Vertical gradient only; all values in [-1, 1].
        assert!(view.image.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn unit_sphere_center_depth_is_two() {
        let scene = SceneSpec {
            seed: 0,
            primitives: vec![
                Primitive::Sphere(Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 1.0,
                    albedo: [0.8, 0.2, 0.2],
                }),
                // Padding so the spec would validate; irrelevant to the ray.
                Primitive::Sphere(Sphere {
                    center: [0.0, -0.8, 0.0],
                    radius: 0.1,
                    albedo: [0.5; 3],
                }),
                Primitive::Sphere(Sphere {
                    center: [0.8, 0.0, 0.0],
                    radius: 0.1,
                    albedo: [0.5; 3],
                }),
            ],
            ground: GroundPlane {
                height: -50.0,
                albedo_a: [0.5; 3],
                albedo_b: [0.2; 3],
                cell: 0.5,
                radius: 1.0,
            },
            background: Background {
                bottom: [0.0; 3],
                top: [1.0; 3],
            },
            light_dir: [0.0, 1.0, 0.0],
        };
        let pose = CameraPose {
            rotation: Matrix3::identity(),
            center: nalgebra::Vector3::new(0.0, 0.0, -3.0),
        };
        let view = render(&scene, &k33(), &pose, 33, 33).unwrap();
        let d = view.depth.at(&[16, 16]);
        assert!((d - 2.0).abs() < 1e-6, "center depth {d}");
    }

    #[test]
    fn camera_inside_primitive_is_config_error() {
        let scene = gen_scene(1);
        let inside = match &scene.primitives[0] {
            Primitive::Sphere(s) => nalgebra::Vector3::from(s.center),
            Primitive::Box(b) => {
                (nalgebra::Vector3::from(b.min) + nalgebra::Vector3::from(b.max)) * 0.5
            }
        };
        let pose = CameraPose {
            rotation: Matrix3::identity(),
            center: inside,
        };
        assert!(matches!(
            render(&scene, &k33(), &pose, 8, 8),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn render_is_deterministic() {
        let scene = gen_scene(9);
        let pose = CameraPose::look_at(
            nalgebra::Vector3::new(2.0, 1.0, -2.0),
            nalgebra::Vector3::zeros(),
            nalgebra::Vector3::new(0.0, 1.0, 0.0),
        );
        let a = render(&scene, &k33(), &pose, 24, 24).unwrap();
        let b = render(&scene, &k33(), &pose, 24, 24).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.depth.data(), b.depth.data());
    }

    // Independent brute-force intersector: spheres via explicit quadratic in
    // a different arrangement, boxes via all six face planes.
    fn brute_force_depth(
        scene: &SceneSpec,
        k: &CameraIntrinsics,
        pose: &CameraPose,
        v: usize,
        u: usize,
    ) -> f64 {
        let d = (pose.rotation * k.ray_cam(u, v)).normalize();
        let o = pose.center;
        let mut best = f64::INFINITY;
        for p in &scene.primitives {
            match p {
                Primitive::Sphere(s) => {
                    let c = nalgebra::Vector3::from(s.center);
                    // |o + t d - c|^2 = r^2 expanded with a=1.
                    let b = 2.0 * d.dot(&(o - c));
                    let cc = (o - c).norm_squared() - s.radius * s.radius;
                    let disc = b * b - 4.0 * cc;
                    if disc >= 0.0 {
                        for t in [(-b - disc.sqrt()) / 2.0, (-b + disc.sqrt()) / 2.0] {
                            if t > 1e-9 && t < best {
                                best = t;
                            }
                        }
                    }
                }
                Primitive::Box(bx) => {
                    for axis in 0..3 {
                        for plane in [bx.min[axis], bx.max[axis]] {
                            if d[axis].abs() < 1e-15 {
                                continue;
                            }
                            let t = (plane - o[axis]) / d[axis];
                            if t <= 1e-9 || t >= best {
                                continue;
                            }
                            let hit = o + d * t;
                            let inside = (0..3).all(|i| {
                                i == axis
                                    || (bx.min[i] - 1e-12 <= hit[i] && hit[i] <= bx.max[i] + 1e-12)
                            });
                            if inside {
                                best = t;
                            }
                        }
                    }
                }
            }
        }
        let g = &scene.ground;
        if d.y.abs() > 1e-15 {
            let t = (g.height - o.y) / d.y;
            if t > 1e-9 && t < best {
                let p = o + d * t;
                if p.x * p.x + p.z * p.z <= g.radius * g.radius {
                    best = t;
                }
            }
        }
        if best.is_finite() {
            let p = o + d * best;
            (p - o).dot(&pose.forward())
        } else {
            0.0
        }
    }

    #[test]
    fn depth_matches_brute_force_on_random_scenes() {
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        for s in 0..10 {
            let scene = gen_scene(1000 + s);
            let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let el: f64 = rng.gen_range(-0.2..0.7);
            let eye = nalgebra::Vector3::new(
                3.0 * el.cos() * az.cos(),
                3.0 * el.sin(),
                3.0 * el.cos() * az.sin(),
            );
            let pose = CameraPose::look_at(
                eye,
                nalgebra::Vector3::zeros(),
                nalgebra::Vector3::new(0.0, 1.0, 0.0),
            );
            let k = CameraIntrinsics::from_fov(60.0, 16, 16).unwrap();
            let view = render(&scene, &k, &pose, 16, 16).unwrap();
            for v in 0..16 {
                for u in 0..16 {
                    let want = brute_force_depth(&scene, &k, &pose, v, u);
                    let got = view.depth.at(&[v, u]);
                    assert!(
                        (want - got).abs() < 1e-9,
                        "scene {s} pixel ({v},{u}): {got} vs {want}"
                    );
                }
            }
        }
    }
}
