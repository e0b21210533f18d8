//! On-disk dataset: per scene, a smooth frame sequence plus orbit and random
//! view sets, with depths, poses, intrinsics, and JSON metadata.

use super::render::render;
use super::trajectory::{sample_trajectory, TrajectoryKind};
use super::{gen_scene, RenderedView, SceneSpec};
use crate::camera::{CameraIntrinsics, CameraPose};
use crate::error::{Error, Result};
use crate::nvcb::{NvcbContainer, NvcbEntry};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub resolution: usize,
    /// Smooth-trajectory frame count per scene.
    pub t_max: usize,
    #[serde(default = "default_orbit_views")]
    pub orbit_views: usize,
    #[serde(default = "default_random_views")]
    pub random_views: usize,
    #[serde(default = "default_fov")]
    pub fov_deg: f64,
    #[serde(default)]
    pub write_previews: bool,
}

fn default_orbit_views() -> usize {
    36
}
fn default_random_views() -> usize {
    32
}
fn default_fov() -> f64 {
    60.0
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.t_max < 2 || self.resolution < 4 {
            return Err(Error::config(format!(
                "invalid dataset config: scenes {}, t_max {}, resolution {}",
                self.scenes, self.t_max, self.resolution
            )));
        }
        if self.orbit_views < 2 || self.random_views < 2 {
            return Err(Error::config("orbit/random view counts must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SetMeta {
    pub count: usize,
    /// Row-major 3x4 camera-to-world matrices.
    pub poses: Vec<[[f64; 4]; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub spec: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub resolution: usize,
    pub frame_count: usize,
    pub sets: BTreeMap<String, SetMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub seed: u64,
    pub scene_dirs: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetSummary {
    pub scenes: usize,
    pub total_frames: usize,
    pub root: PathBuf,
}

fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed
        .wrapping_mul(0x9E3779B97F4A7C15)
        .wrapping_add(index as u64)
}

fn render_set(
    scene: &SceneSpec,
    k: &CameraIntrinsics,
    poses: &[CameraPose],
    res: usize,
) -> Result<Vec<RenderedView>> {
    poses.iter().map(|p| render(scene, k, p, res, res)).collect()
}

fn views_to_entries(name: &str, views: &[RenderedView], res: usize) -> Vec<NvcbEntry> {
    let t = views.len();
    let mut images = Vec::with_capacity(t * 3 * res * res);
    let mut depths = Vec::with_capacity(t * res * res);
    for v in views {
        images.extend(v.image.data().iter().map(|&x| x as f32));
        depths.extend(v.depth.data().iter().map(|&x| x as f32));
    }
    vec![
        NvcbEntry::f32(format!("{name}_images"), &[t, 3, res, res], images),
        NvcbEntry::f32(format!("{name}_depths"), &[t, res, res], depths),
    ]
}

/// Generate and write the dataset. Deterministic for a given seed.
pub fn build_dataset(config: &DatasetConfig, seed: u64, out: &Path) -> Result<DatasetSummary> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let k = CameraIntrinsics::from_fov(config.fov_deg, config.resolution, config.resolution)?;
    let mut scene_dirs = Vec::with_capacity(config.scenes);
    let mut total_frames = 0usize;
    for i in 0..config.scenes {
        let sseed = scene_seed(seed, i);
        let spec = gen_scene(sseed);
        let dir_name = format!("scene_{i:04}");
        let dir = out.join(&dir_name);
        std::fs::create_dir_all(&dir)?;

        let smooth = sample_trajectory(sseed ^ 0x51, TrajectoryKind::Smooth, config.t_max)?;
        let orbit = sample_trajectory(sseed ^ 0x0b, TrajectoryKind::Orbit, config.orbit_views)?;
        let random = sample_trajectory(sseed ^ 0xa7, TrajectoryKind::Random, config.random_views)?;

        let mut sets = BTreeMap::new();
        let mut container = NvcbContainer::new();
        for (name, poses) in [("smooth", &smooth), ("orbit", &orbit), ("random", &random)] {
            let views = render_set(&spec, &k, poses, config.resolution)?;
            for entry in views_to_entries(name, &views, config.resolution) {
                container.push(entry)?;
            }
            sets.insert(
                name.to_string(),
                SetMeta {
                    count: poses.len(),
                    poses: poses.iter().map(|p| p.to_rows()).collect(),
                },
            );
            total_frames += views.len();
            if config.write_previews && name == "smooth" {
                write_preview(&views[0], &dir.join("preview.png"))?;
            }
        }
        container.write_file(&dir.join("views.nvcb"))?;
        let meta = SceneMeta {
            seed: sseed,
            spec,
            intrinsics: k,
            resolution: config.resolution,
            frame_count: config.t_max,
            sets,
        };
        write_json_atomic(&dir.join("meta.json"), &meta)?;
        scene_dirs.push(dir_name);
    }
    let meta = DatasetMeta {
        config: config.clone(),
        seed,
        scene_dirs,
    };
    write_json_atomic(&out.join("meta.json"), &meta)?;
    Ok(DatasetSummary {
        scenes: config.scenes,
        total_frames,
        root: out.to_path_buf(),
    })
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// 8-bit PNG preview of a rendered view.
pub fn write_preview(view: &RenderedView, path: &Path) -> Result<()> {
    let (h, w) = (view.height(), view.width());
    let hw = h * w;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = [0, 1, 2].map(|c| {
                let v = (view.image.data()[c * hw + i] + 1.0) * 0.5;
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("png write failed: {e}")))?;
    Ok(())
}

/// One scene loaded back from disk, with f64 tensors reconstructed.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub meta: SceneMeta,
    pub smooth: Vec<RenderedView>,
    pub orbit: Vec<RenderedView>,
    pub random: Vec<RenderedView>,
}

pub fn load_dataset_meta(root: &Path) -> Result<DatasetMeta> {
    let bytes = std::fs::read(root.join("meta.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let meta: SceneMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    let container = NvcbContainer::read_file(&dir.join("views.nvcb"))?;
    let res = meta.resolution;
    let mut sets: BTreeMap<String, Vec<RenderedView>> = BTreeMap::new();
    for (name, set_meta) in &meta.sets {
        let images = container
            .get(&format!("{name}_images"))
            .ok_or_else(|| Error::Format(format!("missing {name}_images")))?
            .data
            .to_f64();
        let depths = container
            .get(&format!("{name}_depths"))
            .ok_or_else(|| Error::Format(format!("missing {name}_depths")))?
            .data
            .to_f64();
        let per_img = 3 * res * res;
        let per_depth = res * res;
        let mut views = Vec::with_capacity(set_meta.count);
        for (i, rows) in set_meta.poses.iter().enumerate() {
            let pose = CameraPose::from_rows(rows)?;
            views.push(RenderedView {
                image: Tensor::from_vec(
                    &[3, res, res],
                    images[i * per_img..(i + 1) * per_img].to_vec(),
                )?,
                depth: Tensor::from_vec(
                    &[res, res],
                    depths[i * per_depth..(i + 1) * per_depth].to_vec(),
                )?,
                pose,
                intrinsics: meta.intrinsics,
            });
        }
        sets.insert(name.clone(), views);
    }
    Ok(SceneData {
        smooth: sets.remove("smooth").unwrap_or_default(),
        orbit: sets.remove("orbit").unwrap_or_default(),
        random: sets.remove("random").unwrap_or_default(),
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn tiny_config() -> DatasetConfig {
        DatasetConfig {
            scenes: 2,
            resolution: 8,
            t_max: 6,
            orbit_views: 4,
            random_views: 4,
            fov_deg: 60.0,
            write_previews: false,
        }
    }

    fn dir_checksums(root: &Path) -> BTreeMap<String, [u8; 32]> {
        let mut out = BTreeMap::new();
        for entry in walk(root) {
            let rel = entry.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let bytes = std::fs::read(&entry).unwrap();
            let mut h = Sha256::new();
            h.update(&bytes);
            out.insert(rel, h.finalize().into());
        }
        out
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        files
    }

    #[test]
    fn layout_counts_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let a_dir = tmp.path().join("a");
        let b_dir = tmp.path().join("b");
        let cfg = tiny_config();
        let summary = build_dataset(&cfg, 7, &a_dir).unwrap();
        assert_eq!(summary.scenes, 2);
        assert_eq!(summary.total_frames, 2 * (6 + 4 + 4));
        let scene = load_scene(&a_dir.join("scene_0000")).unwrap();
        assert_eq!(scene.smooth.len(), 6);
        assert_eq!(scene.orbit.len(), 4);
        assert_eq!(scene.random.len(), 4);

        build_dataset(&cfg, 7, &b_dir).unwrap();
        assert_eq!(dir_checksums(&a_dir), dir_checksums(&b_dir));
    }

    #[test]
    fn different_seed_changes_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let a_dir = tmp.path().join("a");
        let b_dir = tmp.path().join("b");
        let cfg = tiny_config();
        build_dataset(&cfg, 7, &a_dir).unwrap();
        build_dataset(&cfg, 8, &b_dir).unwrap();
        assert_ne!(dir_checksums(&a_dir), dir_checksums(&b_dir));
    }

    #[test]
    fn poses_round_trip_through_serialization() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        build_dataset(&cfg, 3, tmp.path()).unwrap();
        for i in 0..cfg.scenes {
            let dir = tmp.path().join(format!("scene_{i:04}"));
            let scene = load_scene(&dir).unwrap();
            let sseed = scene.meta.seed;
            let fresh =
                sample_trajectory(sseed ^ 0x51, TrajectoryKind::Smooth, cfg.t_max).unwrap();
            for (stored, orig) in scene.smooth.iter().zip(&fresh) {
                assert!((stored.pose.rotation - orig.rotation).abs().max() < 1e-12);
                assert!((stored.pose.center - orig.center).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn images_in_range_and_depths_nonnegative() {
        let tmp = tempfile::tempdir().unwrap();
        build_dataset(&tiny_config(), 11, tmp.path()).unwrap();
        let scene = load_scene(&tmp.path().join("scene_0001")).unwrap();
        for view in scene.smooth.iter().chain(&scene.orbit).chain(&scene.random) {
            assert!(view
                .image
                .data()
                .iter()
                .all(|&v| (-1.0..=1.0).contains(&v) && v.is_finite()));
            assert!(view.depth.data().iter().all(|&d| d >= 0.0 && d.is_finite()));
        }
    }
}
