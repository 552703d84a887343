//! Synthetic scenes with known ground truth.
//!
//! Segments are unit balls stacked along the world `z` axis, four units apart.
//! Cameras sit on a rig around the origin, far enough away that no two
//! segments overlap in any image, so every rendered mask is exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::metrics::ImageBuffer;
use crate::scene_io::{
    save_mask, write_colmap_dir, write_embedding, write_ply, CameraIntrinsics, CameraPose, ColmapError,
    EmbeddingVector, Keypoint, MaskError, ModelFormat, SceneModel, ScenePoint, SegmentMask, TrackElement,
};
use crate::segment_fusion::project_point;

pub const SEGMENT_SPACING: f64 = 4.0;
/// Extra outlier radius range above the minimum, as a factor.
const OUTLIER_SPREAD: f64 = 1.5;
const EMBEDDING_DIM: usize = 64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{n_points} points cannot fill {n_segments} segments of at least 5 points")]
    TooFewPoints { n_points: usize, n_segments: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Embedding(#[from] crate::scene_io::EmbeddingError),
    #[error(transparent)]
    Ply(#[from] crate::scene_io::PlyError),
    #[error("{path}: {message}")]
    Write { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraRig {
    #[default]
    Ring,
    Sphere,
    TwoRings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthConfig {
    pub n_cameras: usize,
    pub camera_rig: CameraRig,
    /// Inlier count.
    pub n_points: usize,
    pub n_segments: usize,
    /// Outliers injected, as a fraction of `n_points`.
    pub outlier_fraction: f64,
    pub outlier_radius_multiplier: f64,
    pub seed: u64,
    pub image_size: (u32, u32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cameras: 24,
            camera_rig: CameraRig::Ring,
            n_points: 1000,
            n_segments: 8,
            outlier_fraction: 0.05,
            outlier_radius_multiplier: 10.0,
            seed: 0,
            image_size: (640, 480),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_points < self.n_segments * 5 {
            return Err(SynthError::TooFewPoints { n_points: self.n_points, n_segments: self.n_segments });
        }
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.n_segments == 0 || self.n_segments > usize::from(u16::MAX) {
            return bad("n_segments must be in [1, 65535]");
        }
        if self.n_cameras == 0 {
            return bad("n_cameras must be positive");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must be in [0, 1]");
        }
        if self.outlier_radius_multiplier.is_nan() || self.outlier_radius_multiplier <= 1.0 {
            return bad("outlier_radius_multiplier must exceed 1");
        }
        if self.image_size.0 < 16 || self.image_size.1 < 16 {
            return bad("image_size must be at least 16x16");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene: SceneModel,
    pub true_outlier_ids: BTreeSet<u64>,
    /// Segment index of every inlier.
    pub true_segment_of_point: BTreeMap<u64, u32>,
    /// One mask per view, in view order.
    pub masks: Vec<SegmentMask>,
    /// Local mask label of each segment, per view.
    pub local_labels: BTreeMap<String, Vec<u16>>,
}

pub fn segment_center(segment: usize, n_segments: usize) -> Vector3<f64> {
    let offset = (segment as f64 - (n_segments as f64 - 1.0) / 2.0) * SEGMENT_SPACING;
    Vector3::new(0.0, 0.0, offset)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn in_unit_ball(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    random_unit(rng) * rng.random::<f64>().cbrt()
}

/// World-to-camera pose looking from `center` at the origin, `+z` forward and `y` down.
pub fn look_at(image_id: u32, name: &str, center: Vector3<f64>, camera_id: u32) -> CameraPose {
    let f = (-center).normalize();
    let up = if f.cross(&Vector3::z()).norm() < 1e-6 { Vector3::y() } else { Vector3::z() };
    let r = f.cross(&up).normalize();
    let d = f.cross(&r);
    let rot = Matrix3::from_rows(&[r.transpose(), d.transpose(), f.transpose()]);
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let t = -(q * center);
    CameraPose::new(image_id, name, q, t, camera_id)
}

fn rig_centers(rig: CameraRig, n: usize, distance: f64) -> Vec<Vector3<f64>> {
    let at = |azimuth: f64, elevation: f64| {
        Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin()) * distance
    };
    let tau = std::f64::consts::TAU;
    match rig {
        CameraRig::Ring => (0..n).map(|i| at(tau * i as f64 / n as f64, 0.0)).collect(),
        CameraRig::TwoRings => (0..n)
            .map(|i| {
                let ring = (i % 2) as f64;
                let elevation = (20f64).to_radians() * (1.0 - 2.0 * ring);
                at(tau * (i / 2) as f64 / n.div_ceil(2) as f64 + ring * 0.3, elevation)
            })
            .collect(),
        CameraRig::Sphere => {
            // Golden-angle spiral over a band of elevations that keeps segments apart.
            let band = (35f64).to_radians().sin();
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let s = if n == 1 { 0.0 } else { band * (2.0 * i as f64 / (n - 1) as f64 - 1.0) };
                    at(golden * i as f64, s.asin())
                })
                .collect()
        }
    }
}

pub fn view_name(index: usize) -> String {
    format!("view_{index:03}")
}

/// Builds a scene, its ground truth and exact masks. Deterministic in `config.seed`.
pub fn make_scene(config: &SynthConfig) -> Result<GroundTruth, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = config.image_size;

    // Inliers, split as evenly as possible over segments.
    let mut positions = Vec::with_capacity(config.n_points);
    let mut segment_of = Vec::with_capacity(config.n_points);
    for i in 0..config.n_points {
        let s = i % config.n_segments;
        positions.push(segment_center(s, config.n_segments) + in_unit_ball(&mut rng));
        segment_of.push(s as u32);
    }
    let palette: Vec<[u8; 3]> = (0..config.n_segments)
        .map(|_| [rng.random_range(40..216), rng.random_range(40..216), rng.random_range(40..216)])
        .collect();

    let inlier_radius = positions.iter().map(|p| p.norm()).fold(0.0, f64::max);
    let extent = segment_center(config.n_segments - 1, config.n_segments).z + 1.0;
    let distance = 4.0 * extent.max(1.0);
    let centers = rig_centers(config.camera_rig, config.n_cameras, distance);
    // Fit the whole stack into the shorter image side with margin.
    let focal = 0.8 * f64::from(w.min(h)) / 2.0 * (distance - extent) / extent;
    let camera = CameraIntrinsics::pinhole(1, w, h, focal, focal, f64::from(w) / 2.0, f64::from(h) / 2.0);
    let mut views: Vec<CameraPose> =
        centers.iter().enumerate().map(|(i, c)| look_at(i as u32 + 1, &view_name(i), *c, 1)).collect();

    let n_outliers = (config.outlier_fraction * config.n_points as f64).round() as usize;
    let mut points: Vec<ScenePoint> = Vec::with_capacity(config.n_points + n_outliers);
    let mut true_segment_of_point = BTreeMap::new();
    for (i, (p, &s)) in positions.iter().zip(&segment_of).enumerate() {
        let id = i as u64 + 1;
        let jitter = |rng: &mut ChaCha8Rng, c: u8| (i32::from(c) + rng.random_range(-20..=20)).clamp(0, 255) as u8;
        let base = palette[s as usize];
        let color = [jitter(&mut rng, base[0]), jitter(&mut rng, base[1]), jitter(&mut rng, base[2])];
        let mut sp = ScenePoint::new(id, *p, color);
        sp.reprojection_error = rng.random_range(0.1..1.0);
        points.push(sp);
        true_segment_of_point.insert(id, s);
    }
    let mut true_outlier_ids = BTreeSet::new();
    for j in 0..n_outliers {
        let id = (config.n_points + j) as u64 + 1;
        let r = inlier_radius * config.outlier_radius_multiplier * rng.random_range(1.0..OUTLIER_SPREAD);
        let mut sp = ScenePoint::new(id, random_unit(&mut rng) * r, [rng.random(), rng.random(), rng.random()]);
        sp.reprojection_error = rng.random_range(0.5..2.0);
        points.push(sp);
        true_outlier_ids.insert(id);
    }

    // Observations: inliers are tracked in every view they project into,
    // outliers in exactly one view.
    for view in views.iter_mut() {
        for pt in points.iter_mut() {
            if true_outlier_ids.contains(&pt.point_id) {
                continue;
            }
            if let Some(proj) = project_point(&pt.position, &camera, view, false) {
                pt.track.push(TrackElement { image_id: view.image_id, point2d_idx: view.keypoints.len() as u32 });
                view.keypoints.push(Keypoint { xy: [proj.pixel.x, proj.pixel.y], point3d_id: Some(pt.point_id) });
            }
        }
    }
    for pt in points.iter_mut().filter(|p| true_outlier_ids.contains(&p.point_id)) {
        let vi = rng.random_range(0..views.len());
        let view = &mut views[vi];
        let xy = project_point(&pt.position, &camera, view, false).map_or([0.0, 0.0], |p| [p.pixel.x, p.pixel.y]);
        pt.track.push(TrackElement { image_id: view.image_id, point2d_idx: view.keypoints.len() as u32 });
        view.keypoints.push(Keypoint { xy, point3d_id: Some(pt.point_id) });
    }

    let mut masks = Vec::with_capacity(views.len());
    let mut local_labels = BTreeMap::new();
    for view in &views {
        let mut perm: Vec<u16> = (1..=config.n_segments as u16).collect();
        perm.shuffle(&mut rng);
        let inliers = positions.iter().zip(&segment_of).map(|(p, &s)| (p, perm[s as usize]));
        masks.push(render_mask(&view.view_name, &camera, view, inliers));
        local_labels.insert(view.view_name.clone(), perm);
    }

    let scene = SceneModel { cameras: BTreeMap::from([(1, camera)]), views, points };
    Ok(GroundTruth { scene, true_outlier_ids, true_segment_of_point, masks, local_labels })
}

/// Z-buffered projection cells, then a one-pixel dilation into unlabeled pixels.
fn render_mask<'a>(
    name: &str,
    camera: &CameraIntrinsics,
    pose: &CameraPose,
    points: impl Iterator<Item = (&'a Vector3<f64>, u16)>,
) -> SegmentMask {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut cells = vec![0u16; w * h];
    for (p, label) in points {
        if let Some(proj) = project_point(p, camera, pose, false) {
            let idx = proj.pixel.y.floor() as usize * w + proj.pixel.x.floor() as usize;
            if proj.depth < depth[idx] {
                depth[idx] = proj.depth;
                cells[idx] = label;
            }
        }
    }
    let mut labels = cells.clone();
    for y in 0..h {
        for x in 0..w {
            if cells[y * w + x] != 0 {
                continue;
            }
            let neighbor = (-1i64..=1)
                .flat_map(|dy| (-1i64..=1).map(move |dx| (dx, dy)))
                .filter_map(|(dx, dy)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
                        .then(|| cells[ny as usize * w + nx as usize])
                })
                .filter(|&l| l != 0)
                .min();
            if let Some(l) = neighbor {
                labels[y * w + x] = l;
            }
        }
    }
    SegmentMask::from_raster(name, camera.width, camera.height, labels)
}

/// A ground-truth image and a perturbed render of it, plus matching embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub view_name: String,
    pub gt: ImageBuffer,
    pub render: ImageBuffer,
    pub gt_embedding: EmbeddingVector,
    pub render_embedding: EmbeddingVector,
}

/// Gray images derived from masks, with seeded noise on the render side.
pub fn eval_pairs(truth: &GroundTruth, count: usize, seed: u64) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    truth
        .masks
        .iter()
        .take(count)
        .map(|m| {
            let max = m.labels().iter().copied().max().unwrap_or(0).max(1);
            let gt: Vec<f64> = m.labels().iter().map(|&l| f64::from(l) / f64::from(max) * 0.8 + 0.1).collect();
            let render: Vec<f64> = gt.iter().map(|v| (v + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)).collect();
            let e: Vec<f32> = (0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            let e_r: Vec<f32> = e.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            EvalPair {
                view_name: m.view_name.clone(),
                gt: ImageBuffer::new(m.width, m.height, 1, gt).expect("values in range"),
                render: ImageBuffer::new(m.width, m.height, 1, render).expect("values in range"),
                gt_embedding: EmbeddingVector::new(e).expect("finite"),
                render_embedding: EmbeddingVector::new(e_r).expect("finite"),
            }
        })
        .collect()
}

fn save_gray16(img: &ImageBuffer, path: &Path) -> Result<(), SynthError> {
    let raw: Vec<u16> = img.values().iter().map(|v| (v * 65535.0).round() as u16).collect();
    let buf =
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(img.width(), img.height(), raw).expect("size matches");
    buf.save(path).map_err(|e| SynthError::Write { path: path.display().to_string(), message: e.to_string() })
}

fn write_text(path: &Path, text: &str) -> Result<(), SynthError> {
    fs::write(path, text).map_err(|e| SynthError::Write { path: path.display().to_string(), message: e.to_string() })
}

fn mkdir(path: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(path).map_err(|e| SynthError::Write { path: path.display().to_string(), message: e.to_string() })
}

/// Ground truth as text: one `point_id segment|outlier` record per line.
pub fn encode_ground_truth(truth: &GroundTruth) -> String {
    let mut s = String::from("# point_id segment (-1 = outlier)\n");
    for p in &truth.scene.points {
        let seg = truth.true_segment_of_point.get(&p.point_id).map_or(-1, |&s| i64::from(s));
        let _ = writeln!(s, "{} {seg}", p.point_id);
    }
    s
}

/// Writes `sparse/` (COLMAP text), `masks/`, `ground_truth.txt`, `reference.ply`
/// (the true inliers), and `images/{gt,render}` plus `embeddings/{gt,render}` for `n_eval` views.
pub fn write_dataset(truth: &GroundTruth, dir: &Path, n_eval: usize, seed: u64) -> Result<(), SynthError> {
    write_colmap_dir(&truth.scene, &dir.join("sparse"), ModelFormat::Text)?;
    let masks = dir.join("masks");
    mkdir(&masks)?;
    for m in &truth.masks {
        save_mask(m, &masks.join(format!("{}.png", m.view_name)))?;
    }
    write_text(&dir.join("ground_truth.txt"), &encode_ground_truth(truth))?;
    let inliers: Vec<ScenePoint> =
        truth.scene.points.iter().filter(|p| !truth.true_outlier_ids.contains(&p.point_id)).cloned().collect();
    write_ply(&inliers, &dir.join("reference.ply"))?;
    for sub in ["images/gt", "images/render", "embeddings/gt", "embeddings/render"] {
        mkdir(&dir.join(sub))?;
    }
    for pair in eval_pairs(truth, n_eval, seed) {
        save_gray16(&pair.gt, &dir.join("images/gt").join(format!("{}.png", pair.view_name)))?;
        save_gray16(&pair.render, &dir.join("images/render").join(format!("{}.png", pair.view_name)))?;
        write_embedding(&pair.gt_embedding, &dir.join("embeddings/gt").join(format!("{}.emb", pair.view_name)))?;
        write_embedding(
            &pair.render_embedding,
            &dir.join("embeddings/render").join(format!("{}.emb", pair.view_name)),
        )?;
    }
    Ok(())
}
