//! Readers and writers for everything that crosses the process boundary:
//! COLMAP sparse models, PLY point clouds, segment-mask rasters and
//! embedding vectors.
//!
//! All parsers are pure functions of their input bytes.

pub mod colmap;
pub mod embedding;
pub mod mask;
pub mod ply;

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3};

pub use colmap::{parse_colmap_model, read_colmap_dir, write_colmap_dir, ColmapError, ModelFormat};
pub use embedding::{load_embedding, read_embedding, write_embedding, EmbeddingError, EmbeddingVector};
pub use mask::{load_mask, save_mask, sidecar_path, BBox, LoadedMask, MaskError, SegmentMask};
pub use ply::{read_ply, read_ply_cloud, write_labeled_ply, write_ply, PlyCloud, PlyError};

/// Camera models the toolkit can project with. Distortion models are rejected at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraModelKind {
    SimplePinhole,
    Pinhole,
}

impl CameraModelKind {
    pub fn colmap_id(self) -> i32 {
        match self {
            CameraModelKind::SimplePinhole => 0,
            CameraModelKind::Pinhole => 1,
        }
    }

    pub fn colmap_name(self) -> &'static str {
        match self {
            CameraModelKind::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModelKind::Pinhole => "PINHOLE",
        }
    }

    pub fn num_params(self) -> usize {
        match self {
            CameraModelKind::SimplePinhole => 3,
            CameraModelKind::Pinhole => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraIntrinsics {
    pub camera_id: u32,
    pub model: CameraModelKind,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn pinhole(camera_id: u32, width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { camera_id, model: CameraModelKind::Pinhole, width, height, fx, fy, cx, cy }
    }

    pub fn is_valid(&self) -> bool {
        self.width > 0
            && self.height > 0
            && self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite()
    }

    pub fn params(&self) -> Vec<f64> {
        match self.model {
            CameraModelKind::SimplePinhole => vec![self.fx, self.cx, self.cy],
            CameraModelKind::Pinhole => vec![self.fx, self.fy, self.cx, self.cy],
        }
    }
}

/// A 2D observation stored with a registered view. `point3d_id` is `None`
/// for keypoints that were never triangulated.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    pub xy: [f64; 2],
    pub point3d_id: Option<u64>,
}

/// World-to-camera pose of one registered view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub image_id: u32,
    pub view_name: String,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub camera_id: u32,
    pub keypoints: Vec<Keypoint>,
}

impl CameraPose {
    pub fn new(
        image_id: u32,
        view_name: impl Into<String>,
        rotation: UnitQuaternion<f64>,
        translation: Vector3<f64>,
        camera_id: u32,
    ) -> Self {
        Self {
            image_id,
            view_name: view_name.into(),
            rotation: canonical_quaternion(rotation),
            translation,
            camera_id,
            keypoints: Vec::new(),
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Camera-to-world rigid transform.
    pub fn c2w(&self) -> Matrix4<f64> {
        let rt = self.rotation_matrix().transpose();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.center());
        m
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }
}

/// Flips a unit quaternion into the hemisphere with a non-negative scalar part.
pub fn canonical_quaternion(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrackElement {
    pub image_id: u32,
    pub point2d_idx: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePoint {
    pub point_id: u64,
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    pub reprojection_error: f64,
    pub track: Vec<TrackElement>,
}

impl ScenePoint {
    pub fn new(point_id: u64, position: Vector3<f64>, color: [u8; 3]) -> Self {
        Self { point_id, position, color, reprojection_error: 0.0, track: Vec::new() }
    }

    pub fn track_length(&self) -> usize {
        self.track.len()
    }

    pub fn observed_in(&self, image_id: u32) -> bool {
        self.track.iter().any(|t| t.image_id == image_id)
    }
}

/// A sparse structure-from-motion reconstruction.
///
/// Views are kept sorted by `image_id` and points by `point_id`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneModel {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub views: Vec<CameraPose>,
    pub points: Vec<ScenePoint>,
}

impl SceneModel {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.cameras.len(), self.views.len(), self.points.len())
    }

    pub fn view(&self, name: &str) -> Option<&CameraPose> {
        self.views.iter().find(|v| v.view_name == name)
    }

    pub fn view_by_id(&self, image_id: u32) -> Option<&CameraPose> {
        self.views.binary_search_by_key(&image_id, |v| v.image_id).ok().map(|i| &self.views[i])
    }

    pub fn camera_of(&self, view: &CameraPose) -> Option<&CameraIntrinsics> {
        self.cameras.get(&view.camera_id)
    }

    pub(crate) fn sort(&mut self) {
        self.views.sort_by_key(|v| v.image_id);
        self.points.sort_by_key(|p| p.point_id);
    }
}
