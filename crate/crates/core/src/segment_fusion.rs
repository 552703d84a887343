//! Point-to-pixel projection and cross-view segment fusion.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::scene_io::{CameraIntrinsics, CameraPose, MaskError, SceneModel, SegmentMask};

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;
pub const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("view {0:?} is not registered in the scene model")]
    UnknownView(String),
    #[error("view {view:?} references missing camera {camera_id}")]
    MissingCamera { view: String, camera_id: u32 },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FusionOptions {
    /// Only label points whose track includes the view.
    pub strict_visibility: bool,
    /// Camera `y` axis points up instead of down.
    pub y_flip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Point2<f64>,
    pub depth: f64,
}

/// Projects a world point through a pinhole camera. `None` when behind the
/// camera or outside `[0, width) × [0, height)`.
pub fn project_point(
    p: &Vector3<f64>,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    y_flip: bool,
) -> Option<Projection> {
    let pc = pose.world_to_camera(p);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let y = if y_flip { -pc.y } else { pc.y };
    let u = intrinsics.fx * (pc.x / pc.z) + intrinsics.cx;
    let v = intrinsics.fy * (y / pc.z) + intrinsics.cy;
    let inside = u >= 0.0 && v >= 0.0 && u < f64::from(intrinsics.width) && v < f64::from(intrinsics.height);
    inside.then_some(Projection { pixel: Point2::new(u, v), depth: pc.z })
}

/// Inverse of [`project_point`].
pub fn unproject(
    projection: &Projection,
    intrinsics: &CameraIntrinsics,
    pose: &CameraPose,
    y_flip: bool,
) -> Vector3<f64> {
    let z = projection.depth;
    let x = (projection.pixel.x - intrinsics.cx) / intrinsics.fx * z;
    let y = (projection.pixel.y - intrinsics.cy) / intrinsics.fy * z;
    let y = if y_flip { -y } else { y };
    pose.camera_to_world(&Vector3::new(x, y, z))
}

/// Local segment labels of one view, keyed by point id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewAssignment {
    pub view_name: String,
    pub labels: BTreeMap<u64, u16>,
}

/// Labels every point that projects onto a labeled pixel of `mask`.
pub fn assign_view_labels(
    model: &SceneModel,
    view_name: &str,
    mask: &SegmentMask,
    options: FusionOptions,
) -> Result<ViewAssignment, FusionError> {
    let view = model.view(view_name).ok_or_else(|| FusionError::UnknownView(view_name.to_string()))?;
    let cam = model
        .camera_of(view)
        .ok_or_else(|| FusionError::MissingCamera { view: view_name.to_string(), camera_id: view.camera_id })?;
    mask.check_dimensions(cam)?;
    let labels = model
        .points
        .iter()
        .filter(|p| !options.strict_visibility || p.observed_in(view.image_id))
        .filter_map(|p| {
            let proj = project_point(&p.position, cam, view, options.y_flip)?;
            let col = (proj.pixel.x.floor() as u32).min(mask.width - 1);
            let row = (proj.pixel.y.floor() as u32).min(mask.height - 1);
            match mask.label_at(col, row) {
                0 => None,
                l => Some((p.point_id, l)),
            }
        })
        .collect();
    Ok(ViewAssignment { view_name: view_name.to_string(), labels })
}

/// Runs [`assign_view_labels`] for every `(view, mask)` pair in parallel, keeping input order.
pub fn assign_all_views(
    model: &SceneModel,
    masks: &[SegmentMask],
    options: FusionOptions,
) -> Result<Vec<ViewAssignment>, FusionError> {
    masks.par_iter().map(|m| assign_view_labels(model, &m.view_name, m, options)).collect()
}

pub type SegmentKey = (String, u16);

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SegmentMap {
    pub global_ids: BTreeSet<u32>,
    pub per_view_links: BTreeMap<SegmentKey, u32>,
    /// First global id each point was encountered with.
    pub point_labels: BTreeMap<u64, u32>,
    pub merged_from: BTreeMap<u32, BTreeSet<SegmentKey>>,
}

impl SegmentMap {
    /// Points per global id.
    pub fn segment_points(&self) -> BTreeMap<u32, Vec<u64>> {
        let mut out: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for (&pid, &gid) in &self.point_labels {
            out.entry(gid).or_default().push(pid);
        }
        out
    }

    /// Max mask area over the local segments linked to each global id.
    pub fn segment_areas(&self, masks: &[SegmentMask]) -> BTreeMap<u32, u64> {
        let by_view: BTreeMap<&str, &SegmentMask> = masks.iter().map(|m| (m.view_name.as_str(), m)).collect();
        self.merged_from
            .iter()
            .map(|(&gid, members)| {
                let area =
                    members.iter().filter_map(|(v, l)| by_view.get(v.as_str()).map(|m| m.area(*l))).max().unwrap_or(0);
                (gid, area)
            })
            .collect()
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller index becomes the root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// `|a ∩ b| / min(|a|, |b|)`.
pub fn normalized_overlap(intersection: usize, size_a: usize, size_b: usize) -> f64 {
    let denom = size_a.min(size_b);
    if denom == 0 {
        0.0
    } else {
        intersection as f64 / denom as f64
    }
}

/// Merges local segments across views into global ids.
///
/// Repeated view names are ignored after their first occurrence.
pub fn build_global_map(assignments: &[ViewAssignment], overlap_threshold: f64) -> SegmentMap {
    let mut seen = BTreeSet::new();
    let views: Vec<&ViewAssignment> = assignments.iter().filter(|a| seen.insert(a.view_name.as_str())).collect();

    // Segments in first-appearance order: view order, then ascending label.
    let mut keys: Vec<SegmentKey> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut view_of: Vec<usize> = Vec::new();
    let mut index: BTreeMap<(usize, u16), usize> = BTreeMap::new();
    for (vi, a) in views.iter().enumerate() {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        for &l in a.labels.values() {
            *counts.entry(l).or_default() += 1;
        }
        for (l, c) in counts {
            index.insert((vi, l), keys.len());
            keys.push((a.view_name.clone(), l));
            sizes.push(c);
            view_of.push(vi);
        }
    }

    let mut per_point: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (vi, a) in views.iter().enumerate() {
        for (&pid, &l) in &a.labels {
            per_point.entry(pid).or_default().push(index[&(vi, l)]);
        }
    }
    let mut shared: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for segs in per_point.values() {
        for (i, &a) in segs.iter().enumerate() {
            for &b in &segs[i + 1..] {
                debug_assert_ne!(view_of[a], view_of[b]);
                *shared.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
    }
    let mut uf = UnionFind::new(keys.len());
    for (&(a, b), &n) in &shared {
        if normalized_overlap(n, sizes[a], sizes[b]) >= overlap_threshold {
            uf.union(a, b);
        }
    }

    let mut map = SegmentMap::default();
    let mut dense: BTreeMap<usize, u32> = BTreeMap::new();
    let mut gid_of = Vec::with_capacity(keys.len());
    for (i, key) in keys.iter().enumerate() {
        let root = uf.find(i);
        let next = dense.len() as u32;
        let gid = *dense.entry(root).or_insert(next);
        gid_of.push(gid);
        map.global_ids.insert(gid);
        map.per_view_links.insert(key.clone(), gid);
        map.merged_from.entry(gid).or_default().insert(key.clone());
    }
    for (vi, a) in views.iter().enumerate() {
        for (&pid, &l) in &a.labels {
            map.point_labels.entry(pid).or_insert(gid_of[index[&(vi, l)]]);
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{CameraModelKind, ScenePoint, TrackElement};
    use nalgebra::UnitQuaternion;

    fn identity_pose() -> CameraPose {
        CameraPose::new(1, "v", UnitQuaternion::identity(), Vector3::zeros(), 1)
    }

    #[test]
    fn projection_examples() {
        let cam = CameraIntrinsics::pinhole(1, 4, 4, 1.0, 1.0, 0.0, 0.0);
        let p = project_point(&Vector3::new(0.0, 0.0, 2.0), &cam, &identity_pose(), false).unwrap();
        assert_eq!((p.pixel.x, p.pixel.y, p.depth), (0.0, 0.0, 2.0));
        assert!(project_point(&Vector3::new(0.0, 0.0, -2.0), &cam, &identity_pose(), false).is_none());

        let cam = CameraIntrinsics::pinhole(1, 640, 480, 100.0, 100.0, 320.0, 240.0);
        let p = project_point(&Vector3::new(1.0, 0.0, 2.0), &cam, &identity_pose(), false).unwrap();
        assert_eq!((p.pixel.x, p.pixel.y), (370.0, 240.0));
        assert_eq!(cam.model, CameraModelKind::Pinhole);
    }

    #[test]
    fn y_flip_mirrors_rows() {
        let cam = CameraIntrinsics::pinhole(1, 100, 100, 10.0, 10.0, 50.0, 50.0);
        let p = Vector3::new(0.0, 1.0, 1.0);
        let down = project_point(&p, &cam, &identity_pose(), false).unwrap();
        let up = project_point(&p, &cam, &identity_pose(), true).unwrap();
        assert_eq!(down.pixel.y, 60.0);
        assert_eq!(up.pixel.y, 40.0);
        assert_eq!(unproject(&up, &cam, &identity_pose(), true), p);
    }

    fn one_point_scene(x: f64, track: bool) -> SceneModel {
        let mut cameras = BTreeMap::new();
        cameras.insert(1, CameraIntrinsics::pinhole(1, 4, 2, 1.0, 1.0, 0.0, 0.0));
        let mut pt = ScenePoint::new(9, Vector3::new(x, 0.5, 1.0), [0; 3]);
        if track {
            pt.track.push(TrackElement { image_id: 1, point2d_idx: 0 });
        }
        SceneModel { cameras, views: vec![identity_pose()], points: vec![pt] }
    }

    #[test]
    fn labels_by_floored_cell() {
        let mask = SegmentMask::from_raster("v", 4, 2, vec![0, 0, 0, 0, 0, 0, 0, 7]);
        let a = assign_view_labels(&one_point_scene(3.6, false), "v", &mask, FusionOptions::default()).unwrap();
        assert_eq!(a.labels.get(&9), None);
        let mask = SegmentMask::from_raster("v", 4, 2, vec![0, 0, 0, 7, 0, 0, 0, 0]);
        let a = assign_view_labels(&one_point_scene(3.6, false), "v", &mask, FusionOptions::default()).unwrap();
        assert_eq!(a.labels.get(&9), Some(&7));
        let a = assign_view_labels(&one_point_scene(1.0, false), "v", &mask, FusionOptions::default()).unwrap();
        assert!(a.labels.is_empty());
    }

    #[test]
    fn strict_visibility_gates_on_track() {
        let mask = SegmentMask::from_raster("v", 4, 2, vec![3; 8]);
        let strict = FusionOptions { strict_visibility: true, ..Default::default() };
        assert!(assign_view_labels(&one_point_scene(1.0, false), "v", &mask, strict).unwrap().labels.is_empty());
        assert_eq!(assign_view_labels(&one_point_scene(1.0, true), "v", &mask, strict).unwrap().labels.len(), 1);
    }

    #[test]
    fn dimension_mismatch_and_unknown_view() {
        let scene = one_point_scene(1.0, false);
        let mask = SegmentMask::from_raster("v", 3, 2, vec![1; 6]);
        assert!(matches!(assign_view_labels(&scene, "v", &mask, FusionOptions::default()), Err(FusionError::Mask(_))));
        assert!(matches!(
            assign_view_labels(&scene, "w", &mask, FusionOptions::default()),
            Err(FusionError::UnknownView(_))
        ));
    }

    fn view(name: &str, pairs: &[(u64, u16)]) -> ViewAssignment {
        ViewAssignment { view_name: name.into(), labels: pairs.iter().copied().collect() }
    }

    #[test]
    fn identical_and_disjoint_segments() {
        let m = build_global_map(&[view("a", &[(1, 1), (2, 1)]), view("b", &[(1, 1), (2, 1)])], 0.5);
        assert_eq!(m.global_ids.len(), 1);
        let m = build_global_map(&[view("a", &[(1, 1), (2, 1)]), view("b", &[(3, 1), (4, 1)])], 0.5);
        assert_eq!(m.global_ids.len(), 2);
        assert_eq!(m.point_labels[&1], 0);
        assert_eq!(m.point_labels[&3], 1);
    }

    #[test]
    fn first_assignment_wins() {
        let m = build_global_map(&[view("a", &[(1, 1), (2, 2)]), view("b", &[(1, 5), (2, 5), (3, 5)])], 0.9);
        // b:5 overlaps a:1 and a:2 at 1/1 each, merging all three.
        assert_eq!(m.global_ids.len(), 1);
        let m = build_global_map(
            &[view("a", &[(1, 1), (2, 1), (3, 2), (6, 2)]), view("b", &[(3, 4), (4, 4), (5, 4)])],
            1.0,
        );
        assert_eq!(m.global_ids.len(), 3);
        assert_eq!(m.point_labels[&3], m.per_view_links[&("a".to_string(), 2)]);
        assert_eq!(m.point_labels[&4], m.per_view_links[&("b".to_string(), 4)]);
    }

    #[test]
    fn duplicate_view_is_ignored() {
        let a = view("a", &[(1, 1), (2, 2)]);
        let b = view("b", &[(1, 3), (2, 3)]);
        let once = build_global_map(&[a.clone(), b.clone()], 0.5);
        let twice = build_global_map(&[a.clone(), b, a], 0.5);
        assert_eq!(once, twice);
    }
}
