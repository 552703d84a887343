//! Mask-area-guided densification of sparse segments.
//!
//! Each global segment gets a target point count `max(⌊√A·γ⌋, n_min)` from
//! its mask area `A`. Missing points are drawn by jittering uniformly chosen
//! existing points with Gaussian noise and colored by inverse-distance
//! weighting of their three nearest existing neighbours.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::scene_io::{PlyCloud, ScenePoint};
use crate::spatial::KdTree;

pub const DEFAULT_GAMMA: f64 = 0.1;
pub const DEFAULT_N_MIN: usize = 10;
/// Segments with fewer existing points are never densified.
pub const MIN_SEGMENT_POINTS: usize = 5;
pub const SIGMA_MULTIPLIER: f64 = 0.5;
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const COVARIANCE_SCALE: f64 = 0.01;
const COLOR_NEIGHBORS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DensifyError {
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("segment covariance is not finite")]
    NonFiniteCovariance,
    #[error("{positions} positions but {colors} colors")]
    LengthMismatch { positions: usize, colors: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    #[default]
    Isotropic,
    Covariance,
}

pub fn target_count(area: u64, gamma: f64, n_min: usize) -> usize {
    let scaled = ((area as f64).sqrt() * gamma).floor().max(0.0) as usize;
    scaled.max(n_min)
}

pub fn augmentation_need(n_target: usize, existing: usize) -> usize {
    if existing < MIN_SEGMENT_POINTS {
        0
    } else {
        n_target.saturating_sub(existing)
    }
}

/// Half the mean nearest-neighbour distance, floored at 1e-12.
pub fn adaptive_sigma(points: &[Vector3<f64>]) -> Result<f64, DensifyError> {
    if points.len() < 2 {
        return Err(DensifyError::TooFewPoints { needed: 2, found: points.len() });
    }
    let tree = KdTree::new(points);
    let dists: Vec<f64> =
        points.par_iter().enumerate().map(|(i, p)| tree.nearest(p, Some(i)).map_or(0.0, |n| n.dist())).collect();
    let total: f64 = dists.iter().sum();
    Ok((SIGMA_MULTIPLIER * total / points.len() as f64).max(SIGMA_FLOOR))
}

/// Unbiased sample covariance.
pub fn sample_covariance(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector3<f64>>() / n;
    points.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / (n - 1.0).max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewPoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
}

/// Inverse-distance-weighted color of the nearest existing points; an exact hit copies its color.
pub fn interpolate_color(tree: &KdTree, colors: &[[u8; 3]], q: &Vector3<f64>) -> [u8; 3] {
    let nn = tree.k_nearest(q, COLOR_NEIGHBORS, None);
    if let Some(hit) = nn.iter().find(|n| n.dist_sq == 0.0) {
        return colors[hit.index];
    }
    let weights: Vec<f64> = nn.iter().map(|n| 1.0 / n.dist()).collect();
    let wsum: f64 = weights.iter().sum();
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let v: f64 = nn.iter().zip(&weights).map(|(n, w)| w * f64::from(colors[n.index][c])).sum::<f64>() / wsum;
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

/// Noise generator for one segment; `scale` is the reported per-axis σ.
struct Jitter {
    transform: Matrix3<f64>,
    scale: f64,
}

impl Jitter {
    fn new(points: &[Vector3<f64>], mode: SamplingMode) -> Result<Self, DensifyError> {
        match mode {
            SamplingMode::Isotropic => {
                let s = adaptive_sigma(points)?;
                Ok(Self { transform: Matrix3::from_diagonal_element(s), scale: s })
            }
            SamplingMode::Covariance => {
                let mut cov = sample_covariance(points);
                let trace = cov.trace();
                cov += Matrix3::from_diagonal_element(1e-12 * trace);
                cov *= COVARIANCE_SCALE;
                if !cov.iter().all(|v| v.is_finite()) {
                    return Err(DensifyError::NonFiniteCovariance);
                }
                let eig = SymmetricEigen::new(cov);
                let root = eig.eigenvectors
                    * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()))
                    * eig.eigenvectors.transpose();
                Ok(Self { transform: root, scale: (cov.trace() / 3.0).sqrt().max(SIGMA_FLOOR) })
            }
        }
    }
}

fn augment_with_scale(
    points: &[Vector3<f64>],
    colors: &[[u8; 3]],
    n_add: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<(Vec<NewPoint>, f64), DensifyError> {
    if points.len() != colors.len() {
        return Err(DensifyError::LengthMismatch { positions: points.len(), colors: colors.len() });
    }
    if points.len() < MIN_SEGMENT_POINTS {
        return Err(DensifyError::TooFewPoints { needed: MIN_SEGMENT_POINTS, found: points.len() });
    }
    let jitter = Jitter::new(points, mode)?;
    let tree = KdTree::new(points);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_add)
        .map(|_| {
            let base = points[rng.random_range(0..points.len())];
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let position = base + jitter.transform * z;
            NewPoint { position, color: interpolate_color(&tree, colors, &position) }
        })
        .collect();
    Ok((samples, jitter.scale))
}

/// Draws `n_add` jittered copies of uniformly chosen segment points.
pub fn augment_segment(
    points: &[Vector3<f64>],
    colors: &[[u8; 3]],
    n_add: usize,
    mode: SamplingMode,
    seed: u64,
) -> Result<Vec<NewPoint>, DensifyError> {
    augment_with_scale(points, colors, n_add, mode, seed).map(|r| r.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentStats {
    pub global_id: u32,
    pub area: u64,
    pub existing: usize,
    pub n_target: usize,
    pub n_add: usize,
    /// Per-axis noise scale; 0 for segments that received no points.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedSegment {
    pub global_id: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct DensifyReport {
    pub points_added_total: usize,
    pub segments_touched: usize,
    pub per_segment: Vec<SegmentStats>,
    /// Segments whose sampling failed; their `n_add` is not counted in the totals.
    pub skipped: Vec<SkippedSegment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensifyParams {
    pub gamma: f64,
    pub n_min: usize,
    pub mode: SamplingMode,
    pub seed: u64,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self { gamma: DEFAULT_GAMMA, n_min: DEFAULT_N_MIN, mode: SamplingMode::Isotropic, seed: 0 }
    }
}

/// Densifies every segment in `areas ∪ labels`, in ascending global id.
///
/// The output keeps the input points first, labeled from `labels`, followed by
/// the new points flagged as synthetic. New ids continue after the largest input id.
pub fn densify_cloud(
    points: &[ScenePoint],
    labels: &BTreeMap<u64, u32>,
    areas: &BTreeMap<u32, u64>,
    params: &DensifyParams,
) -> (PlyCloud, DensifyReport) {
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if let Some(&g) = labels.get(&p.point_id) {
            members.entry(g).or_default().push(i);
        }
    }
    let gids: BTreeSet<u32> = areas.keys().chain(members.keys()).copied().collect();

    type Outcome = (SegmentStats, Result<Vec<NewPoint>, DensifyError>);
    let outcomes: Vec<Outcome> = gids
        .into_par_iter()
        .map(|gid| {
            let idx = members.get(&gid).map_or(&[][..], Vec::as_slice);
            let area = areas.get(&gid).copied().unwrap_or(0);
            let n_target = target_count(area, params.gamma, params.n_min);
            let n_add = augmentation_need(n_target, idx.len());
            let mut stats = SegmentStats { global_id: gid, area, existing: idx.len(), n_target, n_add, sigma: 0.0 };
            if n_add == 0 {
                return (stats, Ok(Vec::new()));
            }
            let pos: Vec<Vector3<f64>> = idx.iter().map(|&i| points[i].position).collect();
            let col: Vec<[u8; 3]> = idx.iter().map(|&i| points[i].color).collect();
            let result = augment_with_scale(&pos, &col, n_add, params.mode, params.seed ^ u64::from(gid)).map(
                |(samples, scale)| {
                    stats.sigma = scale;
                    samples
                },
            );
            (stats, result)
        })
        .collect();

    let mut cloud = PlyCloud {
        points: points.to_vec(),
        segment: Some(points.iter().map(|p| labels.get(&p.point_id).copied()).collect()),
        synthetic: Some(vec![false; points.len()]),
    };
    let mut next_id = points.iter().map(|p| p.point_id + 1).max().unwrap_or(0);
    let mut report = DensifyReport::default();
    for (stats, result) in outcomes {
        match result {
            Ok(samples) => {
                if !samples.is_empty() {
                    report.points_added_total += samples.len();
                    report.segments_touched += 1;
                }
                for s in samples {
                    cloud.points.push(ScenePoint::new(next_id, s.position, s.color));
                    cloud.segment.as_mut().unwrap().push(Some(stats.global_id));
                    cloud.synthetic.as_mut().unwrap().push(true);
                    next_id += 1;
                }
            }
            Err(e) => {
                log::warn!("segment {} skipped: {e}", stats.global_id);
                report.skipped.push(SkippedSegment { global_id: stats.global_id, reason: e.to_string() });
            }
        }
        report.per_segment.push(stats);
    }
    (cloud, report)
}
