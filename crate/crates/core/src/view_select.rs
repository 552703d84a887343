//! Camera clustering and representative-view selection.
//!
//! Camera centers are z-scored per axis and clustered with k-means for every
//! k in `[k_min, min(15, ⌊N/2⌋)]`. Each k is scored as
//! `alpha · coverage + beta · compactness`, where coverage averages the
//! intra-cluster spatial spread and forward-axis angular diversity, and
//! compactness is the negated inertia over the Frobenius norm of the
//! normalized positions. One view per cluster of the best k is kept.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::scene_io::{CameraPose, SceneModel};

pub const DEFAULT_K_MIN: usize = 3;
pub const K_MAX: usize = 15;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;
pub const MAX_ITERATIONS: usize = 200;
pub const SHIFT_TOLERANCE: f64 = 1e-8;
const SIGMA_FLOOR: f64 = 1e-12;

/// Which camera axis, expressed in world coordinates, is taken as the viewing direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardConvention {
    /// `-z` column of the camera-to-world matrix (OpenGL style).
    #[default]
    NegZ,
    /// `+z` column (COLMAP / OpenCV style).
    PosZ,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFeature {
    pub view_name: String,
    pub center: Vector3<f64>,
    pub forward: Vector3<f64>,
    pub normalized_center: Vector3<f64>,
}

/// Features of all registered views plus the per-axis statistics used to normalize them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<CameraFeature>,
    pub mean: Vector3<f64>,
    /// Per-axis population standard deviation, floored at 1e-12.
    pub std: Vector3<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn normalized(&self) -> Vec<Vector3<f64>> {
        self.features.iter().map(|f| f.normalized_center).collect()
    }

    pub fn denormalize(&self, p: &Vector3<f64>) -> Vector3<f64> {
        p.component_mul(&self.std) + self.mean
    }

    /// Bounding-box diagonal of the camera centers.
    pub fn scene_diagonal(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for f in &self.features {
            lo = lo.inf(&f.center);
            hi = hi.sup(&f.center);
        }
        if self.features.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }
}

pub fn camera_forward(pose: &CameraPose, convention: ForwardConvention) -> Vector3<f64> {
    // The z column of c2w is the third row of the world-to-camera rotation.
    let z = pose.rotation.inverse() * Vector3::z();
    let f = match convention {
        ForwardConvention::NegZ => -z,
        ForwardConvention::PosZ => z,
    };
    f.normalize()
}

/// Builds z-scored camera features from raw centers and forward axes.
pub fn features_from_cameras(cameras: impl IntoIterator<Item = (String, Vector3<f64>, Vector3<f64>)>) -> FeatureSet {
    let raw: Vec<_> = cameras.into_iter().collect();
    let n = raw.len().max(1) as f64;
    // Shifted mean: exact for constant axes, so those normalize to exactly 0.
    let origin = raw.first().map_or(Vector3::zeros(), |r| r.1);
    let mean = origin + raw.iter().map(|r| r.1 - origin).sum::<Vector3<f64>>() / n;
    let var = raw.iter().map(|r| (r.1 - mean).component_mul(&(r.1 - mean))).sum::<Vector3<f64>>() / n;
    let std = var.map(|v| v.sqrt().max(SIGMA_FLOOR));
    let features = raw
        .into_iter()
        .map(|(view_name, center, forward)| CameraFeature {
            normalized_center: (center - mean).component_div(&std),
            view_name,
            center,
            forward: forward.normalize(),
        })
        .collect();
    FeatureSet { features, mean, std }
}

pub fn extract_features(model: &SceneModel, convention: ForwardConvention) -> FeatureSet {
    features_from_cameras(model.views.iter().map(|v| (v.view_name.clone(), v.center(), camera_forward(v, convention))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vector3<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd update, in iteration order.
    pub inertia_history: Vec<f64>,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest_centroid(p: &Vector3<f64>, centroids: &[Vector3<f64>]) -> (usize, f64) {
    centroids.iter().enumerate().map(|(j, c)| (j, (p - c).norm_squared())).fold((0, f64::INFINITY), |best, x| {
        if x.1 < best.1 {
            x
        } else {
            best
        }
    })
}

fn inertia(points: &[Vector3<f64>], assignment: &[usize], centroids: &[Vector3<f64>]) -> f64 {
    points.iter().zip(assignment).map(|(p, &a)| (p - centroids[a]).norm_squared()).sum()
}

fn plus_plus_init(points: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[next];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - c).norm_squared());
        }
        centroids.push(c);
    }
    centroids
}

/// Gives every empty cluster the point farthest from its centroid in the
/// currently largest cluster.
fn repair_empty(points: &[Vector3<f64>], assignment: &mut [usize], centroids: &mut [Vector3<f64>]) {
    let k = centroids.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |b, j| if sizes[j] > sizes[b] { j } else { b });
        let victim = (0..points.len())
            .filter(|&i| assignment[i] == largest)
            .fold(None::<(usize, f64)>, |best, i| {
                let d = (points[i] - centroids[largest]).norm_squared();
                match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                }
            })
            .expect("largest cluster is non-empty")
            .0;
        assignment[victim] = empty;
        centroids[empty] = points[victim];
    }
}

fn means(points: &[Vector3<f64>], assignment: &[usize], k: usize) -> Vec<Vector3<f64>> {
    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        sums[a] += p;
        counts[a] += 1;
    }
    sums.into_iter().zip(counts).map(|(s, c)| s / c as f64).collect()
}

/// Lloyd's k-means with k-means++ seeding.
///
/// # Panics
/// Unless `1 ≤ k ≤ points.len()`.
pub fn kmeans(points: &[Vector3<f64>], k: usize, seed: u64) -> Clustering {
    assert!(k >= 1 && k <= points.len(), "k must lie in [1, N]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignment = vec![0usize; points.len()];
    let mut history = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        for (a, p) in assignment.iter_mut().zip(points) {
            *a = nearest_centroid(p, &centroids).0;
        }
        repair_empty(points, &mut assignment, &mut centroids);
        let updated = means(points, &assignment, k);
        let shift = updated.iter().zip(&centroids).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        centroids = updated;
        history.push(inertia(points, &assignment, &centroids));
        if shift < SHIFT_TOLERANCE {
            break;
        }
    }
    let final_assignment: Vec<usize> = points.iter().map(|p| nearest_centroid(p, &centroids).0).collect();
    let mut covered = vec![false; k];
    for &a in &final_assignment {
        covered[a] = true;
    }
    if covered.iter().all(|&c| c) {
        assignment = final_assignment;
    }
    Clustering { k, inertia: inertia(points, &assignment, &centroids), assignment, centroids, inertia_history: history }
}

fn pairwise_mean<T>(items: &[T], f: impl Fn(&T, &T) -> f64) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            sum += f(&items[i], &items[j]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos()
}

/// Mean over clusters of `(spread + angular) / 2`, singletons contributing 0.
pub fn coverage(clustering: &Clustering, features: &FeatureSet) -> f64 {
    let diag = features.scene_diagonal().max(SIGMA_FLOOR);
    let total: f64 = (0..clustering.k)
        .map(|c| {
            let members: Vec<&CameraFeature> =
                clustering.members(c).into_iter().map(|i| &features.features[i]).collect();
            if members.len() < 2 {
                return 0.0;
            }
            let spread = pairwise_mean(&members, |a, b| (a.center - b.center).norm()) / diag;
            let angular = pairwise_mean(&members, |a, b| angle_between(&a.forward, &b.forward)) / PI;
            (spread + angular) / 2.0
        })
        .sum();
    total / clustering.k as f64
}

/// `-inertia / ‖X‖_F` over the normalized camera positions.
pub fn compactness(clustering: &Clustering, features: &FeatureSet) -> f64 {
    let frob =
        features.features.iter().map(|f| f.normalized_center.norm_squared()).sum::<f64>().sqrt().max(SIGMA_FLOOR);
    -clustering.inertia / frob
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectParams {
    pub k_min: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self { k_min: DEFAULT_K_MIN, alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA, seed: 0 }
    }
}

/// Inclusive candidate range `[k_min, min(15, ⌊N/2⌋)]`, or `None` when empty.
pub fn candidate_range(n: usize, k_min: usize) -> Option<(usize, usize)> {
    let hi = K_MAX.min(n / 2);
    (k_min.max(1) <= hi).then_some((k_min.max(1), hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KScore {
    pub k: usize,
    pub coverage: f64,
    pub compactness: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub chosen_k: usize,
    pub scores: Vec<KScore>,
    pub clustering: Clustering,
    /// One view per cluster, in cluster order.
    pub representatives: Vec<String>,
}

impl SelectionResult {
    pub fn score_per_k(&self) -> BTreeMap<usize, f64> {
        self.scores.iter().map(|s| (s.k, s.score)).collect()
    }
}

/// Scores every candidate k; returns the scores and the winning clustering.
pub fn select_k(features: &FeatureSet, params: &SelectParams) -> (Vec<KScore>, Clustering) {
    let points = features.normalized();
    let n = points.len();
    let Some((lo, hi)) = candidate_range(n, params.k_min) else {
        let k = (n / 2).max(1).min(n);
        return (Vec::new(), kmeans(&points, k, params.seed));
    };
    let evaluated: Vec<(KScore, Clustering)> = (lo..=hi)
        .into_par_iter()
        .map(|k| {
            let c = kmeans(&points, k, params.seed);
            let cov = coverage(&c, features);
            let comp = compactness(&c, features);
            let score = KScore { k, coverage: cov, compactness: comp, score: params.alpha * cov + params.beta * comp };
            (score, c)
        })
        .collect();
    let best = evaluated.iter().enumerate().fold(0, |b, (i, e)| if e.0.score > evaluated[b].0.score { i } else { b });
    let scores = evaluated.iter().map(|e| e.0).collect();
    let clustering = evaluated.into_iter().nth(best).unwrap().1;
    (scores, clustering)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub index: usize,
    pub proximity: f64,
    pub uniqueness: f64,
    pub score: f64,
}

/// Scores for every member of one cluster, in member order.
pub fn representative_scores(clustering: &Clustering, features: &FeatureSet, cluster: usize) -> Vec<CandidateScore> {
    let members = clustering.members(cluster);
    let center = features.denormalize(&clustering.centroids[cluster]);
    let mean_sep: Vec<f64> = members
        .iter()
        .map(|&i| {
            if members.len() < 2 {
                return 0.0;
            }
            let fi = &features.features[i].forward;
            members.iter().filter(|&&j| j != i).map(|&j| angle_between(fi, &features.features[j].forward)).sum::<f64>()
                / (members.len() - 1) as f64
        })
        .collect();
    let lo = mean_sep.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean_sep.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    members
        .iter()
        .zip(&mean_sep)
        .map(|(&i, &sep)| {
            let proximity = 1.0 / (1.0 + (features.features[i].center - center).norm());
            let uniqueness = if hi - lo > 0.0 { (sep - lo) / (hi - lo) } else { 0.0 };
            CandidateScore { index: i, proximity, uniqueness, score: (proximity + uniqueness) / 2.0 }
        })
        .collect()
}

/// Highest-scoring view per cluster; ties go to the lexicographically smallest name.
pub fn select_representatives(clustering: &Clustering, features: &FeatureSet) -> Vec<String> {
    (0..clustering.k)
        .filter_map(|c| {
            representative_scores(clustering, features, c)
                .into_iter()
                .max_by(|a, b| {
                    a.score
                        .total_cmp(&b.score)
                        .then_with(|| features.features[b.index].view_name.cmp(&features.features[a.index].view_name))
                })
                .map(|s| features.features[s.index].view_name.clone())
        })
        .collect()
}

pub fn select_views(features: &FeatureSet, params: &SelectParams) -> SelectionResult {
    let (scores, clustering) = select_k(features, params);
    let representatives = select_representatives(&clustering, features);
    SelectionResult { chosen_k: clustering.k, scores, clustering, representatives }
}
