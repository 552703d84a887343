//! Convex-hull outlier removal.
//!
//! A hull is built over a trusted core of the cloud (long tracks, low
//! reprojection error). Every point is then judged on its own: it is removed
//! when its Euclidean distance to the hull surface exceeds a threshold given
//! as a fraction of the hull's bounding-box diagonal.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::scene_io::ScenePoint;

/// Orientation tolerance relative to the bounding-box diagonal.
pub const RELATIVE_EPSILON: f64 = 1e-9;

pub const DEFAULT_REL_THRESHOLD: f64 = 0.05;
pub const DEFAULT_MIN_TRACK: usize = 3;
pub const DEFAULT_ERROR_QUANTILE: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum HullError {
    #[error("degenerate point set: affine rank {rank} < 3")]
    Degenerate { rank: usize },
    #[error("non-finite coordinate in input point {0}")]
    NonFinite(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    /// Indices into [`ConvexHull3::vertices`], counter-clockwise seen from outside.
    pub vertices: [usize; 3],
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Facet {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

/// Triangulated convex hull with outward unit normals; the interior satisfies
/// `n·x ≤ d` for every facet.
#[derive(Debug, Clone)]
pub struct ConvexHull3 {
    vertices: Vec<Vector3<f64>>,
    source_indices: Vec<usize>,
    facets: Vec<Facet>,
    diagonal: f64,
    eps: f64,
}

impl ConvexHull3 {
    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    /// Input index of each hull vertex.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    /// Bounding-box diagonal of the hull.
    pub fn diagonal(&self) -> f64 {
        self.diagonal
    }

    pub fn epsilon(&self) -> f64 {
        self.eps
    }

    /// Every directed edge has its reverse in exactly one other facet.
    pub fn is_watertight(&self) -> bool {
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.facets {
            let [a, b, c] = f.vertices;
            for e in [(a, b), (b, c), (c, a)] {
                *edges.entry(e).or_default() += 1;
            }
        }
        edges.iter().all(|(&(a, b), &n)| n == 1 && edges.get(&(b, a)) == Some(&1))
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.max_excess(p) <= self.eps
    }

    fn max_excess(&self, p: &Vector3<f64>) -> f64 {
        self.facets.iter().map(|f| f.signed_distance(p)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Euclidean distance from `p` to the hull: zero inside or on the surface,
    /// otherwise the distance to the closest surface point (facet, edge or vertex).
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        // The closest surface point of an exterior query lies on a facet that
        // faces the query, so only those are scanned.
        self.facets
            .iter()
            .filter(|f| f.signed_distance(p) > 0.0)
            .map(|f| {
                let [a, b, c] = f.vertices.map(|i| self.vertices[i]);
                (p - closest_point_on_triangle(p, &a, &b, &c)).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (min, max) =
        points.iter().fold((Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        });
    (max - min).norm()
}

/// Four input indices spanning a non-degenerate tetrahedron, or the affine
/// rank reached before the search ran out of independent directions.
fn initial_simplex(points: &[Vector3<f64>], eps: f64) -> Result<[usize; 4], usize> {
    if points.is_empty() {
        return Err(0);
    }
    let mut extremes = Vec::with_capacity(6);
    for axis in 0..3 {
        let key = |i: &usize| points[*i][axis];
        let idx = 0..points.len();
        extremes.push(idx.clone().min_by(|a, b| key(a).total_cmp(&key(b))).unwrap());
        extremes.push(idx.max_by(|a, b| key(a).total_cmp(&key(b))).unwrap());
    }
    let mut best = (0.0, extremes[0], extremes[0]);
    for &i in &extremes {
        for &j in &extremes {
            let d = (points[i] - points[j]).norm();
            if d > best.0 {
                best = (d, i.min(j), i.max(j));
            }
        }
    }
    let (span, i0, i1) = best;
    if span <= eps {
        return Err(0);
    }
    let dir = (points[i1] - points[i0]) / span;
    let (line_dist, i2) = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let v = p - points[i0];
            ((v - dir * v.dot(&dir)).norm(), i)
        })
        .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
    if line_dist <= eps {
        return Err(1);
    }
    let n = (points[i1] - points[i0]).cross(&(points[i2] - points[i0])).normalize();
    let (plane_dist, i3) = points
        .iter()
        .enumerate()
        .map(|(i, p)| (n.dot(&(p - points[i0])).abs(), i))
        .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
    if plane_dist <= eps {
        return Err(2);
    }
    Ok([i0, i1, i2, i3])
}

/// Affine rank (0 to 3) of a point set at the hull's orientation tolerance.
pub fn affine_rank(points: &[Vector3<f64>]) -> usize {
    let eps = RELATIVE_EPSILON * bbox_diagonal(points);
    match initial_simplex(points, eps) {
        Ok(_) => 3,
        Err(rank) => rank,
    }
}

struct Face {
    v: [usize; 3],
    normal: Vector3<f64>,
    offset: f64,
    outside: Vec<usize>,
    alive: bool,
}

impl Face {
    fn new(points: &[Vector3<f64>], v: [usize; 3]) -> Self {
        let [a, b, c] = v.map(|i| points[i]);
        let normal = (b - a).cross(&(c - a)).normalize();
        Self { v, normal, offset: normal.dot(&a), outside: Vec::new(), alive: true }
    }

    fn dist(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    fn edges(&self) -> [(usize, usize); 3] {
        let [a, b, c] = self.v;
        [(a, b), (b, c), (c, a)]
    }
}

struct Builder<'a> {
    points: &'a [Vector3<f64>],
    eps: f64,
    faces: Vec<Face>,
    /// Directed edge to the face that owns it.
    edges: HashMap<(usize, usize), usize>,
}

impl<'a> Builder<'a> {
    fn add_face(&mut self, v: [usize; 3]) -> usize {
        let id = self.faces.len();
        let face = Face::new(self.points, v);
        for e in face.edges() {
            self.edges.insert(e, id);
        }
        self.faces.push(face);
        id
    }

    fn kill_face(&mut self, id: usize) {
        self.faces[id].alive = false;
        for e in self.faces[id].edges() {
            if self.edges.get(&e) == Some(&id) {
                self.edges.remove(&e);
            }
        }
    }

    /// Moves each point into the outside set of the first face it lies above.
    fn partition(&mut self, candidates: &[usize], faces: &[usize]) {
        for &p in candidates {
            let pt = &self.points[p];
            if let Some(&f) = faces.iter().find(|&&f| self.faces[f].dist(pt) > self.eps) {
                self.faces[f].outside.push(p);
            }
        }
    }

    fn add_point(&mut self, face: usize) {
        let eye = {
            let f = &self.faces[face];
            *f.outside
                .iter()
                .max_by(|&&a, &&b| f.dist(&self.points[a]).total_cmp(&f.dist(&self.points[b])).then(b.cmp(&a)))
                .unwrap()
        };
        let eye_pt = self.points[eye];

        let mut visible = vec![face];
        let mut is_visible: HashMap<usize, bool> = HashMap::from([(face, true)]);
        let mut horizon = Vec::new();
        let mut i = 0;
        while i < visible.len() {
            let f = visible[i];
            i += 1;
            for (a, b) in self.faces[f].edges() {
                let nb = self.edges[&(b, a)];
                let vis = *is_visible.entry(nb).or_insert_with(|| self.faces[nb].dist(&eye_pt) > self.eps);
                if vis {
                    if !visible.contains(&nb) {
                        visible.push(nb);
                    }
                } else {
                    horizon.push((a, b));
                }
            }
        }

        let mut orphans = Vec::new();
        for &f in &visible {
            orphans.extend(self.faces[f].outside.drain(..).filter(|&p| p != eye));
            self.kill_face(f);
        }
        let new_faces: Vec<usize> = horizon.iter().map(|&(a, b)| self.add_face([a, b, eye])).collect();
        self.partition(&orphans, &new_faces);
    }
}

/// Builds the convex hull of `points` by incremental quickhull.
pub fn build_hull(points: &[Vector3<f64>]) -> Result<ConvexHull3, HullError> {
    if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(HullError::NonFinite(i));
    }
    let diagonal = bbox_diagonal(points);
    let eps = RELATIVE_EPSILON * diagonal;
    let simplex = initial_simplex(points, eps).map_err(|rank| HullError::Degenerate { rank })?;

    let mut b = Builder { points, eps, faces: Vec::new(), edges: HashMap::new() };
    let centroid = simplex.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / 4.0;
    let [p0, p1, p2, p3] = simplex;
    let mut initial = Vec::new();
    for tri in [[p0, p1, p2], [p0, p3, p1], [p1, p3, p2], [p0, p2, p3]] {
        let f = Face::new(points, tri);
        let tri = if f.dist(&centroid) > 0.0 { [tri[0], tri[2], tri[1]] } else { tri };
        initial.push(b.add_face(tri));
    }
    let rest: Vec<usize> = (0..points.len()).filter(|i| !simplex.contains(i)).collect();
    b.partition(&rest, &initial);

    let mut pending: Vec<usize> = initial;
    while let Some(f) = pending.pop() {
        if !b.faces[f].alive || b.faces[f].outside.is_empty() {
            continue;
        }
        let before = b.faces.len();
        b.add_point(f);
        pending.extend(before..b.faces.len());
    }

    let alive: Vec<&Face> = b.faces.iter().filter(|f| f.alive).collect();
    let mut source_indices: Vec<usize> = alive.iter().flat_map(|f| f.v).collect();
    source_indices.sort_unstable();
    source_indices.dedup();
    let remap: HashMap<usize, usize> = source_indices.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let facets =
        alive.iter().map(|f| Facet { vertices: f.v.map(|i| remap[&i]), normal: f.normal, offset: f.offset }).collect();
    let vertices = source_indices.iter().map(|&i| points[i]).collect();
    Ok(ConvexHull3 { vertices, source_indices, facets, diagonal, eps })
}

pub fn distance_to_hull(hull: &ConvexHull3, p: &Vector3<f64>) -> f64 {
    hull.distance(p)
}

/// Linear-interpolation quantile of `values` at fraction `q` in [0, 1].
fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustedCore {
    /// Indices into the input slice, ascending.
    pub indices: Vec<usize>,
    /// True when the qualifying set was degenerate and all points were used instead.
    pub degraded: bool,
}

/// Picks the points trusted to define the hull: `track_length ≥ min_track`
/// and reprojection error at or below the `max_error_quantile` quantile of
/// the track-qualified errors. Falls back to every point when fewer than four
/// non-coplanar points qualify.
///
/// # Panics
/// If `max_error_quantile` is outside `(0, 1]`.
pub fn select_trusted_core(points: &[ScenePoint], min_track: usize, max_error_quantile: f64) -> TrustedCore {
    assert!(max_error_quantile > 0.0 && max_error_quantile <= 1.0, "error quantile must lie in (0, 1]");
    let tracked: Vec<usize> = (0..points.len()).filter(|&i| points[i].track_length() >= min_track).collect();
    let indices: Vec<usize> = if tracked.is_empty() {
        Vec::new()
    } else {
        let mut errs: Vec<f64> = tracked.iter().map(|&i| points[i].reprojection_error).collect();
        let cutoff = quantile(&mut errs, max_error_quantile);
        tracked.into_iter().filter(|&i| points[i].reprojection_error <= cutoff).collect()
    };
    let positions: Vec<Vector3<f64>> = indices.iter().map(|&i| points[i].position).collect();
    if indices.len() >= 4 && affine_rank(&positions) == 3 {
        TrustedCore { indices, degraded: false }
    } else {
        TrustedCore { indices: (0..points.len()).collect(), degraded: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    /// Removal threshold as a fraction of the hull bounding-box diagonal.
    pub rel_threshold: f64,
    pub min_track: usize,
    pub max_error_quantile: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            rel_threshold: DEFAULT_REL_THRESHOLD,
            min_track: DEFAULT_MIN_TRACK,
            max_error_quantile: DEFAULT_ERROR_QUANTILE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterResult {
    pub kept: Vec<u64>,
    pub removed: Vec<u64>,
    pub threshold_used: f64,
    pub core_size: usize,
    pub core_degraded: bool,
    pub hull_vertices: usize,
    pub hull_facets: usize,
}

pub fn filter_outliers(points: &[ScenePoint], params: &FilterParams) -> Result<FilterResult, HullError> {
    if params.rel_threshold.is_nan() || params.rel_threshold < 0.0 {
        return Err(HullError::InvalidParameter(format!("hull threshold must be ≥ 0, got {}", params.rel_threshold)));
    }
    if !(params.max_error_quantile > 0.0 && params.max_error_quantile <= 1.0) {
        return Err(HullError::InvalidParameter(format!(
            "error quantile must lie in (0, 1], got {}",
            params.max_error_quantile
        )));
    }
    let core = select_trusted_core(points, params.min_track, params.max_error_quantile);
    if core.degraded {
        log::warn!("trusted core is degenerate; building the hull over all {} points", points.len());
    }
    let core_positions: Vec<Vector3<f64>> = core.indices.iter().map(|&i| points[i].position).collect();
    let hull = build_hull(&core_positions)?;
    let threshold = params.rel_threshold * hull.diagonal();

    let distances: Vec<f64> = points.par_iter().map(|p| hull.distance(&p.position)).collect();
    let (mut kept, mut removed) = (Vec::new(), Vec::new());
    for (p, d) in points.iter().zip(&distances) {
        if *d > threshold {
            removed.push(p.point_id);
        } else {
            kept.push(p.point_id);
        }
    }
    Ok(FilterResult {
        kept,
        removed,
        threshold_used: threshold,
        core_size: core.indices.len(),
        core_degraded: core.degraded,
        hull_vertices: hull.vertices().len(),
        hull_facets: hull.facets().len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::TrackElement;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_corners() -> Vec<Vector3<f64>> {
        (0..8).map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect()
    }

    fn unit_cube_hull() -> ConvexHull3 {
        build_hull(&cube_corners()).unwrap()
    }

    fn point(id: u64, pos: Vector3<f64>, track: usize, err: f64) -> ScenePoint {
        let mut p = ScenePoint::new(id, pos, [0, 0, 0]);
        p.reprojection_error = err;
        p.track = (0..track as u32).map(|image_id| TrackElement { image_id, point2d_idx: 0 }).collect();
        p
    }

    #[test]
    fn tetrahedron() {
        let pts = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        let h = build_hull(&pts).unwrap();
        assert_eq!(h.facets().len(), 4);
        assert!(h.is_watertight());
        for f in h.facets() {
            assert!((f.normal.norm() - 1.0).abs() < 1e-12);
            for p in &pts {
                assert!(f.signed_distance(p) <= h.epsilon());
            }
        }
    }

    #[test]
    fn degenerate_inputs_report_rank() {
        let coplanar = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(1.0, 1.0, 0.0)];
        assert_eq!(build_hull(&coplanar).unwrap_err(), HullError::Degenerate { rank: 2 });
        let collinear = [Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0];
        assert_eq!(build_hull(&collinear).unwrap_err(), HullError::Degenerate { rank: 1 });
        assert_eq!(build_hull(&[Vector3::x(); 5]).unwrap_err(), HullError::Degenerate { rank: 0 });
        assert_eq!(build_hull(&[]).unwrap_err(), HullError::Degenerate { rank: 0 });
    }

    #[test]
    fn cube_distances() {
        let h = unit_cube_hull();
        assert!(h.is_watertight());
        assert_eq!(h.facets().len(), 12);
        assert_eq!(h.distance(&Vector3::new(0.5, 0.5, 0.5)), 0.0);
        assert!((h.distance(&Vector3::new(0.5, 0.5, 2.0)) - 1.0).abs() < 1e-12);
        assert!((h.distance(&Vector3::new(2.0, 2.0, 2.0)) - 3f64.sqrt()).abs() < 1e-12);
        // Edge region: nearest point is on the edge x = 1, z = 1.
        assert!((h.distance(&Vector3::new(2.0, 0.5, 2.0)) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn random_hull_contains_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [4usize, 10, 100, 2000] {
            let pts: Vec<Vector3<f64>> =
                (0..n).map(|_| Vector3::new(rng.random(), rng.random(), rng.random::<f64>()) * 10.0).collect();
            let h = build_hull(&pts).unwrap();
            assert!(h.is_watertight(), "n = {n}");
            for p in &pts {
                for f in h.facets() {
                    assert!(f.signed_distance(p) <= h.epsilon(), "n = {n}");
                }
            }
            // Every vertex is extreme: it lies on at least three facets.
            for (vi, v) in h.vertices().iter().enumerate() {
                let on = h.facets().iter().filter(|f| f.vertices.contains(&vi)).count();
                assert!(on >= 3);
                assert_eq!(pts[h.source_indices()[vi]], *v);
            }
        }
    }

    #[test]
    fn core_selection() {
        let pts: Vec<ScenePoint> =
            cube_corners().into_iter().enumerate().map(|(i, p)| point(i as u64, p, 5, 0.1)).collect();
        let core = select_trusted_core(&pts, 3, 1.0);
        assert_eq!(core.indices, (0..8).collect::<Vec<_>>());
        assert!(!core.degraded);

        // Corners 0, 1, 2, 4 span a tetrahedron; the rest get short tracks.
        let mut half = pts.clone();
        for i in [3, 5, 6, 7] {
            half[i].track.truncate(1);
        }
        let core = select_trusted_core(&half, 3, 1.0);
        assert_eq!(core.indices, vec![0, 1, 2, 4]);
        assert!(!core.degraded);

        let mut three = pts;
        for p in three.iter_mut().skip(3) {
            p.track.clear();
        }
        let core = select_trusted_core(&three, 3, 1.0);
        assert!(core.degraded);
        assert_eq!(core.indices.len(), 8);
    }

    #[test]
    fn threshold_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<ScenePoint> = (0..200)
            .map(|i| {
                let pos = Vector3::new(rng.random(), rng.random(), rng.random());
                point(i, pos, 4, rng.random())
            })
            .collect();
        let all_core = FilterParams { rel_threshold: 0.0, min_track: 0, max_error_quantile: 1.0 };
        assert!(filter_outliers(&pts, &all_core).unwrap().removed.is_empty());
        let inf = FilterParams { rel_threshold: f64::INFINITY, ..FilterParams::default() };
        assert!(filter_outliers(&pts, &inf).unwrap().removed.is_empty());
        let neg = FilterParams { rel_threshold: -1.0, ..FilterParams::default() };
        assert!(matches!(filter_outliers(&pts, &neg), Err(HullError::InvalidParameter(_))));
    }
}
