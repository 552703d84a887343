use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use splatprep_core::hull_filter::{build_hull, filter_outliers, select_trusted_core, FilterParams};
use splatprep_core::scene_io::{ScenePoint, TrackElement};

fn point(id: u64, p: Vector3<f64>, track: usize, err: f64) -> ScenePoint {
    let mut sp = ScenePoint::new(id, p, [0; 3]);
    sp.reprojection_error = err;
    sp.track = (0..track as u32).map(|i| TrackElement { image_id: i + 1, point2d_idx: 0 }).collect();
    sp
}

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

/// Distance from `p` to the box `[-h, h]^3` in box coordinates.
fn box_distance(p: &Vector3<f64>, h: &Vector3<f64>) -> f64 {
    p.abs().zip_map(h, |a, b| (a - b).max(0.0)).norm()
}

#[test]
fn cube_corners_are_exactly_the_hull_vertices() {
    let mut pts: Vec<Vector3<f64>> =
        (0..8).map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect();
    for i in 0..100 {
        let t = i as f64 / 100.0;
        pts.push(Vector3::new(0.05 + 0.9 * t, 0.05 + 0.9 * ((t * 7.0) % 1.0), 0.05 + 0.9 * ((t * 13.0) % 1.0)));
    }
    let hull = build_hull(&pts).unwrap();
    // A cube corner is the unique maximizer of its own sign pattern; interior points maximize nothing.
    let extreme: BTreeSet<usize> = (0..8)
        .map(|c| {
            let dir = Vector3::new((c & 1) as f64 - 0.5, ((c >> 1) & 1) as f64 - 0.5, ((c >> 2) & 1) as f64 - 0.5);
            (0..pts.len()).max_by(|&a, &b| pts[a].dot(&dir).total_cmp(&pts[b].dot(&dir))).unwrap()
        })
        .collect();
    let got: BTreeSet<usize> = hull.source_indices().iter().copied().collect();
    assert_eq!(got, extreme);
    assert_eq!(got, (0..8).collect());
}

#[test]
fn corner_distance_matches_dense_surface_sampling() {
    let pts: Vec<Vector3<f64>> =
        (0..8).map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect();
    let hull = build_hull(&pts).unwrap();
    let q = Vector3::new(2.0, 2.0, 2.0);
    let n = 60;
    let mut best = f64::INFINITY;
    for a in 0..=n {
        for b in 0..=n {
            let (u, v) = (a as f64 / n as f64, b as f64 / n as f64);
            for face in 0..6 {
                let fixed = (face / 2) as usize;
                let val = (face % 2) as f64;
                let mut s = Vector3::zeros();
                s[fixed] = val;
                s[(fixed + 1) % 3] = u;
                s[(fixed + 2) % 3] = v;
                best = best.min((s - q).norm());
            }
        }
    }
    assert!((hull.distance(&q) - best).abs() < 1e-12);
    assert!((hull.distance(&q) - 3f64.sqrt()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hull_invariants_on_random_clouds(pts in prop::collection::vec(vec3(10.0), 4..80)) {
        prop_assume!(splatprep_core::hull_filter::affine_rank(&pts) == 3);
        let hull = build_hull(&pts).unwrap();
        prop_assert!(hull.is_watertight());
        let eps = hull.epsilon();
        for p in &pts {
            for f in hull.facets() {
                prop_assert!(f.normal.dot(p) <= f.offset + eps);
            }
            prop_assert_eq!(hull.distance(p), 0.0);
        }
        for f in hull.facets() {
            prop_assert!((f.normal.norm() - 1.0).abs() < 1e-12);
        }
        for (v, &i) in hull.vertices().iter().zip(hull.source_indices()) {
            prop_assert_eq!(v, &pts[i]);
        }
        // Euler characteristic of a closed triangulated sphere.
        let (v, f) = (hull.vertices().len() as i64, hull.facets().len() as i64);
        prop_assert_eq!(v - 3 * f / 2 + f, 2);
    }

    #[test]
    fn distance_to_rotated_box_matches_analytic(
        half in prop::array::uniform3(0.1..5.0f64),
        axis in vec3(1.0),
        angle in -3.0..3.0f64,
        shift in vec3(10.0),
        queries in prop::collection::vec(vec3(20.0), 1..40),
    ) {
        let h = Vector3::from(half);
        let rot = if axis.norm() > 1e-3 {
            Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
        } else {
            Rotation3::identity()
        };
        let corners: Vec<Vector3<f64>> = (0..8)
            .map(|i| {
                let s = Vector3::new(
                    if i & 1 == 0 { -1.0 } else { 1.0 },
                    if i & 2 == 0 { -1.0 } else { 1.0 },
                    if i & 4 == 0 { -1.0 } else { 1.0 },
                );
                rot * s.component_mul(&h) + shift
            })
            .collect();
        let hull = build_hull(&corners).unwrap();
        for q in &queries {
            let local = rot.inverse() * (q - shift);
            let expect = box_distance(&local, &h);
            let tol = 1e-9 * (1.0 + expect) + hull.epsilon();
            prop_assert!((hull.distance(q) - expect).abs() <= tol, "got {} want {}", hull.distance(q), expect);
        }
    }
}

/// Inliers in a ball with long tracks, plus far points with short tracks.
fn arb_scene() -> impl Strategy<Value = Vec<ScenePoint>> {
    (
        prop::collection::vec((vec3(1.0), 3usize..8, 0.0..1.0f64), 8..60),
        prop::collection::vec((vec3(30.0), 0usize..5, 0.0..3.0f64), 0..20),
    )
        .prop_map(|(inl, out)| {
            inl.into_iter().chain(out).enumerate().map(|(i, (p, t, e))| point(i as u64 * 3 + 1, p, t, e)).collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_partitions_input_and_keeps_core(points in arb_scene(), rel in 0.0..0.5f64) {
        let params = FilterParams { rel_threshold: rel, ..Default::default() };
        let Ok(r) = filter_outliers(&points, &params) else { return Ok(()); };
        let kept: BTreeSet<u64> = r.kept.iter().copied().collect();
        let removed: BTreeSet<u64> = r.removed.iter().copied().collect();
        prop_assert!(kept.is_disjoint(&removed));
        let all: BTreeSet<u64> = points.iter().map(|p| p.point_id).collect();
        prop_assert_eq!(&kept | &removed, all);
        let core = select_trusted_core(&points, params.min_track, params.max_error_quantile);
        for i in core.indices {
            prop_assert!(kept.contains(&points[i].point_id));
        }
    }

    #[test]
    fn removal_is_monotone_in_threshold(points in arb_scene(), a in 0.0..0.3f64, b in 0.0..0.3f64) {
        let (lo, hi) = (a.min(b), a.max(b));
        let run = |t: f64| filter_outliers(&points, &FilterParams { rel_threshold: t, ..Default::default() });
        let (Ok(r_lo), Ok(r_hi)) = (run(lo), run(hi)) else { return Ok(()); };
        let removed_lo: BTreeSet<u64> = r_lo.removed.into_iter().collect();
        prop_assert!(r_hi.removed.iter().all(|id| removed_lo.contains(id)));
        let inf = run(f64::INFINITY).unwrap();
        prop_assert!(inf.removed.is_empty());
    }

    #[test]
    fn scaling_preserves_partition(points in arb_scene(), exp in -6i32..10) {
        let s = 2f64.powi(exp);
        let scaled: Vec<ScenePoint> = points
            .iter()
            .map(|p| ScenePoint { position: p.position * s, ..p.clone() })
            .collect();
        let params = FilterParams::default();
        let (Ok(a), Ok(b)) = (filter_outliers(&points, &params), filter_outliers(&scaled, &params)) else {
            return Ok(());
        };
        prop_assert_eq!(a.kept, b.kept);
        prop_assert_eq!(a.removed, b.removed);
    }

    #[test]
    fn dropping_an_untracked_point_leaves_other_verdicts(points in arb_scene(), pick in any::<prop::sample::Index>()) {
        let params = FilterParams::default();
        let core = select_trusted_core(&points, params.min_track, params.max_error_quantile);
        prop_assume!(!core.degraded);
        let candidates: Vec<usize> = (0..points.len())
            .filter(|&i| points[i].track_length() < params.min_track)
            .collect();
        prop_assume!(!candidates.is_empty());
        let drop = candidates[pick.index(candidates.len())];
        let before = filter_outliers(&points, &params).unwrap();
        let rest: Vec<ScenePoint> = points.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, p)| p.clone()).collect();
        let after = filter_outliers(&rest, &params).unwrap();
        let verdict = |r: &splatprep_core::hull_filter::FilterResult| -> BTreeMap<u64, bool> {
            r.kept.iter().map(|&id| (id, true)).chain(r.removed.iter().map(|&id| (id, false))).collect()
        };
        let mut b = verdict(&before);
        b.remove(&points[drop].point_id);
        prop_assert_eq!(b, verdict(&after));
    }
}

#[test]
fn unit_ball_scene_removes_exactly_the_far_points() {
    let mut pts = Vec::new();
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..1000 {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / 1000.0;
        let r = (1.0 - z * z).sqrt() * ((i % 10) as f64 + 1.0) / 10.0;
        let t = golden * i as f64;
        pts.push(point(i, Vector3::new(r * t.cos(), r * t.sin(), z * ((i % 10) as f64 + 1.0) / 10.0), 5, 0.1));
    }
    let mut outliers = BTreeSet::new();
    for j in 0..50u64 {
        let t = j as f64 * 0.7;
        let dir = Vector3::new(t.cos() * (t * 0.3).sin(), t.sin() * (t * 0.3).sin(), (t * 0.3).cos()).normalize();
        pts.push(point(1000 + j, dir * (10.5 + j as f64 * 0.1), 1, 0.1));
        outliers.insert(1000 + j);
    }
    let r = filter_outliers(&pts, &FilterParams { rel_threshold: 0.1, ..Default::default() }).unwrap();
    assert_eq!(r.removed.iter().copied().collect::<BTreeSet<_>>(), outliers);
}
