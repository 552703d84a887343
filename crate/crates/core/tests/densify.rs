mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatprep_core::densify::{
    adaptive_sigma, augment_segment, augmentation_need, densify_cloud, target_count, DensifyParams, SamplingMode,
    COVARIANCE_SCALE,
};
use splatprep_core::scene_io::ScenePoint;

fn blob(n: usize, seed: u64, scale: Vector3<f64>) -> (Vec<Vector3<f64>>, Vec<[u8; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..n).map(|_| Vector3::from_fn(|i, _| rng.random_range(-1.0..1.0) * scale[i])).collect();
    let cols = (0..n).map(|_| rng.random()).collect();
    (pts, cols)
}

fn population_moments(pts: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector3<f64>>() / n;
    let cov = pts.iter().map(|p| (p - mean) * (p - mean).transpose()).sum::<Matrix3<f64>>() / n;
    (mean, cov)
}

fn brute_sigma(pts: &[Vector3<f64>]) -> f64 {
    let total: f64 = (0..pts.len()).map(|i| common::brute_nearest(&pts[i], pts, Some(i))).sum();
    0.5 * total / pts.len() as f64
}

fn check_moments(base: &[Vector3<f64>], samples: &[Vector3<f64>], jitter_cov: Matrix3<f64>) {
    let (bm, bc) = population_moments(base);
    let (sm, sc) = population_moments(samples);
    let expect = bc + jitter_cov;
    let n = samples.len() as f64;
    for a in 0..3 {
        let tol = 3.0 * sc[(a, a)].sqrt() / n.sqrt();
        assert!((sm[a] - bm[a]).abs() <= tol, "axis {a}: {} vs {} (tol {tol})", sm[a], bm[a]);
    }
    let rel = (sc - expect).norm() / expect.norm();
    assert!(rel < 0.15, "covariance error {rel}");
}

#[test]
fn sigma_matches_pairwise_oracle() {
    for seed in 0..5 {
        let (pts, _) = blob(100, seed, Vector3::new(1.0, 2.0, 0.5));
        assert!((adaptive_sigma(&pts).unwrap() - brute_sigma(&pts)).abs() < 1e-12);
    }
}

#[test]
fn isotropic_moments_over_ten_thousand_samples() {
    let start = Instant::now();
    let (pts, cols) = blob(100, 7, Vector3::new(1.0, 0.5, 0.25));
    let s = adaptive_sigma(&pts).unwrap();
    let out = augment_segment(&pts, &cols, 10_000, SamplingMode::Isotropic, 42).unwrap();
    let samples: Vec<Vector3<f64>> = out.iter().map(|p| p.position).collect();
    check_moments(&pts, &samples, Matrix3::from_diagonal_element(s * s));
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn thousand_sample_moments() {
    let (pts, cols) = blob(100, 8, Vector3::new(2.0, 1.0, 1.0));
    let s = adaptive_sigma(&pts).unwrap();
    let out = augment_segment(&pts, &cols, 1000, SamplingMode::Isotropic, 3).unwrap();
    let samples: Vec<Vector3<f64>> = out.iter().map(|p| p.position).collect();
    check_moments(&pts, &samples, Matrix3::from_diagonal_element(s * s));
}

#[test]
fn covariance_mode_moments() {
    let (pts, cols) = blob(200, 9, Vector3::new(3.0, 1.0, 0.2));
    let n = pts.len() as f64;
    let (_, pop) = population_moments(&pts);
    let unbiased = pop * n / (n - 1.0);
    let jitter = (unbiased + Matrix3::from_diagonal_element(1e-12 * unbiased.trace())) * COVARIANCE_SCALE;
    let out = augment_segment(&pts, &cols, 10_000, SamplingMode::Covariance, 5).unwrap();
    let samples: Vec<Vector3<f64>> = out.iter().map(|p| p.position).collect();
    check_moments(&pts, &samples, jitter);
}

#[test]
fn isotropic_containment_within_three_sigma() {
    let (pts, cols) = blob(50, 10, Vector3::new(1.0, 1.0, 1.0));
    let s = adaptive_sigma(&pts).unwrap();
    let out = augment_segment(&pts, &cols, 10_000, SamplingMode::Isotropic, 11).unwrap();
    let inside = out.iter().filter(|p| common::brute_nearest(&p.position, &pts, None) <= 3.0 * s).count();
    assert!(inside as f64 >= 0.99 * out.len() as f64, "{inside} of {}", out.len());
}

#[test]
fn coincident_points_share_their_color() {
    let pts = vec![Vector3::new(1.0, 2.0, 3.0); 5];
    let cols = vec![[10, 20, 30]; 5];
    let out = augment_segment(&pts, &cols, 100, SamplingMode::Isotropic, 0).unwrap();
    for p in &out {
        assert!((p.position - pts[0]).norm() <= 6.0 * 1e-12 * 3f64.sqrt());
        assert_eq!(p.color, [10, 20, 30]);
    }
    assert!(augment_segment(&pts, &cols, 0, SamplingMode::Isotropic, 0).unwrap().is_empty());
    assert!(augment_segment(&pts[..4], &cols[..4], 1, SamplingMode::Isotropic, 0).is_err());
}

fn labeled_scene(seed: u64, n_segments: u32) -> (Vec<ScenePoint>, BTreeMap<u64, u32>, BTreeMap<u32, u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut labels = BTreeMap::new();
    let mut areas = BTreeMap::new();
    let mut id = 1u64;
    for g in 0..n_segments {
        let count = rng.random_range(0..40);
        let center = Vector3::new(f64::from(g) * 10.0, 0.0, 0.0);
        for _ in 0..count {
            let p = center + Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            points.push(ScenePoint::new(id, p, rng.random()));
            labels.insert(id, g);
            id += rng.random_range(1..4);
        }
        areas.insert(g, rng.random_range(0..600_000));
    }
    // Unlabeled points pass through untouched.
    for _ in 0..5 {
        points.push(ScenePoint::new(id, Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0)), [1, 2, 3]));
        id += 1;
    }
    (points, labels, areas)
}

#[test]
fn single_segment_example() {
    let (pts, cols) = blob(60, 1, Vector3::new(1.0, 1.0, 1.0));
    let points: Vec<ScenePoint> =
        pts.iter().zip(&cols).enumerate().map(|(i, (p, c))| ScenePoint::new(i as u64, *p, *c)).collect();
    let labels = (0..60).map(|i| (i, 3)).collect();
    let areas = [(3, 1_000_000)].into_iter().collect();
    let (cloud, report) = densify_cloud(&points, &labels, &areas, &DensifyParams::default());
    assert_eq!((report.points_added_total, report.segments_touched), (40, 1));
    assert_eq!(report.per_segment[0].n_target, 100);
    assert_eq!(cloud.points.len(), 100);
}

#[test]
fn saturated_segments_add_nothing() {
    let (pts, cols) = blob(30, 2, Vector3::new(1.0, 1.0, 1.0));
    let points: Vec<ScenePoint> =
        pts.iter().zip(&cols).enumerate().map(|(i, (p, c))| ScenePoint::new(i as u64, *p, *c)).collect();
    let labels = (0..30).map(|i| (i, i as u32 % 2)).collect();
    let areas = [(0, 100), (1, 10_000)].into_iter().collect();
    let (cloud, report) = densify_cloud(&points, &labels, &areas, &DensifyParams::default());
    assert_eq!((report.points_added_total, report.segments_touched), (0, 0));
    assert_eq!(cloud.points, points);
}

#[test]
fn ten_segment_report_matches_recomputation() {
    let (points, labels, areas) = labeled_scene(77, 10);
    let params = DensifyParams::default();
    let (cloud, report) = densify_cloud(&points, &labels, &areas, &params);
    let mut existing: BTreeMap<u32, usize> = BTreeMap::new();
    for g in labels.values() {
        *existing.entry(*g).or_default() += 1;
    }
    let mut total = 0;
    let mut touched = 0;
    for g in 0..10u32 {
        let e = existing.get(&g).copied().unwrap_or(0);
        let area = areas[&g];
        // Target is floor(sqrt(area) / 10) floored at 10.
        let target = ((area.isqrt() / 10) as usize).max(10);
        let need = if e < 5 { 0 } else { target.saturating_sub(e) };
        let stats = report.per_segment.iter().find(|s| s.global_id == g).unwrap();
        assert_eq!((stats.existing, stats.n_target, stats.n_add), (e, target, need));
        total += need;
        touched += usize::from(need > 0);
    }
    assert!(report.skipped.is_empty());
    assert_eq!((report.points_added_total, report.segments_touched), (total, touched));
    assert_eq!(cloud.points.len(), points.len() + total);
}

fn arb_params() -> impl Strategy<Value = DensifyParams> {
    (0.01..0.5f64, 0usize..30, any::<bool>(), any::<u64>()).prop_map(|(gamma, n_min, cov, seed)| DensifyParams {
        gamma,
        n_min,
        mode: if cov { SamplingMode::Covariance } else { SamplingMode::Isotropic },
        seed,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cloud_invariants(scene_seed in any::<u64>(), n_seg in 1u32..8, params in arb_params()) {
        let (points, labels, areas) = labeled_scene(scene_seed, n_seg);
        let (cloud, report) = densify_cloud(&points, &labels, &areas, &params);
        // Conservation.
        prop_assert_eq!(cloud.points.len(), points.len() + report.points_added_total);
        prop_assert_eq!(&cloud.points[..points.len()], &points[..]);
        let seg = cloud.segment.as_ref().unwrap();
        let synth = cloud.synthetic.as_ref().unwrap();
        prop_assert!(synth[..points.len()].iter().all(|s| !s));
        prop_assert!(synth[points.len()..].iter().all(|s| *s));
        // Recomputed targets and per-segment closure.
        let mut added: BTreeMap<u32, usize> = BTreeMap::new();
        for g in seg[points.len()..].iter() {
            *added.entry(g.unwrap()).or_default() += 1;
        }
        let mut sum = 0;
        for s in &report.per_segment {
            prop_assert_eq!(s.n_target, target_count(s.area, params.gamma, params.n_min));
            prop_assert_eq!(s.n_add, augmentation_need(s.n_target, s.existing));
            if report.skipped.iter().all(|k| k.global_id != s.global_id) {
                let got = added.get(&s.global_id).copied().unwrap_or(0);
                prop_assert_eq!(got, s.n_add);
                if s.n_add > 0 {
                    prop_assert_eq!(s.existing + got, s.n_target.max(s.existing));
                }
                sum += s.n_add;
            }
        }
        prop_assert_eq!(sum, report.points_added_total);
        // New ids are fresh.
        let mut ids: Vec<u64> = cloud.points.iter().map(|p| p.point_id).collect();
        ids.sort_unstable();
        ids.dedup();
        prop_assert_eq!(ids.len(), cloud.points.len());
        // Determinism.
        let (again, report2) = densify_cloud(&points, &labels, &areas, &params);
        prop_assert_eq!(&again, &cloud);
        prop_assert_eq!(report2, report);
    }

    #[test]
    fn segments_are_sampled_independently(scene_seed in any::<u64>(), seed in any::<u64>()) {
        let (points, labels, areas) = labeled_scene(scene_seed, 6);
        let params = DensifyParams { seed, ..Default::default() };
        let (full, _) = densify_cloud(&points, &labels, &areas, &params);
        let only: BTreeMap<u32, u64> = areas.iter().filter(|(g, _)| **g == 4).map(|(g, a)| (*g, *a)).collect();
        let sub_labels: BTreeMap<u64, u32> = labels.iter().filter(|(_, g)| **g == 4).map(|(p, g)| (*p, *g)).collect();
        let (part, _) = densify_cloud(&points, &sub_labels, &only, &params);
        let pick = |c: &splatprep_core::scene_io::PlyCloud| -> Vec<(Vector3<f64>, [u8; 3])> {
            c.points.iter().zip(c.segment.as_ref().unwrap()).zip(c.synthetic.as_ref().unwrap())
                .filter(|((_, g), s)| **s && **g == Some(4))
                .map(|((p, _), _)| (p.position, p.color))
                .collect()
        };
        prop_assert_eq!(pick(&full), pick(&part));
    }

    #[test]
    fn colors_stay_within_source_range(seed in any::<u64>(), n in 5usize..40) {
        let (pts, cols) = blob(n, seed, Vector3::new(1.0, 1.0, 1.0));
        let out = augment_segment(&pts, &cols, 200, SamplingMode::Isotropic, seed).unwrap();
        for p in &out {
            let mut d: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, q)| ((q - p.position).norm_squared(), i)).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (c, &got) in p.color.iter().enumerate() {
                let src: Vec<u8> = d[..3].iter().map(|(_, i)| cols[*i][c]).collect();
                let (lo, hi) = (*src.iter().min().unwrap(), *src.iter().max().unwrap());
                prop_assert!(got >= lo && got <= hi);
            }
        }
        let again = augment_segment(&pts, &cols, 200, SamplingMode::Isotropic, seed).unwrap();
        prop_assert_eq!(
            out.iter().map(|p| (p.position.map(f64::to_bits), p.color)).collect::<Vec<_>>(),
            again.iter().map(|p| (p.position.map(f64::to_bits), p.color)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn sigma_matches_oracle_on_random_sets(seed in any::<u64>(), n in 2usize..120) {
        let (pts, _) = blob(n, seed, Vector3::new(3.0, 1.0, 0.1));
        prop_assert!((adaptive_sigma(&pts).unwrap() - brute_sigma(&pts).max(1e-12)).abs() < 1e-12);
    }
}
