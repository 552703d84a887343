use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{UnitQuaternion, Vector3};
use splatprep_cli::artifacts::{
    read_json, FilterArtifact, SegmentsArtifact, SelectionArtifact, DENSIFIED_PLY, DENSIFY_REPORT, FILTERED_PLY,
    FILTER_REPORT, MANIFEST, METRICS_KV, METRICS_TEXT, SEGMENTS, SELECTION,
};
use splatprep_core::scene_io::ply::decode_ply;
use splatprep_core::scene_io::{
    write_colmap_dir, CameraIntrinsics, CameraPose, ModelFormat, SceneModel, ScenePoint, TrackElement,
};

fn splatprep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splatprep")).args(args).current_dir(cwd).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_dataset(root: &Path) -> std::path::PathBuf {
    let out = splatprep(&["--seed", "3", "--output", "data", "synth", "--cameras", "16"], root);
    assert!(out.status.success(), "{}", stderr(&out));
    root.join("data")
}

#[test]
fn synth_then_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(dir.path());
    let out = splatprep(&["--config", "pipeline.toml", "pipeline"], &data);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = data.join("out");

    let filter: FilterArtifact = read_json(&run.join(FILTER_REPORT)).unwrap();
    assert_eq!(filter.kept.len() + filter.removed.len(), filter.input_points);
    assert_eq!(decode_ply(&fs::read(run.join(FILTERED_PLY)).unwrap()).unwrap().points.len(), filter.kept.len());

    let selection: SelectionArtifact = read_json(&run.join(SELECTION)).unwrap();
    assert_eq!(selection.representatives.len(), selection.chosen_k);
    assert_eq!(selection.clusters.iter().map(|c| c.views.len()).sum::<usize>(), 16);

    let segments: SegmentsArtifact = read_json(&run.join(SEGMENTS)).unwrap();
    assert!(segments.missing_masks.is_empty());
    let kept: BTreeSet<u64> = filter.kept.iter().copied().collect();
    assert!(segments.point_labels.keys().all(|id| kept.contains(id)));

    let report: serde_json::Value = read_json(&run.join(DENSIFY_REPORT)).unwrap();
    let added = report["points_added_total"].as_u64().unwrap() as usize;
    let densified = decode_ply(&fs::read(run.join(DENSIFIED_PLY)).unwrap()).unwrap();
    assert_eq!(densified.points.len(), filter.kept.len() + added);
    assert!(densified.segment.is_some() && densified.synthetic.is_some());

    let kv = fs::read_to_string(run.join(METRICS_KV)).unwrap();
    assert!(kv.lines().any(|l| l.starts_with("synthetic/view_000/psnr=")), "{kv}");
    assert!(kv.lines().any(|l| l.starts_with("synthetic/cloud/overall=")), "{kv}");
    assert!(fs::read_to_string(run.join(METRICS_TEXT)).unwrap().starts_with('#'));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join(MANIFEST)).unwrap()).unwrap();
    let det = &manifest["deterministic"];
    assert_eq!(det["seed"], 3);
    assert_eq!(det["stages"].as_array().unwrap().len(), 5);
    assert!(det["inputs"].as_array().unwrap().iter().any(|e| e["path"] == "model/points3D.txt"));
    assert!(manifest["timing"]["stage_seconds"]["filter"].is_number());
}

#[test]
fn stage_subset_writes_only_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(dir.path());
    let out = splatprep(&["--config", "pipeline.toml", "--output", "sub", "pipeline", "--stages", "filter"], &data);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = fs::read_dir(data.join("sub"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, [FILTER_REPORT, FILTERED_PLY, MANIFEST]);
}

#[test]
fn single_stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(dir.path());
    for stage in ["filter", "cluster", "fuse", "densify"] {
        let out = splatprep(&["--config", "pipeline.toml", stage], &data);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with(stage));
    }
    assert!(data.join("out").join(DENSIFIED_PLY).is_file());
    assert!(!data.join("out").join(MANIFEST).exists());
}

#[test]
fn missing_mask_directory_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(dir.path());
    let out = splatprep(&["--config", "pipeline.toml", "--output", "never", "pipeline", "--masks", "nowhere"], &data);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("masks"), "{}", stderr(&out));
    assert!(!data.join("never").exists());
}

#[test]
fn config_typo_is_reported_with_line_and_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "seed = 1\n\ngama = 0.2\n").unwrap();
    let out = splatprep(&["--config", "bad.toml", "pipeline"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("line 3") && err.contains("`gamma`"), "{err}");
}

#[test]
fn out_of_range_flag_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(dir.path());
    let out = splatprep(&["--config", "pipeline.toml", "densify", "--gamma=-2"], &data);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gamma: must be"), "{}", stderr(&out));
}

#[test]
fn evaluate_without_inputs_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = splatprep(&["evaluate"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn fuse_without_upstream_artifacts_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dataset(dir.path());
    let out = splatprep(&["--config", "pipeline.toml", "--output", "fresh", "fuse"], &data);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains(FILTER_REPORT), "{}", stderr(&out));
}

#[test]
fn corrupt_model_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model");
    fs::create_dir(&model).unwrap();
    for f in ["cameras.txt", "images.txt", "points3D.txt"] {
        fs::write(model.join(f), "1 PINHOLE not numbers\n").unwrap();
    }
    let out = splatprep(&["filter", "--model", "model"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn flat_point_cloud_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = SceneModel::default();
    model.cameras.insert(1, CameraIntrinsics::pinhole(1, 64, 48, 50.0, 50.0, 32.0, 24.0));
    for i in 0..3u32 {
        model.views.push(CameraPose::new(
            i + 1,
            format!("v{i}"),
            UnitQuaternion::identity(),
            Vector3::new(0.0, 0.0, 5.0),
            1,
        ));
    }
    for i in 0..40u64 {
        let mut p = ScenePoint::new(i, Vector3::new((i % 8) as f64, (i / 8) as f64, 0.0), [0; 3]);
        p.track = (1..=3).map(|v| TrackElement { image_id: v, point2d_idx: 0 }).collect();
        model.points.push(p);
    }
    write_colmap_dir(&model, &dir.path().join("model"), ModelFormat::Text).unwrap();
    let out = splatprep(&["filter", "--model", "model"], dir.path());
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}
