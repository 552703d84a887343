//! The five pipeline stages. Each reads its inputs from disk and writes its artifacts to the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::anyhow;
use log::warn;
use splatprep_core::densify::densify_cloud;
use splatprep_core::hull_filter::{filter_outliers, HullError};
use splatprep_core::metrics::{
    cosine, dino_loss, l1, l_photo, l_total, point_set_distance, psnr, ssim, ImageBuffer, MetricError, MetricReport,
};
use splatprep_core::scene_io::{
    load_embedding, load_mask, read_colmap_dir, read_ply, read_ply_cloud, write_labeled_ply, write_ply,
    EmbeddingVector, SceneModel, SegmentMask,
};
use splatprep_core::segment_fusion::{assign_all_views, build_global_map};
use splatprep_core::view_select::{extract_features, select_views};

use crate::artifacts::*;
use crate::config::PipelineConfig;
use crate::error::{CliError, FailureKind, Stage, StageContext};

const DATA: FailureKind = FailureKind::Data;

fn load_model(cfg: &PipelineConfig, stage: Stage) -> Result<SceneModel, CliError> {
    let dir = cfg.inputs.model.as_deref().ok_or_else(|| CliError::config("model", "not set"))?;
    read_colmap_dir(dir, None).in_stage(stage, DATA)
}

fn out(cfg: &PipelineConfig, name: &str) -> std::path::PathBuf {
    cfg.output.join(name)
}

fn require_artifact(cfg: &PipelineConfig, name: &str, stage: Stage) -> Result<std::path::PathBuf, CliError> {
    let p = out(cfg, name);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Stage {
            stage,
            kind: DATA,
            source: anyhow!("missing prior artifact {}; run the earlier stages first", p.display()),
        })
    }
}

pub fn filter(cfg: &PipelineConfig) -> Result<String, CliError> {
    let stage = Stage::Filter;
    let model = load_model(cfg, stage)?;
    let result = filter_outliers(&model.points, &cfg.params.filter()).map_err(|e| {
        let kind = match e {
            HullError::Degenerate { .. } | HullError::NonFinite(_) => FailureKind::Numeric,
            HullError::InvalidParameter(_) => DATA,
        };
        CliError::Stage { stage, kind, source: e.into() }
    })?;
    let kept: BTreeSet<u64> = result.kept.iter().copied().collect();
    let points: Vec<_> = model.points.iter().filter(|p| kept.contains(&p.point_id)).cloned().collect();
    write_ply(&points, &out(cfg, FILTERED_PLY)).in_stage(stage, DATA)?;
    let artifact = FilterArtifact {
        input_points: model.points.len(),
        kept: result.kept,
        removed: result.removed,
        threshold_used: result.threshold_used,
        core_size: result.core_size,
        core_degraded: result.core_degraded,
        hull_vertices: result.hull_vertices,
        hull_facets: result.hull_facets,
    };
    write_json(&artifact, &out(cfg, FILTER_REPORT)).in_stage(stage, DATA)?;
    if artifact.core_degraded {
        warn!("trusted core fell back to all points");
    }
    Ok(format!("kept {} of {} points", artifact.kept.len(), artifact.input_points))
}

pub fn cluster(cfg: &PipelineConfig) -> Result<String, CliError> {
    let stage = Stage::Cluster;
    let model = load_model(cfg, stage)?;
    if model.views.is_empty() {
        return Err(CliError::Stage { stage, kind: DATA, source: anyhow!("model has no views") });
    }
    let features = extract_features(&model, cfg.params.forward_convention());
    let result = select_views(&features, &cfg.params.select(cfg.seed));
    let clusters = result
        .representatives
        .iter()
        .enumerate()
        .map(|(c, rep)| ClusterRow {
            representative: rep.clone(),
            views: result.clustering.members(c).iter().map(|&i| features.features[i].view_name.clone()).collect(),
        })
        .collect();
    let artifact = SelectionArtifact {
        chosen_k: result.chosen_k,
        inertia: result.clustering.inertia,
        scores: result
            .scores
            .iter()
            .map(|s| ScoreRow { k: s.k, coverage: s.coverage, compactness: s.compactness, score: s.score })
            .collect(),
        clusters,
        representatives: result.representatives,
    };
    write_json(&artifact, &out(cfg, SELECTION)).in_stage(stage, DATA)?;
    Ok(format!("k = {}, representatives: {}", artifact.chosen_k, artifact.representatives.join(", ")))
}

/// Masks keyed by file stem.
fn load_masks(dir: &Path, stage: Stage) -> Result<BTreeMap<String, SegmentMask>, CliError> {
    let mut out = BTreeMap::new();
    for path in files_with_extension(dir, "png").in_stage(stage, DATA)? {
        let loaded = load_mask(&path).in_stage(stage, DATA)?;
        for w in &loaded.warnings {
            warn!("{}: {w}", path.display());
        }
        out.insert(stem(&path), loaded.mask);
    }
    Ok(out)
}

pub fn fuse(cfg: &PipelineConfig) -> Result<String, CliError> {
    let stage = Stage::Fuse;
    let filter: FilterArtifact = read_json(&require_artifact(cfg, FILTER_REPORT, stage)?).in_stage(stage, DATA)?;
    let selection: SelectionArtifact = read_json(&require_artifact(cfg, SELECTION, stage)?).in_stage(stage, DATA)?;
    let mut model = load_model(cfg, stage)?;
    let kept: BTreeSet<u64> = filter.kept.iter().copied().collect();
    model.points.retain(|p| kept.contains(&p.point_id));

    let dir = cfg.inputs.masks.as_deref().ok_or_else(|| CliError::config("masks", "not set"))?;
    let by_stem = load_masks(dir, stage)?;
    let mut masks = Vec::new();
    let mut missing = Vec::new();
    for view in &selection.representatives {
        match by_stem.get(&stem(Path::new(view))) {
            Some(m) => {
                let mut m = m.clone();
                m.view_name.clone_from(view);
                masks.push(m);
            }
            None => {
                warn!("no mask for representative view {view}");
                missing.push(view.clone());
            }
        }
    }
    if masks.is_empty() {
        return Err(CliError::Stage {
            stage,
            kind: DATA,
            source: anyhow!("none of the representative views has a mask in {}", dir.display()),
        });
    }
    let assignments = assign_all_views(&model, &masks, cfg.params.fusion()).in_stage(stage, DATA)?;
    let map = build_global_map(&assignments, cfg.params.overlap_threshold);
    let areas = map.segment_areas(&masks);
    let counts = map.segment_points();
    let segments = map
        .merged_from
        .iter()
        .map(|(&gid, members)| SegmentRow {
            global_id: gid,
            area: areas.get(&gid).copied().unwrap_or(0),
            point_count: counts.get(&gid).map_or(0, Vec::len),
            members: members.iter().map(|(v, l)| LinkRow { view: v.clone(), label: *l }).collect(),
        })
        .collect();
    let artifact = SegmentsArtifact {
        views: masks.iter().map(|m| m.view_name.clone()).collect(),
        missing_masks: missing,
        segments,
        point_labels: map.point_labels,
    };
    write_json(&artifact, &out(cfg, SEGMENTS)).in_stage(stage, DATA)?;
    Ok(format!("{} global segments over {} labeled points", artifact.segments.len(), artifact.point_labels.len()))
}

pub fn densify(cfg: &PipelineConfig) -> Result<String, CliError> {
    let stage = Stage::Densify;
    let segments: SegmentsArtifact = read_json(&require_artifact(cfg, SEGMENTS, stage)?).in_stage(stage, DATA)?;
    let points = read_ply(&require_artifact(cfg, FILTERED_PLY, stage)?).in_stage(stage, DATA)?;
    let (cloud, report) =
        densify_cloud(&points, &segments.point_labels, &segments.areas(), &cfg.params.densify(cfg.seed));
    for s in &report.skipped {
        warn!("segment {} skipped: {}", s.global_id, s.reason);
    }
    write_labeled_ply(
        &cloud.points,
        cloud.segment.as_deref().unwrap_or_default(),
        cloud.synthetic.as_deref().unwrap_or_default(),
        &out(cfg, DENSIFIED_PLY),
    )
    .in_stage(stage, DATA)?;
    write_json(&report, &out(cfg, DENSIFY_REPORT)).in_stage(stage, DATA)?;
    Ok(format!("added {} points across {} segments", report.points_added_total, report.segments_touched))
}

fn metric_kind(e: &MetricError) -> FailureKind {
    match e {
        MetricError::ZeroNorm => FailureKind::Numeric,
        _ => DATA,
    }
}

fn metric<T>(r: Result<T, MetricError>, stage: Stage) -> Result<T, CliError> {
    r.map_err(|e| CliError::Stage { stage, kind: metric_kind(&e), source: e.into() })
}

/// Stems present in both `root/gt` and `root/render`.
fn paired(
    root: &Path,
    ext: &str,
    stage: Stage,
) -> Result<Vec<(String, std::path::PathBuf, std::path::PathBuf)>, CliError> {
    let gt = files_with_extension(&root.join("gt"), ext).in_stage(stage, DATA)?;
    let render: BTreeMap<String, std::path::PathBuf> = files_with_extension(&root.join("render"), ext)
        .in_stage(stage, DATA)?
        .into_iter()
        .map(|p| (stem(&p), p))
        .collect();
    Ok(gt
        .into_iter()
        .filter_map(|g| {
            let s = stem(&g);
            match render.get(&s) {
                Some(r) => Some((s, g, r.clone())),
                None => {
                    warn!("no render for {}", g.display());
                    None
                }
            }
        })
        .collect())
}

pub fn has_evaluation_inputs(cfg: &PipelineConfig) -> bool {
    let i = &cfg.inputs;
    i.images.is_some() || i.embeddings.is_some() || i.reference.is_some()
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<String, CliError> {
    let stage = Stage::Evaluate;
    let weights = cfg.params.weights();
    let scene = cfg.scene.as_str();
    let mut report = MetricReport::default();

    let mut images: BTreeMap<String, (ImageBuffer, ImageBuffer)> = BTreeMap::new();
    if let Some(dir) = &cfg.inputs.images {
        for (view, g, r) in paired(dir, "png", stage)? {
            let gt = metric(ImageBuffer::load(&g), stage)?;
            let render = metric(ImageBuffer::load(&r), stage)?;
            images.insert(view, (gt, render));
        }
    }
    let mut embeddings: BTreeMap<String, (EmbeddingVector, EmbeddingVector)> = BTreeMap::new();
    if let Some(dir) = &cfg.inputs.embeddings {
        for (view, g, r) in paired(dir, "emb", stage)? {
            let gt = load_embedding(&g).in_stage(stage, DATA)?;
            let render = load_embedding(&r).in_stage(stage, DATA)?;
            embeddings.insert(view, (gt, render));
        }
    }
    let views: BTreeSet<&String> = images.keys().chain(embeddings.keys()).collect();
    for view in views {
        if let Some((gt, r)) = images.get(view) {
            report.push(scene, view, "psnr", metric(psnr(gt, r), stage)?);
            report.push(scene, view, "ssim", metric(ssim(gt, r), stage)?);
            report.push(scene, view, "l1", metric(l1(gt, r), stage)?);
            report.push(scene, view, "l_photo", metric(l_photo(gt, r, &weights), stage)?);
        }
        if let Some((fg, fr)) = embeddings.get(view) {
            report.push(scene, view, "cosine", metric(cosine(fg, fr), stage)?);
            report.push(scene, view, "l_dino", metric(dino_loss(fg, fr, &weights), stage)?);
        }
        if let (Some((gt, r)), Some((fg, fr))) = (images.get(view), embeddings.get(view)) {
            report.push(scene, view, "l_total", metric(l_total(gt, r, fg, fr, &weights), stage)?);
        }
    }
    if let Some(reference) = &cfg.inputs.reference {
        let cloud_path =
            [DENSIFIED_PLY, FILTERED_PLY].iter().map(|n| out(cfg, n)).find(|p| p.exists()).ok_or_else(|| {
                CliError::Stage {
                    stage,
                    kind: DATA,
                    source: anyhow!(
                        "point-set distance needs {DENSIFIED_PLY} or {FILTERED_PLY} in the output directory"
                    ),
                }
            })?;
        let data: Vec<_> =
            read_ply_cloud(&cloud_path).in_stage(stage, DATA)?.points.iter().map(|p| p.position).collect();
        let refs: Vec<_> = read_ply(reference).in_stage(stage, DATA)?.iter().map(|p| p.position).collect();
        let d = metric(point_set_distance(&data, &refs), stage)?;
        report.push(scene, "cloud", "mean_d2s", d.mean_d2s);
        report.push(scene, "cloud", "mean_s2d", d.mean_s2d);
        report.push(scene, "cloud", "overall", d.overall);
    }
    let mut text = String::new();
    if cfg.inputs.reference.is_some() {
        text.push_str("# mean_d2s / mean_s2d: nearest-point distances between clouds, not point-to-mesh\n");
    }
    text.push_str(&report.to_aligned_text());
    std::fs::write(out(cfg, METRICS_TEXT), text).in_stage(stage, DATA)?;
    std::fs::write(out(cfg, METRICS_KV), report.to_key_values()).in_stage(stage, DATA)?;
    Ok(format!("{} metric values", report.entries.len()))
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<String, CliError> {
    match stage {
        Stage::Filter => filter(cfg),
        Stage::Cluster => cluster(cfg),
        Stage::Fuse => fuse(cfg),
        Stage::Densify => densify(cfg),
        Stage::Evaluate => evaluate(cfg),
    }
}
