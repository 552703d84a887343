//! On-disk stage artifacts. Stages talk to each other only through these files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILTERED_PLY: &str = "filtered.ply";
pub const FILTER_REPORT: &str = "filter.json";
pub const SELECTION: &str = "selection.json";
pub const SEGMENTS: &str = "segments.json";
pub const DENSIFIED_PLY: &str = "densified.ply";
pub const DENSIFY_REPORT: &str = "densify.json";
pub const METRICS_TEXT: &str = "metrics.txt";
pub const METRICS_KV: &str = "metrics.kv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterArtifact {
    pub input_points: usize,
    pub kept: Vec<u64>,
    pub removed: Vec<u64>,
    pub threshold_used: f64,
    pub core_size: usize,
    pub core_degraded: bool,
    pub hull_vertices: usize,
    pub hull_facets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub k: usize,
    pub coverage: f64,
    pub compactness: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub representative: String,
    pub views: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionArtifact {
    pub chosen_k: usize,
    pub inertia: f64,
    pub scores: Vec<ScoreRow>,
    pub clusters: Vec<ClusterRow>,
    /// Fusion processing order.
    pub representatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRow {
    pub view: String,
    pub label: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub global_id: u32,
    pub area: u64,
    pub point_count: usize,
    pub members: Vec<LinkRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentsArtifact {
    pub views: Vec<String>,
    pub missing_masks: Vec<String>,
    pub segments: Vec<SegmentRow>,
    pub point_labels: BTreeMap<u64, u32>,
}

impl SegmentsArtifact {
    pub fn areas(&self) -> BTreeMap<u32, u64> {
        self.segments.iter().map(|s| (s.global_id, s.area)).collect()
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Regular files under `root` (or `root` itself), sorted, as paths relative to `root`.
pub fn list_files(root: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![PathBuf::new()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let dir = root.join(&rel);
        for entry in fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let entry = entry?;
            let child = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                stack.push(child);
            } else {
                out.push(child);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Files directly inside `dir` with the given extension, sorted by name.
pub fn files_with_extension(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
