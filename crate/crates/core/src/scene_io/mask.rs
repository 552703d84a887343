//! Per-view segment label rasters.
//!
//! A mask is a single-channel PNG (16-bit, or 8-bit for small label sets)
//! where 0 marks unlabeled cells and `k > 0` marks segment `k`. An optional
//! sidecar next to the raster (same stem, `.txt` extension) lists one record
//! per label:
//!
//! ```text
//! # label area x y w h
//! 1 1523 10 4 40 52
//! ```
//!
//! Areas and boxes are always recounted from the raster; sidecar values that
//! disagree are reported as warnings and overridden.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use thiserror::Error;

use super::CameraIntrinsics;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("{path}: {message}")]
    Raster { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Sidecar { path: String, line: usize, message: String },
    #[error("mask {view} is {mask_w}x{mask_h} but its camera is {cam_w}x{cam_h}")]
    DimensionMismatch { view: String, mask_w: u32, mask_h: u32, cam_w: u32, cam_h: u32 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn contains(&self, col: u32, row: u32) -> bool {
        col >= self.x && col < self.x + self.w && row >= self.y && row < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMask {
    pub view_name: String,
    pub width: u32,
    pub height: u32,
    labels: Vec<u16>,
    areas: BTreeMap<u16, u64>,
    bboxes: BTreeMap<u16, BBox>,
}

impl SegmentMask {
    /// Builds a mask from a row-major label raster, computing areas and boxes.
    ///
    /// # Panics
    /// If `labels.len() != width * height`.
    pub fn from_raster(view_name: impl Into<String>, width: u32, height: u32, labels: Vec<u16>) -> Self {
        assert_eq!(labels.len(), width as usize * height as usize, "raster size");
        let mut areas = BTreeMap::new();
        // (min_x, min_y, max_x, max_y)
        let mut extents: BTreeMap<u16, (u32, u32, u32, u32)> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let (x, y) = ((i % width as usize) as u32, (i / width as usize) as u32);
            *areas.entry(l).or_insert(0) += 1;
            extents
                .entry(l)
                .and_modify(|e| {
                    e.0 = e.0.min(x);
                    e.1 = e.1.min(y);
                    e.2 = e.2.max(x);
                    e.3 = e.3.max(y);
                })
                .or_insert((x, y, x, y));
        }
        let bboxes = extents
            .into_iter()
            .map(|(l, (x0, y0, x1, y1))| (l, BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 }))
            .collect();
        Self { view_name: view_name.into(), width, height, labels, areas, bboxes }
    }

    pub fn label_at(&self, col: u32, row: u32) -> u16 {
        self.labels[row as usize * self.width as usize + col as usize]
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn areas(&self) -> &BTreeMap<u16, u64> {
        &self.areas
    }

    pub fn area(&self, label: u16) -> u64 {
        self.areas.get(&label).copied().unwrap_or(0)
    }

    pub fn bboxes(&self) -> &BTreeMap<u16, BBox> {
        &self.bboxes
    }

    pub fn segment_count(&self) -> usize {
        self.areas.len()
    }

    pub fn unlabeled_count(&self) -> u64 {
        self.labels.iter().filter(|&&l| l == 0).count() as u64
    }

    pub fn check_dimensions(&self, cam: &CameraIntrinsics) -> Result<(), MaskError> {
        if self.width != cam.width || self.height != cam.height {
            return Err(MaskError::DimensionMismatch {
                view: self.view_name.clone(),
                mask_w: self.width,
                mask_h: self.height,
                cam_w: cam.width,
                cam_h: cam.height,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LoadedMask {
    pub mask: SegmentMask,
    pub warnings: Vec<String>,
}

pub fn sidecar_path(raster: &Path) -> PathBuf {
    raster.with_extension("txt")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SidecarRecord {
    area: u64,
    bbox: BBox,
}

fn parse_sidecar(path: &Path, text: &str) -> Result<BTreeMap<u16, SidecarRecord>, MaskError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |message: String| MaskError::Sidecar { path: path.display().to_string(), line: i + 1, message };
        let toks: Vec<&str> = t.split_whitespace().collect();
        if toks.len() != 6 {
            return Err(err(format!("expected 'label area x y w h', got {} fields", toks.len())));
        }
        let label: u16 = toks[0].parse().map_err(|_| err(format!("bad label {:?}", toks[0])))?;
        let nums = toks[1..]
            .iter()
            .map(|s| s.parse::<u64>().map_err(|_| err(format!("bad number {s:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let u = |v: u64| u32::try_from(v).map_err(|_| err(format!("{v} out of range")));
        let rec = SidecarRecord {
            area: nums[0],
            bbox: BBox { x: u(nums[1])?, y: u(nums[2])?, w: u(nums[3])?, h: u(nums[4])? },
        };
        if label == 0 {
            return Err(err("label 0 is reserved for unlabeled cells".into()));
        }
        if out.insert(label, rec).is_some() {
            return Err(err(format!("duplicate label {label}")));
        }
    }
    Ok(out)
}

fn reconcile(mask: &SegmentMask, sidecar: &BTreeMap<u16, SidecarRecord>) -> Vec<String> {
    let mut warnings = Vec::new();
    for (label, rec) in sidecar {
        match mask.areas.get(label) {
            None => warnings
                .push(format!("{}: sidecar label {label} does not occur in the raster; dropped", mask.view_name)),
            Some(&area) => {
                if area != rec.area {
                    warnings.push(format!(
                        "{}: label {label} sidecar area {} but raster holds {area}; using {area}",
                        mask.view_name, rec.area
                    ));
                }
                let bbox = mask.bboxes[label];
                if bbox != rec.bbox {
                    warnings.push(format!(
                        "{}: label {label} sidecar bbox {:?} disagrees with raster bbox {:?}; using raster",
                        mask.view_name, rec.bbox, bbox
                    ));
                }
            }
        }
    }
    for label in mask.areas.keys() {
        if !sidecar.contains_key(label) {
            warnings.push(format!("{}: raster label {label} missing from sidecar", mask.view_name));
        }
    }
    warnings
}

/// Loads a label raster and, when present, its sidecar.
pub fn load_mask(path: &Path) -> Result<LoadedMask, MaskError> {
    let raster_err = |message: String| MaskError::Raster { path: path.display().to_string(), message };
    let img = image::open(path).map_err(|e| raster_err(e.to_string()))?;
    let (width, height) = (img.width(), img.height());
    let labels: Vec<u16> = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        other => {
            return Err(raster_err(format!("label raster must be single-channel grayscale, got {:?}", other.color())))
        }
    };
    let view_name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mask = SegmentMask::from_raster(view_name, width, height, labels);

    let side = sidecar_path(path);
    let warnings = if side.is_file() {
        let text =
            fs::read_to_string(&side).map_err(|source| MaskError::Io { path: side.display().to_string(), source })?;
        reconcile(&mask, &parse_sidecar(&side, &text)?)
    } else {
        Vec::new()
    };
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(LoadedMask { mask, warnings })
}

pub fn encode_sidecar(mask: &SegmentMask) -> String {
    let mut s = String::from("# label area x y w h\n");
    for (label, area) in &mask.areas {
        let b = mask.bboxes[label];
        let _ = writeln!(s, "{label} {area} {} {} {} {}", b.x, b.y, b.w, b.h);
    }
    s
}

/// Writes the raster as a 16-bit PNG at `path` plus its sidecar.
pub fn save_mask(mask: &SegmentMask, path: &Path) -> Result<(), MaskError> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(mask.width, mask.height, mask.labels.clone())
        .expect("raster size checked at construction");
    buf.save(path).map_err(|e| MaskError::Raster { path: path.display().to_string(), message: e.to_string() })?;
    let side = sidecar_path(path);
    fs::write(&side, encode_sidecar(mask)).map_err(|source| MaskError::Io { path: side.display().to_string(), source })
}
