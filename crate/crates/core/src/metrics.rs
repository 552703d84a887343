//! Image, embedding and point-set metrics, and the training losses built from them.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::scene_io::EmbeddingVector;
use crate::spatial::KdTree;

pub const DEFAULT_LAMBDA_DINO: f64 = 0.05;
pub const DEFAULT_LAMBDA_DSSIM: f64 = 0.2;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((u32, u32, u8), (u32, u32, u8)),
    #[error("embedding dims differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("point set is empty")]
    EmptySet,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Row-major image with values in `[0, 1]`, interleaved by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    values: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, values: Vec<f64>) -> Result<Self, MetricError> {
        if channels != 1 && channels != 3 {
            return Err(MetricError::InvalidImage(format!("{channels} channels")));
        }
        if width == 0 || height == 0 {
            return Err(MetricError::InvalidImage("zero-sized image".into()));
        }
        let expected = width as usize * height as usize * channels as usize;
        if values.len() != expected {
            return Err(MetricError::InvalidImage(format!("{} values for {width}x{height}x{channels}", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MetricError::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, values })
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: f64) -> Result<Self, MetricError> {
        Self::new(width, height, channels, vec![value; width as usize * height as usize * channels as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn shape(&self) -> (u32, u32, u8) {
        (self.width, self.height, self.channels)
    }

    fn plane(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.channels as usize).copied().collect()
    }

    /// Converts a decoded image; alpha is dropped, gray stays single-channel.
    pub fn from_dynamic(img: &image::DynamicImage) -> Result<Self, MetricError> {
        use image::DynamicImage as D;
        let (w, h) = (img.width(), img.height());
        match img {
            D::ImageLuma8(_) | D::ImageLumaA8(_) => {
                let g = img.to_luma8();
                Self::new(w, h, 1, g.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
            }
            D::ImageLuma16(_) | D::ImageLumaA16(_) => {
                let g = img.to_luma16();
                Self::new(w, h, 1, g.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect())
            }
            D::ImageRgb16(_) | D::ImageRgba16(_) => {
                let c = img.to_rgb16();
                Self::new(w, h, 3, c.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect())
            }
            _ => {
                let c = img.to_rgb8();
                Self::new(w, h, 3, c.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect())
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let img =
            image::open(path).map_err(|source| MetricError::Decode { path: path.display().to_string(), source })?;
        Self::from_dynamic(&img)
    }
}

fn check_shapes(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

pub fn cosine(f_gt: &EmbeddingVector, f_r: &EmbeddingVector) -> Result<f64, MetricError> {
    if f_gt.dim() != f_r.dim() {
        return Err(MetricError::DimMismatch(f_gt.dim(), f_r.dim()));
    }
    let (a, b) = (f_gt.values(), f_r.values());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let sa: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum();
    let sb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum();
    if sa.sqrt() <= NORM_FLOOR || sb.sqrt() <= NORM_FLOOR {
        return Err(MetricError::ZeroNorm);
    }
    // One square root keeps cosine(f, f) and cosine(f, -f) exact.
    Ok((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

/// How the semantic term turns a cosine into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DinoSign {
    /// `λ · cos`
    PaperLiteral,
    /// `λ · (1 − cos)`
    #[default]
    Dissimilarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossWeights {
    pub lambda_dino: f64,
    pub lambda_dssim: f64,
    pub dino_sign: DinoSign,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dino: DEFAULT_LAMBDA_DINO,
            lambda_dssim: DEFAULT_LAMBDA_DSSIM,
            dino_sign: DinoSign::Dissimilarity,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.lambda_dssim) && self.lambda_dino >= 0.0 && self.lambda_dino.is_finite()
    }
}

pub fn dino_loss(f_gt: &EmbeddingVector, f_r: &EmbeddingVector, weights: &LossWeights) -> Result<f64, MetricError> {
    let c = cosine(f_gt, f_r)?;
    Ok(match weights.dino_sign {
        DinoSign::PaperLiteral => weights.lambda_dino * c,
        DinoSign::Dissimilarity => weights.lambda_dino * (1.0 - c),
    })
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Valid-region separable correlation.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let rows: Vec<f64> = (0..h)
        .flat_map(|y| {
            let row = &plane[y * w..(y + 1) * w];
            (0..ow).map(move |x| row[x..x + n].iter().zip(k).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect();
    (0..oh)
        .flat_map(|y| {
            let rows = &rows;
            (0..ow).map(move |x| (0..n).map(|j| rows[(y + j) * ow + x] * k[j]).sum::<f64>())
        })
        .collect()
}

/// Window side used for a `w × h` image: 11, or the largest odd size that fits.
pub fn ssim_window(w: u32, h: u32) -> usize {
    let fit = w.min(h) as usize;
    if fit >= SSIM_WINDOW {
        SSIM_WINDOW
    } else if fit % 2 == 1 {
        fit
    } else {
        fit - 1
    }
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, k: &[f64]) -> f64 {
    let sq = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, w, h, k);
    let mu_b = filter_valid(b, w, h, k);
    let e_aa = filter_valid(&sq(a, a), w, h, k);
    let e_bb = filter_valid(&sq(b, b), w, h, k);
    let e_ab = filter_valid(&sq(a, b), w, h, k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale Gaussian SSIM over the valid region, averaged over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    let k = gaussian_kernel(ssim_window(a.width, a.height), SSIM_SIGMA);
    let per_channel: Vec<f64> =
        (0..a.channels as usize).into_par_iter().map(|c| ssim_plane(&a.plane(c), &b.plane(c), w, h, &k)).collect();
    Ok(per_channel.iter().sum::<f64>() / per_channel.len() as f64)
}

pub fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.values.len() as f64)
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.values.len() as f64)
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)`.
pub fn l_photo(gt: &ImageBuffer, r: &ImageBuffer, weights: &LossWeights) -> Result<f64, MetricError> {
    let l = l1(gt, r)?;
    let s = ssim(gt, r)?;
    Ok((1.0 - weights.lambda_dssim) * l + weights.lambda_dssim * (1.0 - s))
}

pub fn l_total(
    gt: &ImageBuffer,
    r: &ImageBuffer,
    f_gt: &EmbeddingVector,
    f_r: &EmbeddingVector,
    weights: &LossWeights,
) -> Result<f64, MetricError> {
    Ok(l_photo(gt, r, weights)? + dino_loss(f_gt, f_r, weights)?)
}

/// Peak signal-to-noise ratio in dB; infinite for identical images.
pub fn psnr(gt: &ImageBuffer, r: &ImageBuffer) -> Result<f64, MetricError> {
    let m = mse(gt, r)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / m).log10() })
}

/// Nearest-neighbour distances between two point sets (point-to-point, no mesh).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointSetDistance {
    pub mean_d2s: f64,
    pub mean_s2d: f64,
    pub overall: f64,
}

impl PointSetDistance {
    pub fn from_components(mean_d2s: f64, mean_s2d: f64) -> Self {
        Self { mean_d2s, mean_s2d, overall: (mean_d2s + mean_s2d) / 2.0 }
    }
}

fn mean_nn_distance(from: &[Vector3<f64>], to: &KdTree) -> f64 {
    let dists: Vec<f64> = from.par_iter().map(|p| to.nearest(p, None).map_or(0.0, |n| n.dist())).collect();
    dists.iter().sum::<f64>() / from.len() as f64
}

pub fn point_set_distance(d: &[Vector3<f64>], s: &[Vector3<f64>]) -> Result<PointSetDistance, MetricError> {
    if d.is_empty() || s.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let d2s = mean_nn_distance(d, &KdTree::new(s));
    let s2d = mean_nn_distance(s, &KdTree::new(d));
    Ok(PointSetDistance::from_components(d2s, s2d))
}

/// Formats a metric value; infinities become `inf` / `-inf`.
pub fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub scene: String,
    pub view: String,
    pub name: String,
    pub value: f64,
}

/// Named scalar metrics keyed by scene and view.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn push(&mut self, scene: &str, view: &str, name: &str, value: f64) {
        self.entries.push(MetricEntry { scene: scene.into(), view: view.into(), name: name.into(), value });
    }

    pub fn get(&self, view: &str, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.view == view && e.name == name).map(|e| e.value)
    }

    /// Column-aligned table with a header row.
    pub fn to_aligned_text(&self) -> String {
        let header = ["scene", "view", "metric", "value"];
        let rows: Vec<[String; 4]> = self
            .entries
            .iter()
            .map(|e| [e.scene.clone(), e.view.clone(), e.name.clone(), format_value(e.value)])
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |cells: [&str; 4]| {
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$}",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        };
        line(header);
        for r in &rows {
            line([&r[0], &r[1], &r[2], &r[3]]);
        }
        out
    }

    /// One `scene/view/metric=value` record per line.
    pub fn to_key_values(&self) -> String {
        self.entries.iter().map(|e| format!("{}/{}/{}={}\n", e.scene, e.view, e.name, format_value(e.value))).collect()
    }
}
