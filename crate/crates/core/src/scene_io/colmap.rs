//! COLMAP sparse-model parser and writer.
//!
//! Both the binary (`cameras.bin`, `images.bin`, `points3D.bin`) and the
//! text (`*.txt`) variants are supported. Layouts follow COLMAP's
//! `model/reconstruction_io` writers:
//!
//! ```text
//! cameras.bin   u64 count; { u32 id, i32 model, u64 width, u64 height, f64 params[] }
//! images.bin    u64 count; { u32 id, f64 qw qx qy qz, f64 tx ty tz, u32 camera_id,
//!                            name\0, u64 n2d, { f64 x, f64 y, u64 point3d_id } }
//! points3D.bin  u64 count; { u64 id, f64 xyz, u8 rgb, f64 error,
//!                            u64 track_len, { u32 image_id, u32 point2d_idx } }
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use super::{
    canonical_quaternion, CameraIntrinsics, CameraModelKind, CameraPose, Keypoint, SceneModel, ScenePoint, TrackElement,
};

const INVALID_POINT3D_ID: u64 = u64::MAX;
const QUATERNION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFormat {
    Binary,
    Text,
}

impl ModelFormat {
    fn extension(self) -> &'static str {
        match self {
            ModelFormat::Binary => "bin",
            ModelFormat::Text => "txt",
        }
    }
}

/// Where in an input stream a record starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Byte(u64),
    Line(usize),
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Byte(b) => write!(f, "byte {b}"),
            Location::Line(l) => write!(f, "line {l}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("{file}: stream truncated at byte {offset} while reading {what}")]
    Truncated { file: &'static str, offset: u64, what: &'static str },
    #[error("{file}: unknown camera model {model} at {at}")]
    UnknownCameraModel { file: &'static str, model: String, at: Location },
    #[error("{file}: camera model {model} at {at} has lens distortion; only PINHOLE and SIMPLE_PINHOLE are supported")]
    UnsupportedCameraModel { file: &'static str, model: String, at: Location },
    #[error("{file}: image {image_id} at {at} references missing camera {camera_id}")]
    DanglingCamera { file: &'static str, image_id: u32, camera_id: u32, at: Location },
    #[error("{file}: point {point_id} at {at} references missing image {image_id}")]
    DanglingView { file: &'static str, point_id: u64, image_id: u32, at: Location },
    #[error("{file}: duplicate {what} id {id} at {at}")]
    Duplicate { file: &'static str, what: &'static str, id: u64, at: Location },
    #[error("{file}: image {image_id} at {at} has non-unit quaternion (norm {norm})")]
    BadQuaternion { file: &'static str, image_id: u32, norm: f64, at: Location },
    #[error("{file}: camera {camera_id} at {at} has invalid intrinsics")]
    InvalidIntrinsics { file: &'static str, camera_id: u32, at: Location },
    #[error("{file}: declared {declared} records but found {found}")]
    CountMismatch { file: &'static str, declared: u64, found: u64 },
    #[error("{file}: {extra} trailing bytes after the last record (byte {offset})")]
    TrailingBytes { file: &'static str, extra: usize, offset: u64 },
    #[error("{file}: {at}: {message}")]
    Syntax { file: &'static str, at: Location, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, ColmapError>;

const CAMERAS: &str = "cameras";
const IMAGES: &str = "images";
const POINTS: &str = "points3D";

/// Parameter counts for every COLMAP model code, so that distortion models can
/// be told apart from garbage codes.
fn colmap_model_by_code(code: i32) -> Option<(&'static str, usize)> {
    Some(match code {
        0 => ("SIMPLE_PINHOLE", 3),
        1 => ("PINHOLE", 4),
        2 => ("SIMPLE_RADIAL", 4),
        3 => ("RADIAL", 5),
        4 => ("OPENCV", 8),
        5 => ("OPENCV_FISHEYE", 8),
        6 => ("FULL_OPENCV", 12),
        7 => ("FOV", 5),
        8 => ("SIMPLE_RADIAL_FISHEYE", 4),
        9 => ("RADIAL_FISHEYE", 5),
        10 => ("THIN_PRISM_FISHEYE", 12),
        11 => ("RAD_TAN_THIN_PRISM_FISHEYE", 16),
        _ => return None,
    })
}

fn supported_model(name: &str) -> Option<CameraModelKind> {
    match name {
        "SIMPLE_PINHOLE" => Some(CameraModelKind::SimplePinhole),
        "PINHOLE" => Some(CameraModelKind::Pinhole),
        _ => None,
    }
}

fn intrinsics_from_params(
    camera_id: u32,
    model: CameraModelKind,
    width: u64,
    height: u64,
    params: &[f64],
    file: &'static str,
    at: Location,
) -> Result<CameraIntrinsics> {
    let (fx, fy, cx, cy) = match model {
        CameraModelKind::SimplePinhole => (params[0], params[0], params[1], params[2]),
        CameraModelKind::Pinhole => (params[0], params[1], params[2], params[3]),
    };
    let invalid = || ColmapError::InvalidIntrinsics { file, camera_id, at };
    let width = u32::try_from(width).map_err(|_| invalid())?;
    let height = u32::try_from(height).map_err(|_| invalid())?;
    let cam = CameraIntrinsics { camera_id, model, width, height, fx, fy, cx, cy };
    if cam.is_valid() {
        Ok(cam)
    } else {
        Err(invalid())
    }
}

fn unit_quaternion(wxyz: [f64; 4], image_id: u32, file: &'static str, at: Location) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_TOLERANCE {
        return Err(ColmapError::BadQuaternion { file, image_id, norm, at });
    }
    // Already-unit values are kept bit-exact so that write/parse round-trips.
    let unit =
        if (norm - 1.0).abs() <= 1e-12 { UnitQuaternion::new_unchecked(q) } else { UnitQuaternion::from_quaternion(q) };
    Ok(canonical_quaternion(unit))
}

/// Parses a sparse model from the three COLMAP streams.
pub fn parse_colmap_model(
    camera_bytes: &[u8],
    image_bytes: &[u8],
    point_bytes: &[u8],
    format: ModelFormat,
) -> Result<SceneModel> {
    let mut model = match format {
        ModelFormat::Binary => {
            let cameras = binary::cameras(camera_bytes)?;
            let views = binary::images(image_bytes, &cameras)?;
            let points = binary::points(point_bytes, &views)?;
            SceneModel { cameras, views, points }
        }
        ModelFormat::Text => {
            let cameras = text::cameras(&utf8(camera_bytes, CAMERAS)?)?;
            let views = text::images(&utf8(image_bytes, IMAGES)?, &cameras)?;
            let points = text::points(&utf8(point_bytes, POINTS)?, &views)?;
            SceneModel { cameras, views, points }
        }
    };
    model.sort();
    Ok(model)
}

fn utf8<'a>(bytes: &'a [u8], file: &'static str) -> Result<std::borrow::Cow<'a, str>> {
    std::str::from_utf8(bytes).map(std::borrow::Cow::Borrowed).map_err(|e| ColmapError::Syntax {
        file,
        at: Location::Byte(e.valid_up_to() as u64),
        message: "invalid UTF-8".into(),
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| ColmapError::Io { path: path.display().to_string(), source })
}

/// Detects the model format from the files present in `dir`.
pub fn detect_format(dir: &Path) -> Option<ModelFormat> {
    if dir.join("cameras.bin").is_file() {
        Some(ModelFormat::Binary)
    } else if dir.join("cameras.txt").is_file() {
        Some(ModelFormat::Text)
    } else {
        None
    }
}

/// Reads `cameras.*`, `images.*` and `points3D.*` from a model directory.
/// With `format = None` the binary variant is preferred when both exist.
pub fn read_colmap_dir(dir: &Path, format: Option<ModelFormat>) -> Result<SceneModel> {
    let format = match format.or_else(|| detect_format(dir)) {
        Some(f) => f,
        None => {
            return Err(ColmapError::Io {
                path: dir.display().to_string(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "no cameras.bin or cameras.txt in model directory",
                ),
            })
        }
    };
    let ext = format.extension();
    let cams = read_file(&dir.join(format!("cameras.{ext}")))?;
    let imgs = read_file(&dir.join(format!("images.{ext}")))?;
    let pts = read_file(&dir.join(format!("points3D.{ext}")))?;
    parse_colmap_model(&cams, &imgs, &pts, format)
}

/// Encodes a model as the three COLMAP streams.
pub fn encode_colmap_model(model: &SceneModel, format: ModelFormat) -> [Vec<u8>; 3] {
    match format {
        ModelFormat::Binary => [binary::write_cameras(model), binary::write_images(model), binary::write_points(model)],
        ModelFormat::Text => [
            text::write_cameras(model).into_bytes(),
            text::write_images(model).into_bytes(),
            text::write_points(model).into_bytes(),
        ],
    }
}

pub fn write_colmap_dir(model: &SceneModel, dir: &Path, format: ModelFormat) -> Result<()> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| ColmapError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ext = format.extension();
    let [c, i, p] = encode_colmap_model(model, format);
    for (stem, bytes) in [("cameras", c), ("images", i), ("points3D", p)] {
        let path = dir.join(format!("{stem}.{ext}"));
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    Ok(())
}

mod binary {
    use super::*;

    struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
        file: &'static str,
    }

    impl<'a> Reader<'a> {
        fn new(buf: &'a [u8], file: &'static str) -> Self {
            Self { buf, pos: 0, file }
        }

        fn at(&self) -> Location {
            Location::Byte(self.pos as u64)
        }

        fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
            if self.buf.len() - self.pos < n {
                return Err(ColmapError::Truncated { file: self.file, offset: self.pos as u64, what });
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        fn u8(&mut self, what: &'static str) -> Result<u8> {
            Ok(self.take(1, what)?[0])
        }

        fn u32(&mut self, what: &'static str) -> Result<u32> {
            Ok(LittleEndian::read_u32(self.take(4, what)?))
        }

        fn i32(&mut self, what: &'static str) -> Result<i32> {
            Ok(LittleEndian::read_i32(self.take(4, what)?))
        }

        fn u64(&mut self, what: &'static str) -> Result<u64> {
            Ok(LittleEndian::read_u64(self.take(8, what)?))
        }

        fn f64(&mut self, what: &'static str) -> Result<f64> {
            Ok(LittleEndian::read_f64(self.take(8, what)?))
        }

        fn cstr(&mut self, what: &'static str) -> Result<String> {
            let start = self.pos;
            let rest = &self.buf[start..];
            let Some(len) = rest.iter().position(|&b| b == 0) else {
                return Err(ColmapError::Truncated { file: self.file, offset: self.buf.len() as u64, what });
            };
            let name = String::from_utf8_lossy(&rest[..len]).into_owned();
            self.pos += len + 1;
            Ok(name)
        }

        /// Reads a declared record count, rejecting counts that cannot fit in
        /// the remaining bytes given a minimum record size.
        fn count(&mut self, min_record: usize) -> Result<u64> {
            let n = self.u64("record count")?;
            let remaining = (self.buf.len() - self.pos) as u64;
            if n.saturating_mul(min_record as u64) > remaining {
                return Err(ColmapError::Truncated {
                    file: self.file,
                    offset: self.buf.len() as u64,
                    what: "declared records",
                });
            }
            Ok(n)
        }

        fn finish(&self) -> Result<()> {
            if self.pos != self.buf.len() {
                return Err(ColmapError::TrailingBytes {
                    file: self.file,
                    extra: self.buf.len() - self.pos,
                    offset: self.pos as u64,
                });
            }
            Ok(())
        }
    }

    pub(super) fn cameras(bytes: &[u8]) -> Result<BTreeMap<u32, CameraIntrinsics>> {
        let mut r = Reader::new(bytes, CAMERAS);
        let n = r.count(24)?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let at = r.at();
            let camera_id = r.u32("camera id")?;
            let code = r.i32("camera model")?;
            let width = r.u64("camera width")?;
            let height = r.u64("camera height")?;
            let Some((name, nparams)) = colmap_model_by_code(code) else {
                return Err(ColmapError::UnknownCameraModel { file: CAMERAS, model: format!("code {code}"), at });
            };
            let Some(kind) = supported_model(name) else {
                return Err(ColmapError::UnsupportedCameraModel { file: CAMERAS, model: name.to_string(), at });
            };
            let mut params = Vec::with_capacity(nparams);
            for _ in 0..nparams {
                params.push(r.f64("camera params")?);
            }
            let cam = intrinsics_from_params(camera_id, kind, width, height, &params, CAMERAS, at)?;
            if out.insert(camera_id, cam).is_some() {
                return Err(ColmapError::Duplicate { file: CAMERAS, what: "camera", id: camera_id.into(), at });
            }
        }
        r.finish()?;
        Ok(out)
    }

    pub(super) fn images(bytes: &[u8], cameras: &BTreeMap<u32, CameraIntrinsics>) -> Result<Vec<CameraPose>> {
        let mut r = Reader::new(bytes, IMAGES);
        let n = r.count(73)?;
        let mut views = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..n {
            let at = r.at();
            let image_id = r.u32("image id")?;
            let mut q = [0.0; 4];
            for v in &mut q {
                *v = r.f64("image quaternion")?;
            }
            let mut t = [0.0; 3];
            for v in &mut t {
                *v = r.f64("image translation")?;
            }
            let camera_id = r.u32("image camera id")?;
            let name = r.cstr("image name")?;
            let n2d = r.u64("keypoint count")?;
            if n2d.saturating_mul(24) > (bytes.len() - r.pos) as u64 {
                return Err(ColmapError::Truncated { file: IMAGES, offset: bytes.len() as u64, what: "keypoints" });
            }
            let mut keypoints = Vec::with_capacity(n2d as usize);
            for _ in 0..n2d {
                let x = r.f64("keypoint x")?;
                let y = r.f64("keypoint y")?;
                let id = r.u64("keypoint point3D id")?;
                keypoints.push(Keypoint { xy: [x, y], point3d_id: (id != INVALID_POINT3D_ID).then_some(id) });
            }
            if !cameras.contains_key(&camera_id) {
                return Err(ColmapError::DanglingCamera { file: IMAGES, image_id, camera_id, at });
            }
            if !seen.insert(image_id) {
                return Err(ColmapError::Duplicate { file: IMAGES, what: "image", id: image_id.into(), at });
            }
            let rotation = unit_quaternion(q, image_id, IMAGES, at)?;
            views.push(CameraPose {
                image_id,
                view_name: name,
                rotation,
                translation: Vector3::from(t),
                camera_id,
                keypoints,
            });
        }
        r.finish()?;
        Ok(views)
    }

    pub(super) fn points(bytes: &[u8], views: &[CameraPose]) -> Result<Vec<ScenePoint>> {
        let image_ids: HashSet<u32> = views.iter().map(|v| v.image_id).collect();
        let mut r = Reader::new(bytes, POINTS);
        let n = r.count(51)?;
        let mut points = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..n {
            let at = r.at();
            let point_id = r.u64("point id")?;
            let mut xyz = [0.0; 3];
            for v in &mut xyz {
                *v = r.f64("point position")?;
            }
            let color = [r.u8("point color")?, r.u8("point color")?, r.u8("point color")?];
            let error = r.f64("point error")?;
            let len = r.u64("track length")?;
            if len.saturating_mul(8) > (bytes.len() - r.pos) as u64 {
                return Err(ColmapError::Truncated { file: POINTS, offset: bytes.len() as u64, what: "track" });
            }
            let mut track = Vec::with_capacity(len as usize);
            for _ in 0..len {
                let image_id = r.u32("track image id")?;
                let point2d_idx = r.u32("track keypoint index")?;
                if !image_ids.contains(&image_id) {
                    return Err(ColmapError::DanglingView { file: POINTS, point_id, image_id, at });
                }
                track.push(TrackElement { image_id, point2d_idx });
            }
            if !seen.insert(point_id) {
                return Err(ColmapError::Duplicate { file: POINTS, what: "point", id: point_id, at });
            }
            points.push(ScenePoint { point_id, position: Vector3::from(xyz), color, reprojection_error: error, track });
        }
        r.finish()?;
        Ok(points)
    }

    pub(super) fn write_cameras(model: &SceneModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_u64::<LittleEndian>(model.cameras.len() as u64).unwrap();
        for cam in model.cameras.values() {
            out.write_u32::<LittleEndian>(cam.camera_id).unwrap();
            out.write_i32::<LittleEndian>(cam.model.colmap_id()).unwrap();
            out.write_u64::<LittleEndian>(cam.width.into()).unwrap();
            out.write_u64::<LittleEndian>(cam.height.into()).unwrap();
            for p in cam.params() {
                out.write_f64::<LittleEndian>(p).unwrap();
            }
        }
        out
    }

    pub(super) fn write_images(model: &SceneModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_u64::<LittleEndian>(model.views.len() as u64).unwrap();
        for v in &model.views {
            out.write_u32::<LittleEndian>(v.image_id).unwrap();
            let q = v.rotation.quaternion();
            for c in [q.w, q.i, q.j, q.k] {
                out.write_f64::<LittleEndian>(c).unwrap();
            }
            for c in v.translation.iter() {
                out.write_f64::<LittleEndian>(*c).unwrap();
            }
            out.write_u32::<LittleEndian>(v.camera_id).unwrap();
            out.write_all(v.view_name.as_bytes()).unwrap();
            out.push(0);
            out.write_u64::<LittleEndian>(v.keypoints.len() as u64).unwrap();
            for kp in &v.keypoints {
                out.write_f64::<LittleEndian>(kp.xy[0]).unwrap();
                out.write_f64::<LittleEndian>(kp.xy[1]).unwrap();
                out.write_u64::<LittleEndian>(kp.point3d_id.unwrap_or(INVALID_POINT3D_ID)).unwrap();
            }
        }
        out
    }

    pub(super) fn write_points(model: &SceneModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_u64::<LittleEndian>(model.points.len() as u64).unwrap();
        for p in &model.points {
            out.write_u64::<LittleEndian>(p.point_id).unwrap();
            for c in p.position.iter() {
                out.write_f64::<LittleEndian>(*c).unwrap();
            }
            out.extend_from_slice(&p.color);
            out.write_f64::<LittleEndian>(p.reprojection_error).unwrap();
            out.write_u64::<LittleEndian>(p.track.len() as u64).unwrap();
            for t in &p.track {
                out.write_u32::<LittleEndian>(t.image_id).unwrap();
                out.write_u32::<LittleEndian>(t.point2d_idx).unwrap();
            }
        }
        out
    }
}

mod text {
    use super::*;
    use std::fmt::Write as _;

    /// Iterates `(1-based line number, line)` pairs.
    fn numbered(src: &str) -> impl Iterator<Item = (usize, &str)> {
        src.lines().enumerate().map(|(i, l)| (i + 1, l))
    }

    fn is_skippable(line: &str) -> bool {
        let t = line.trim();
        t.is_empty() || t.starts_with('#')
    }

    /// Extracts N from a `# Number of <what>: N[, ...]` header comment.
    fn declared_count(src: &str, what: &str) -> Option<u64> {
        let prefix = format!("# Number of {what}:");
        src.lines().find_map(|l| {
            let rest = l.trim().strip_prefix(&prefix)?;
            rest.split(',').next()?.trim().parse().ok()
        })
    }

    fn check_count(src: &str, what: &str, file: &'static str, found: usize) -> Result<()> {
        if let Some(declared) = declared_count(src, what) {
            if declared != found as u64 {
                return Err(ColmapError::CountMismatch { file, declared, found: found as u64 });
            }
        }
        Ok(())
    }

    struct Fields<'a> {
        it: std::str::SplitWhitespace<'a>,
        file: &'static str,
        line: usize,
    }

    impl<'a> Fields<'a> {
        fn new(s: &'a str, file: &'static str, line: usize) -> Self {
            Self { it: s.split_whitespace(), file, line }
        }

        fn err(&self, message: String) -> ColmapError {
            ColmapError::Syntax { file: self.file, at: Location::Line(self.line), message }
        }

        fn raw(&mut self, what: &str) -> Result<&'a str> {
            self.it.next().ok_or_else(|| self.err(format!("missing field {what}")))
        }

        fn parse<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
            let raw = self.raw(what)?;
            raw.parse().map_err(|_| self.err(format!("cannot parse {what} from {raw:?}")))
        }

        fn rest(self) -> Vec<&'a str> {
            self.it.collect()
        }
    }

    pub(super) fn cameras(src: &str) -> Result<BTreeMap<u32, CameraIntrinsics>> {
        let mut out = BTreeMap::new();
        for (line, l) in numbered(src).filter(|(_, l)| !is_skippable(l)) {
            let at = Location::Line(line);
            let mut f = Fields::new(l, CAMERAS, line);
            let camera_id: u32 = f.parse("CAMERA_ID")?;
            let model_name = f.raw("MODEL")?.to_string();
            let width: u64 = f.parse("WIDTH")?;
            let height: u64 = f.parse("HEIGHT")?;
            let kind = match supported_model(&model_name) {
                Some(k) => k,
                None if (0..=11).any(|c| colmap_model_by_code(c).map(|m| m.0) == Some(&model_name)) => {
                    return Err(ColmapError::UnsupportedCameraModel { file: CAMERAS, model: model_name, at })
                }
                None => return Err(ColmapError::UnknownCameraModel { file: CAMERAS, model: model_name, at }),
            };
            let err_line = f.line;
            let params =
                f.rest().into_iter().map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>().map_err(
                    |_| ColmapError::Syntax {
                        file: CAMERAS,
                        at: Location::Line(err_line),
                        message: "cannot parse camera params".into(),
                    },
                )?;
            if params.len() != kind.num_params() {
                return Err(ColmapError::Syntax {
                    file: CAMERAS,
                    at,
                    message: format!("{model_name} expects {} params, found {}", kind.num_params(), params.len()),
                });
            }
            let cam = intrinsics_from_params(camera_id, kind, width, height, &params, CAMERAS, at)?;
            if out.insert(camera_id, cam).is_some() {
                return Err(ColmapError::Duplicate { file: CAMERAS, what: "camera", id: camera_id.into(), at });
            }
        }
        check_count(src, "cameras", CAMERAS, out.len())?;
        Ok(out)
    }

    pub(super) fn images(src: &str, cameras: &BTreeMap<u32, CameraIntrinsics>) -> Result<Vec<CameraPose>> {
        let mut views = Vec::new();
        let mut seen = HashSet::new();
        let mut lines = numbered(src);
        while let Some((line, l)) = lines.next() {
            if is_skippable(l) {
                continue;
            }
            let at = Location::Line(line);
            let mut f = Fields::new(l, IMAGES, line);
            let image_id: u32 = f.parse("IMAGE_ID")?;
            let mut q = [0.0; 4];
            for (v, name) in q.iter_mut().zip(["QW", "QX", "QY", "QZ"]) {
                *v = f.parse(name)?;
            }
            let mut t = [0.0; 3];
            for (v, name) in t.iter_mut().zip(["TX", "TY", "TZ"]) {
                *v = f.parse(name)?;
            }
            let camera_id: u32 = f.parse("CAMERA_ID")?;
            let name = f.rest().join(" ");
            if name.is_empty() {
                return Err(ColmapError::Syntax { file: IMAGES, at, message: "missing field NAME".into() });
            }
            // The keypoint line always follows the header line, even when empty.
            let (kp_line, kp) = lines.next().unwrap_or((line + 1, ""));
            let toks: Vec<&str> = kp.split_whitespace().collect();
            if !toks.len().is_multiple_of(3) {
                return Err(ColmapError::Syntax {
                    file: IMAGES,
                    at: Location::Line(kp_line),
                    message: "POINTS2D must be (X, Y, POINT3D_ID) triples".into(),
                });
            }
            let bad = |what: &str| ColmapError::Syntax {
                file: IMAGES,
                at: Location::Line(kp_line),
                message: format!("cannot parse keypoint {what}"),
            };
            let mut keypoints = Vec::with_capacity(toks.len() / 3);
            for c in toks.chunks(3) {
                let x: f64 = c[0].parse().map_err(|_| bad("X"))?;
                let y: f64 = c[1].parse().map_err(|_| bad("Y"))?;
                let id: i64 = c[2].parse().map_err(|_| bad("POINT3D_ID"))?;
                keypoints.push(Keypoint { xy: [x, y], point3d_id: u64::try_from(id).ok() });
            }
            if !cameras.contains_key(&camera_id) {
                return Err(ColmapError::DanglingCamera { file: IMAGES, image_id, camera_id, at });
            }
            if !seen.insert(image_id) {
                return Err(ColmapError::Duplicate { file: IMAGES, what: "image", id: image_id.into(), at });
            }
            let rotation = unit_quaternion(q, image_id, IMAGES, at)?;
            views.push(CameraPose {
                image_id,
                view_name: name,
                rotation,
                translation: Vector3::from(t),
                camera_id,
                keypoints,
            });
        }
        check_count(src, "images", IMAGES, views.len())?;
        Ok(views)
    }

    pub(super) fn points(src: &str, views: &[CameraPose]) -> Result<Vec<ScenePoint>> {
        let image_ids: HashSet<u32> = views.iter().map(|v| v.image_id).collect();
        let mut points = Vec::new();
        let mut seen = HashSet::new();
        for (line, l) in numbered(src).filter(|(_, l)| !is_skippable(l)) {
            let at = Location::Line(line);
            let mut f = Fields::new(l, POINTS, line);
            let point_id: u64 = f.parse("POINT3D_ID")?;
            let mut xyz = [0.0; 3];
            for (v, name) in xyz.iter_mut().zip(["X", "Y", "Z"]) {
                *v = f.parse(name)?;
            }
            let mut color = [0u8; 3];
            for (v, name) in color.iter_mut().zip(["R", "G", "B"]) {
                *v = f.parse(name)?;
            }
            let error: f64 = f.parse("ERROR")?;
            let toks = f.rest();
            if !toks.len().is_multiple_of(2) {
                return Err(ColmapError::Syntax {
                    file: POINTS,
                    at,
                    message: "TRACK must be (IMAGE_ID, POINT2D_IDX) pairs".into(),
                });
            }
            let mut track = Vec::with_capacity(toks.len() / 2);
            for c in toks.chunks(2) {
                let parse = |s: &str| {
                    s.parse::<u32>().map_err(|_| ColmapError::Syntax {
                        file: POINTS,
                        at,
                        message: format!("cannot parse track element {s:?}"),
                    })
                };
                let image_id = parse(c[0])?;
                let point2d_idx = parse(c[1])?;
                if !image_ids.contains(&image_id) {
                    return Err(ColmapError::DanglingView { file: POINTS, point_id, image_id, at });
                }
                track.push(TrackElement { image_id, point2d_idx });
            }
            if !seen.insert(point_id) {
                return Err(ColmapError::Duplicate { file: POINTS, what: "point", id: point_id, at });
            }
            points.push(ScenePoint { point_id, position: Vector3::from(xyz), color, reprojection_error: error, track });
        }
        check_count(src, "points", POINTS, points.len())?;
        Ok(points)
    }

    pub(super) fn write_cameras(model: &SceneModel) -> String {
        let mut s = String::new();
        s.push_str("# Camera list with one line of data per camera:\n");
        s.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        let _ = writeln!(s, "# Number of cameras: {}", model.cameras.len());
        for cam in model.cameras.values() {
            let _ = write!(s, "{} {} {} {}", cam.camera_id, cam.model.colmap_name(), cam.width, cam.height);
            for p in cam.params() {
                let _ = write!(s, " {p}");
            }
            s.push('\n');
        }
        s
    }

    pub(super) fn write_images(model: &SceneModel) -> String {
        let mut s = String::new();
        let total: usize = model.views.iter().map(|v| v.keypoints.len()).sum();
        let mean = if model.views.is_empty() { 0.0 } else { total as f64 / model.views.len() as f64 };
        s.push_str("# Image list with two lines of data per image:\n");
        s.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
        s.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
        let _ = writeln!(s, "# Number of images: {}, mean observations per image: {mean}", model.views.len());
        for v in &model.views {
            let q = v.rotation.quaternion();
            let t = &v.translation;
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {} {} {}",
                v.image_id, q.w, q.i, q.j, q.k, t.x, t.y, t.z, v.camera_id, v.view_name
            );
            let kps: Vec<String> = v
                .keypoints
                .iter()
                .map(|kp| {
                    let id = kp.point3d_id.map_or(-1i128, i128::from);
                    format!("{} {} {id}", kp.xy[0], kp.xy[1])
                })
                .collect();
            s.push_str(&kps.join(" "));
            s.push('\n');
        }
        s
    }

    pub(super) fn write_points(model: &SceneModel) -> String {
        let mut s = String::new();
        let total: usize = model.points.iter().map(|p| p.track.len()).sum();
        let mean = if model.points.is_empty() { 0.0 } else { total as f64 / model.points.len() as f64 };
        s.push_str("# 3D point list with one line of data per point:\n");
        s.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
        let _ = writeln!(s, "# Number of points: {}, mean track length: {mean}", model.points.len());
        for p in &model.points {
            let _ = write!(
                s,
                "{} {} {} {} {} {} {} {}",
                p.point_id,
                p.position.x,
                p.position.y,
                p.position.z,
                p.color[0],
                p.color[1],
                p.color[2],
                p.reprojection_error
            );
            for t in &p.track {
                let _ = write!(s, " {} {}", t.image_id, t.point2d_idx);
            }
            s.push('\n');
        }
        s
    }
}
