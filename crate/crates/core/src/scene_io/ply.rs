//! Binary little-endian PLY point clouds.
//!
//! The writer emits a `vertex` element with `float x, y, z` and
//! `uchar red, green, blue`; the labeled variant appends `int segment`
//! (-1 for unlabeled) and `uchar synthetic`. The reader accepts any scalar
//! vertex layout containing those properties and skips the rest.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::Vector3;
use thiserror::Error;

use super::ScenePoint;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("malformed PLY header: {0}")]
    Header(String),
    #[error("element {element}: header declares {declared} records but the body holds {found}")]
    CountMismatch { element: String, declared: u64, found: u64 },
    #[error("non-finite position for point {0}")]
    NonFinite(u64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, PlyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => LittleEndian::read_i16(b) as f64,
            Scalar::U16 => LittleEndian::read_u16(b) as f64,
            Scalar::I32 => LittleEndian::read_i32(b) as f64,
            Scalar::U32 => LittleEndian::read_u32(b) as f64,
            Scalar::F32 => LittleEndian::read_f32(b) as f64,
            Scalar::F64 => LittleEndian::read_f64(b),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: u64,
    props: Vec<Property>,
}

impl Element {
    fn fixed_stride(&self) -> Option<usize> {
        self.props
            .iter()
            .map(|p| match p {
                Property::Scalar { ty, .. } => Some(ty.size()),
                Property::List { .. } => None,
            })
            .sum()
    }

    fn offset_of(&self, name: &str) -> Option<(usize, Scalar)> {
        let mut off = 0;
        for p in &self.props {
            if let Property::Scalar { name: n, ty } = p {
                if n == name {
                    return Some((off, *ty));
                }
                off += ty.size();
            }
        }
        None
    }
}

/// A decoded cloud, with the optional per-vertex labels written by
/// [`write_labeled_ply`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyCloud {
    pub points: Vec<ScenePoint>,
    pub segment: Option<Vec<Option<u32>>>,
    pub synthetic: Option<Vec<bool>>,
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<Element>, usize)> {
    const END: &[u8] = b"end_header\n";
    let end =
        bytes.windows(END.len()).position(|w| w == END).ok_or_else(|| PlyError::Header("missing end_header".into()))?;
    let body_start = end + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| PlyError::Header("header is not ASCII".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(PlyError::Header("missing 'ply' magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, _version] => {
                if *fmt != "binary_little_endian" {
                    return Err(PlyError::Header(format!("unsupported format {fmt}")));
                }
                format_seen = true;
            }
            ["element", name, count] => {
                let count = count.parse().map_err(|_| PlyError::Header(format!("bad element count {count:?}")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", count, item, _name] => {
                let el = elements.last_mut().ok_or_else(|| PlyError::Header("property before element".into()))?;
                let count = Scalar::parse(count).ok_or_else(|| PlyError::Header(format!("unknown type {count}")))?;
                let item = Scalar::parse(item).ok_or_else(|| PlyError::Header(format!("unknown type {item}")))?;
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| PlyError::Header("property before element".into()))?;
                let ty = Scalar::parse(ty).ok_or_else(|| PlyError::Header(format!("unknown type {ty}")))?;
                el.props.push(Property::Scalar { name: name.to_string(), ty });
            }
            _ => return Err(PlyError::Header(format!("unrecognized line {line:?}"))),
        }
    }
    if !format_seen {
        return Err(PlyError::Header("missing format line".into()));
    }
    Ok((elements, body_start))
}

/// Length in bytes of `count` records of an element starting at `body`,
/// or `None` if the body ends first.
fn element_len(el: &Element, body: &[u8]) -> Option<usize> {
    if let Some(stride) = el.fixed_stride() {
        let len = (el.count as usize).checked_mul(stride)?;
        return (len <= body.len()).then_some(len);
    }
    let mut pos = 0usize;
    for _ in 0..el.count {
        for p in &el.props {
            match p {
                Property::Scalar { ty, .. } => pos += ty.size(),
                Property::List { count, item } => {
                    let c = body.get(pos..pos + count.size())?;
                    let n = count.read(c) as usize;
                    pos += count.size() + n * item.size();
                }
            }
            if pos > body.len() {
                return None;
            }
        }
    }
    Some(pos)
}

pub fn decode_ply(bytes: &[u8]) -> Result<PlyCloud> {
    let (elements, mut pos) = parse_header(bytes)?;
    let mut cloud = None;
    for el in &elements {
        let body = &bytes[pos..];
        let Some(len) = element_len(el, body) else {
            let found = el.fixed_stride().map_or(0, |s| (body.len() / s.max(1)) as u64);
            return Err(PlyError::CountMismatch { element: el.name.clone(), declared: el.count, found });
        };
        if el.name == "vertex" {
            cloud = Some(decode_vertices(el, &body[..len])?);
        }
        pos += len;
    }
    if pos != bytes.len() {
        let el = elements.last().map_or("vertex".to_string(), |e| e.name.clone());
        let stride = elements.last().and_then(Element::fixed_stride).unwrap_or(1).max(1);
        let declared = elements.last().map_or(0, |e| e.count);
        return Err(PlyError::CountMismatch {
            element: el,
            declared,
            found: declared + ((bytes.len() - pos) / stride) as u64,
        });
    }
    cloud.ok_or_else(|| PlyError::Header("no vertex element".into()))
}

fn decode_vertices(el: &Element, body: &[u8]) -> Result<PlyCloud> {
    let stride = el.fixed_stride().ok_or_else(|| PlyError::Header("vertex element has list properties".into()))?;
    let field = |name: &str| {
        el.offset_of(name).ok_or_else(|| PlyError::Header(format!("vertex element lacks property {name}")))
    };
    let xyz = [field("x")?, field("y")?, field("z")?];
    let rgb = [field("red")?, field("green")?, field("blue")?];
    for (_, ty) in &rgb {
        if *ty != Scalar::U8 {
            return Err(PlyError::Header("color properties must be uchar".into()));
        }
    }
    let segment = el.offset_of("segment");
    let synthetic = el.offset_of("synthetic");

    let n = el.count as usize;
    let mut cloud = PlyCloud {
        points: Vec::with_capacity(n),
        segment: segment.map(|_| Vec::with_capacity(n)),
        synthetic: synthetic.map(|_| Vec::with_capacity(n)),
    };
    for (i, rec) in body.chunks_exact(stride).enumerate() {
        let get = |(off, ty): (usize, Scalar)| ty.read(&rec[off..off + ty.size()]);
        let position = Vector3::new(get(xyz[0]), get(xyz[1]), get(xyz[2]));
        let color = [get(rgb[0]) as u8, get(rgb[1]) as u8, get(rgb[2]) as u8];
        cloud.points.push(ScenePoint::new(i as u64, position, color));
        if let (Some(f), Some(v)) = (segment, cloud.segment.as_mut()) {
            let s = get(f);
            v.push((s >= 0.0).then_some(s as u32));
        }
        if let (Some(f), Some(v)) = (synthetic, cloud.synthetic.as_mut()) {
            v.push(get(f) != 0.0);
        }
    }
    Ok(cloud)
}

fn header(n: usize, labeled: bool) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {n}\n"));
    for axis in ["x", "y", "z"] {
        h.push_str(&format!("property float {axis}\n"));
    }
    for c in ["red", "green", "blue"] {
        h.push_str(&format!("property uchar {c}\n"));
    }
    if labeled {
        h.push_str("property int segment\nproperty uchar synthetic\n");
    }
    h.push_str("end_header\n");
    h
}

fn encode(points: &[ScenePoint], labels: Option<(&[Option<u32>], &[bool])>) -> Result<Vec<u8>> {
    let mut out = header(points.len(), labels.is_some()).into_bytes();
    out.reserve(points.len() * 20);
    for (i, p) in points.iter().enumerate() {
        if !p.position.iter().all(|c| c.is_finite()) {
            return Err(PlyError::NonFinite(p.point_id));
        }
        for c in p.position.iter() {
            out.write_f32::<LittleEndian>(*c as f32).unwrap();
        }
        out.extend_from_slice(&p.color);
        if let Some((seg, syn)) = labels {
            let s = seg[i].map_or(-1, |g| g as i32);
            out.write_i32::<LittleEndian>(s).unwrap();
            out.push(u8::from(syn[i]));
        }
    }
    Ok(out)
}

pub fn encode_ply(points: &[ScenePoint]) -> Result<Vec<u8>> {
    encode(points, None)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| PlyError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

pub fn write_ply(points: &[ScenePoint], path: &Path) -> Result<()> {
    write_bytes(path, &encode(points, None)?)
}

/// Writes a cloud with per-vertex segment ids and a synthetic-point flag.
///
/// # Panics
/// If `segment` or `synthetic` differ in length from `points`.
pub fn write_labeled_ply(
    points: &[ScenePoint],
    segment: &[Option<u32>],
    synthetic: &[bool],
    path: &Path,
) -> Result<()> {
    assert_eq!(points.len(), segment.len());
    assert_eq!(points.len(), synthetic.len());
    write_bytes(path, &encode(points, Some((segment, synthetic)))?)
}

pub fn read_ply_cloud(path: &Path) -> Result<PlyCloud> {
    let bytes = fs::read(path).map_err(|source| PlyError::Io { path: path.display().to_string(), source })?;
    decode_ply(&bytes)
}

pub fn read_ply(path: &Path) -> Result<Vec<ScenePoint>> {
    Ok(read_ply_cloud(path)?.points)
}
