//! PLY point clouds (ascii and binary little-endian).

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::model::{Gaussian3D, Scene};
use crate::neighbors::mean_knn_distance;

/// Opacity given to points loaded from a point cloud.
pub const INITIAL_OPACITY: f64 = 0.1;
/// Scale used when a point has no neighbors at all.
pub const FALLBACK_SCALE: f64 = 0.01;
const MIN_SCALE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn malformed(offset: usize, what: impl Into<String>) -> Error {
    Error::Malformed { offset: offset as u64, what: what.into() }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut first = true;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| malformed(pos, "header not terminated by end_header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| malformed(pos, "header is not text"))?
            .trim_end_matches('\r')
            .trim();
        let line_at = pos;
        pos += end + 1;
        if first {
            if line != "ply" {
                return Err(Error::Format("missing 'ply' magic".into()));
            }
            first = false;
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(Error::Format(format!("PLY format {other} not supported"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| malformed(line_at, format!("bad element count '{count}'")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => {
                let (ct, it) = (Scalar::parse(ct), Scalar::parse(it));
                let el = elements.last_mut().ok_or_else(|| malformed(line_at, "property before element"))?;
                match (ct, it) {
                    (Some(c), Some(i)) if c.is_integer() => el.props.push(Property::List(c, i)),
                    _ => return Err(malformed(line_at, "bad list property types")),
                }
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty).ok_or_else(|| malformed(line_at, format!("unknown type '{ty}'")))?;
                let el = elements.last_mut().ok_or_else(|| malformed(line_at, "property before element"))?;
                el.props.push(Property::Scalar(name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return Err(malformed(line_at, format!("unrecognized header line '{line}'"))),
        }
    }
    let format = format.ok_or_else(|| Error::Format("PLY header has no format line".into()))?;
    Ok(Header { format, elements, body_offset: pos })
}

/// Vertex positions and optional 8-bit or float colors.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub colors: Option<Vec<[f64; 3]>>,
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vertex_at = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;
    let vertex = &header.elements[vertex_at];
    let find = |n: &str| {
        vertex.props.iter().position(|p| matches!(p, Property::Scalar(name, _) if name == n))
    };
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Format("PLY vertex element lacks x, y, z properties".into())),
    };
    let color_idx = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let color_scale: [f64; 3] = match color_idx {
        Some(idx) => idx.map(|i| match &vertex.props[i] {
            Property::Scalar(_, Scalar::U8) => 1.0 / 255.0,
            Property::Scalar(_, Scalar::U16) => 1.0 / 65535.0,
            _ => 1.0,
        }),
        None => [1.0; 3],
    };

    let rows = match header.format {
        PlyFormat::Ascii => read_ascii(bytes, &header, vertex_at)?,
        PlyFormat::BinaryLittleEndian => read_binary(bytes, &header, vertex_at)?,
    };
    let positions = rows.iter().map(|r| Vector3::new(r[ix], r[iy], r[iz])).collect();
    let colors = color_idx.map(|idx| {
        rows.iter()
            .map(|r| std::array::from_fn(|k| (r[idx[k]] * color_scale[k]).clamp(0.0, 1.0)))
            .collect()
    });
    Ok(PointCloud { positions, colors })
}

fn read_ascii(bytes: &[u8], header: &Header, vertex_at: usize) -> Result<Vec<Vec<f64>>> {
    let mut pos = header.body_offset;
    let next_line = |pos: &mut usize| -> Result<(usize, &str)> {
        let start = *pos;
        if start >= bytes.len() {
            return Err(malformed(start, "unexpected end of ascii body"));
        }
        let end = bytes[start..].iter().position(|b| *b == b'\n').map_or(bytes.len(), |e| start + e);
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| malformed(start, "non-text body"))?;
        Ok((start, line))
    };
    let mut rows = Vec::new();
    for (ei, el) in header.elements.iter().enumerate().take(vertex_at + 1) {
        for _ in 0..el.count {
            let (at, mut line) = next_line(&mut pos)?;
            while line.trim().is_empty() {
                let (_, l) = next_line(&mut pos)?;
                line = l;
            }
            if ei != vertex_at {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let mut row = Vec::with_capacity(el.props.len());
            for p in &el.props {
                let mut next = || -> Result<f64> {
                    let t = tokens.next().ok_or_else(|| malformed(at, "too few values in vertex line"))?;
                    t.parse::<f64>().map_err(|_| malformed(at, format!("bad number '{t}'")))
                };
                match p {
                    Property::Scalar(..) => row.push(next()?),
                    Property::List(..) => {
                        let n = next()? as usize;
                        for _ in 0..n {
                            next()?;
                        }
                        row.push(f64::NAN);
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn read_binary(bytes: &[u8], header: &Header, vertex_at: usize) -> Result<Vec<Vec<f64>>> {
    let mut pos = header.body_offset;
    let take = |n: usize, pos: &mut usize| -> Result<&[u8]> {
        if bytes.len() - *pos < n {
            return Err(malformed(*pos, "truncated binary body"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let mut rows = Vec::new();
    for (ei, el) in header.elements.iter().enumerate().take(vertex_at + 1) {
        for _ in 0..el.count {
            let mut row = Vec::with_capacity(el.props.len());
            for p in &el.props {
                match p {
                    Property::Scalar(_, ty) => row.push(ty.read_le(take(ty.size(), &mut pos)?)),
                    Property::List(ct, it) => {
                        let n = ct.read_le(take(ct.size(), &mut pos)?) as usize;
                        take(n * it.size(), &mut pos)?;
                        row.push(f64::NAN);
                    }
                }
            }
            if ei == vertex_at {
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Initial Gaussians from a point cloud: colors to DC SH (mid-gray when
/// absent), isotropic scale = mean distance to the 3 nearest neighbors,
/// opacity 0.1.
pub fn scene_from_points(cloud: &PointCloud) -> Scene {
    let scales = mean_knn_distance(&cloud.positions, 3);
    let gaussians = cloud
        .positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let rgb = cloud.colors.as_ref().map_or([0.5; 3], |c| c[i]);
            let s = scales[i].unwrap_or(FALLBACK_SCALE).max(MIN_SCALE);
            Gaussian3D::isotropic(*p, s, INITIAL_OPACITY, rgb)
        })
        .collect();
    Scene::new(gaussians)
}

pub fn load_ply_points(path: impl AsRef<Path>) -> Result<Scene> {
    let cloud = parse_ply(&std::fs::read(path)?)?;
    Ok(scene_from_points(&cloud))
}

/// Serializes positions and 8-bit colors.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut out = Vec::new();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    out.extend(format!("ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.positions.len()).bytes());
    out.extend(b"property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        out.extend(b"property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.extend(b"end_header\n");
    let to_u8 = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (i, p) in cloud.positions.iter().enumerate() {
        let color = cloud.colors.as_ref().map(|c| c[i].map(to_u8));
        match format {
            PlyFormat::Ascii => {
                let mut line = format!("{:?} {:?} {:?}", p.x, p.y, p.z);
                if let Some([r, g, b]) = color {
                    line.push_str(&format!(" {r} {g} {b}"));
                }
                line.push('\n');
                out.extend(line.bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z] {
                    out.extend(v.to_le_bytes());
                }
                if let Some(rgb) = color {
                    out.extend(rgb);
                }
            }
        }
    }
    out
}

pub fn write_ply_points(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    std::fs::write(path, encode_ply(cloud, format))?;
    Ok(())
}

impl PointCloud {
    /// Centers and base colors of a scene.
    pub fn from_scene(scene: &Scene) -> Self {
        Self {
            positions: scene.gaussians.iter().map(|g| g.center).collect(),
            colors: Some(scene.gaussians.iter().map(|g| g.base_color().map(|c| c.clamp(0.0, 1.0))).collect()),
        }
    }
}
