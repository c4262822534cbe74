//! PLY reader and writer (`ascii 1.0` and `binary_little_endian 1.0`).
//!
//! Only the `vertex` element is loaded. Recognized vertex properties are
//! `x y z`, `red green blue`, `nx ny nz` and `intensity`; anything else is
//! skipped. Positions are written as `double` so binary round trips are exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

use super::PointCloud;

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
    fn parse(s: &str) -> Option<Scalar> {
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
}

#[derive(Debug, Clone)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropKind,
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
    /// Byte offset of the first body byte.
    body_start: usize,
    /// Number of header lines, for ascii line numbering.
    lines: usize,
}

fn perr(position: impl ToString, message: impl ToString) -> Error {
    Error::parse("PLY", position, message)
}

fn parse_header(data: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let Some(nl) = data[pos..].iter().position(|&b| b == b'\n') else {
            return Err(perr(format!("line {}", line_no + 1), "header is not terminated by end_header"));
        };
        let raw = &data[pos..pos + nl];
        pos += nl + 1;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| perr(format!("line {line_no}"), "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        let at = || format!("line {line_no}");
        let mut tok = line.split_whitespace();
        let Some(key) = tok.next() else { continue };
        if line_no == 1 {
            if line != "ply" {
                return Err(perr(at(), "missing `ply` magic"));
            }
            continue;
        }
        match key {
            "format" => {
                let f = match (tok.next(), tok.next()) {
                    (Some("ascii"), Some("1.0")) => PlyFormat::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyFormat::BinaryLittleEndian,
                    _ => return Err(perr(at(), format!("unsupported format `{line}`"))),
                };
                format = Some(f);
            }
            "comment" | "obj_info" => {}
            "element" => {
                let name = tok.next().ok_or_else(|| perr(at(), "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| perr(at(), "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| perr(at(), "property before any element"))?;
                let t = tok.next().ok_or_else(|| perr(at(), "property without type"))?;
                let kind = if t == "list" {
                    let count = tok.next().and_then(Scalar::parse);
                    let item = tok.next().and_then(Scalar::parse);
                    match (count, item) {
                        (Some(count), Some(item)) => PropKind::List { count, item },
                        _ => return Err(perr(at(), "malformed list property")),
                    }
                } else {
                    PropKind::Scalar(Scalar::parse(t).ok_or_else(|| perr(at(), format!("unknown type `{t}`")))?)
                };
                let name = tok.next().ok_or_else(|| perr(at(), "property without name"))?;
                el.props.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            "end_header" => break,
            other => return Err(perr(at(), format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| perr("header", "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body_start: pos,
        lines: line_no,
    })
}

/// Column positions of the recognized vertex properties.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
    normal: Option<[usize; 3]>,
    intensity: Option<usize>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    if el.props.iter().any(|p| matches!(p.kind, PropKind::List { .. })) {
        return Err(perr("header", "vertex element with list properties is not supported"));
    }
    let find = |n: &str| el.props.iter().position(|p| p.name == n);
    let triple = |a: &str, b: &str, c: &str| match (find(a), find(b), find(c)) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    let xyz = triple("x", "y", "z").ok_or_else(|| perr("header", "vertex element lacks x, y, z"))?;
    for &i in &xyz {
        if !matches!(el.props[i].kind, PropKind::Scalar(Scalar::F32 | Scalar::F64)) {
            return Err(perr("header", "vertex coordinates must be float or double"));
        }
    }
    Ok(VertexLayout {
        xyz,
        rgb: triple("red", "green", "blue").or_else(|| triple("diffuse_red", "diffuse_green", "diffuse_blue")),
        normal: triple("nx", "ny", "nz"),
        intensity: find("intensity").or_else(|| find("scalar_intensity")),
    })
}

struct Columns {
    points: Vec<Vec3>,
    colors: Vec<[u8; 3]>,
    normals: Vec<Vec3>,
    intensities: Vec<f64>,
}

impl Columns {
    fn new(n: usize) -> Self {
        Columns {
            points: Vec::with_capacity(n),
            colors: Vec::new(),
            normals: Vec::new(),
            intensities: Vec::new(),
        }
    }

    fn push(&mut self, layout: &VertexLayout, vals: &[f64]) {
        let [x, y, z] = layout.xyz;
        self.points.push(Vec3::new(vals[x], vals[y], vals[z]));
        if let Some([r, g, b]) = layout.rgb {
            let c = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            self.colors.push([c(vals[r]), c(vals[g]), c(vals[b])]);
        }
        if let Some([a, b, c]) = layout.normal {
            self.normals.push(Vec3::new(vals[a], vals[b], vals[c]));
        }
        if let Some(i) = layout.intensity {
            self.intensities.push(vals[i]);
        }
    }

    fn into_cloud(self, layout: &VertexLayout) -> PointCloud {
        PointCloud {
            points: self.points,
            colors: layout.rgb.map(|_| self.colors),
            intensities: layout.intensity.map(|_| self.intensities),
            normals: layout.normal.map(|_| self.normals),
        }
    }
}

/// Parses a PLY file held in memory.
pub fn read_ply_from(data: &[u8]) -> Result<PointCloud> {
    let header = parse_header(data)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| perr("header", "no vertex element"))?;
    let layout = vertex_layout(&header.elements[vi])?;
    match header.format {
        PlyFormat::Ascii => read_ascii(data, &header, vi, &layout),
        PlyFormat::BinaryLittleEndian => read_binary(data, &header, vi, &layout),
    }
}

fn read_ascii(data: &[u8], header: &Header, vi: usize, layout: &VertexLayout) -> Result<PointCloud> {
    let body = std::str::from_utf8(&data[header.body_start..])
        .map_err(|_| perr(format!("byte {}", header.body_start), "ascii body is not valid UTF-8"))?;
    let mut lines = body
        .lines()
        .enumerate()
        .map(|(i, l)| (header.lines + i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    for el in &header.elements[..vi] {
        for k in 0..el.count {
            if lines.next().is_none() {
                return Err(perr("end of file", format!("element `{}` truncated after {k} of {} rows", el.name, el.count)));
            }
        }
    }
    let el = &header.elements[vi];
    let mut cols = Columns::new(el.count);
    let mut vals = vec![0.0; el.props.len()];
    for k in 0..el.count {
        let Some((line_no, line)) = lines.next() else {
            return Err(perr(
                "end of file",
                format!("truncated payload: header declares {} vertices, found {k}", el.count),
            ));
        };
        let mut tok = line.split_whitespace();
        for (slot, prop) in vals.iter_mut().zip(&el.props) {
            let t = tok
                .next()
                .ok_or_else(|| perr(format!("line {line_no}"), format!("missing value for `{}`", prop.name)))?;
            *slot = t
                .parse::<f64>()
                .map_err(|_| perr(format!("line {line_no}"), format!("bad number `{t}` for `{}`", prop.name)))?;
        }
        cols.push(layout, &vals);
    }
    Ok(cols.into_cloud(layout))
}

fn read_binary(data: &[u8], header: &Header, vi: usize, layout: &VertexLayout) -> Result<PointCloud> {
    let mut pos = header.body_start;
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > data.len() {
            Err(perr(format!("byte {pos}"), format!("truncated payload while reading {what}")))
        } else {
            Ok(())
        }
    };
    for el in &header.elements[..vi] {
        for _ in 0..el.count {
            for p in &el.props {
                match p.kind {
                    PropKind::Scalar(s) => {
                        need(pos, s.size(), &el.name)?;
                        pos += s.size();
                    }
                    PropKind::List { count, item } => {
                        need(pos, count.size(), &el.name)?;
                        let n = count.read_le(&data[pos..]);
                        if n < 0.0 {
                            return Err(perr(format!("byte {pos}"), "negative list length"));
                        }
                        pos += count.size();
                        let len = n as usize * item.size();
                        need(pos, len, &el.name)?;
                        pos += len;
                    }
                }
            }
        }
    }
    let el = &header.elements[vi];
    let sizes: Vec<(usize, Scalar)> = el
        .props
        .iter()
        .map(|p| match p.kind {
            PropKind::Scalar(s) => (s.size(), s),
            PropKind::List { .. } => unreachable!("rejected by vertex_layout"),
        })
        .collect();
    let stride: usize = sizes.iter().map(|s| s.0).sum();
    if pos + stride * el.count > data.len() {
        let have = (data.len() - pos) / stride.max(1);
        return Err(perr(
            format!("byte {}", pos + have * stride),
            format!("truncated payload: header declares {} vertices, found {have}", el.count),
        ));
    }
    let mut cols = Columns::new(el.count);
    let mut vals = vec![0.0; sizes.len()];
    for _ in 0..el.count {
        for (slot, &(size, s)) in vals.iter_mut().zip(&sizes) {
            *slot = s.read_le(&data[pos..pos + size]);
            pos += size;
        }
        cols.push(layout, &vals);
    }
    Ok(cols.into_cloud(layout))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    read_ply_from(&data)
}

/// Serializes a cloud to any writer.
pub fn write_ply_to(cloud: &PointCloud, format: PlyFormat, out: &mut impl Write) -> std::io::Result<()> {
    let mut header = String::from("ply\n");
    header += match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    };
    header += &format!("element vertex {}\n", cloud.len());
    header += "property double x\nproperty double y\nproperty double z\n";
    if cloud.colors.is_some() {
        header += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    }
    if cloud.normals.is_some() {
        header += "property double nx\nproperty double ny\nproperty double nz\n";
    }
    if cloud.intensities.is_some() {
        header += "property double intensity\n";
    }
    header += "end_header\n";
    out.write_all(header.as_bytes())?;

    let mut buf = Vec::with_capacity(64);
    for i in 0..cloud.len() {
        buf.clear();
        let p = &cloud.points[i];
        match format {
            PlyFormat::Ascii => {
                write!(buf, "{} {} {}", p.x, p.y, p.z)?;
                if let Some(c) = &cloud.colors {
                    write!(buf, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
                }
                if let Some(n) = &cloud.normals {
                    write!(buf, " {} {} {}", n[i].x, n[i].y, n[i].z)?;
                }
                if let Some(v) = &cloud.intensities {
                    write!(buf, " {}", v[i])?;
                }
                buf.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for c in p.iter() {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
                if let Some(c) = &cloud.colors {
                    buf.extend_from_slice(&c[i]);
                }
                if let Some(n) = &cloud.normals {
                    for c in n[i].iter() {
                        buf.extend_from_slice(&c.to_le_bytes());
                    }
                }
                if let Some(v) = &cloud.intensities {
                    buf.extend_from_slice(&v[i].to_le_bytes());
                }
            }
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn write_ply(cloud: &PointCloud, path: impl AsRef<Path>, format: PlyFormat) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_ply_to(cloud, format, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
