//! Binary little-endian PLY in the field layout Gaussian-splatting tools
//! write: `x y z`, `f_dc_0..2`, `opacity` (logit), `scale_0..2` (log) and
//! `rot_0..3` (quaternion, w first). Other vertex properties such as normals
//! and higher spherical-harmonic bands are accepted and ignored.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{Gaussian, GaussianCloud};

/// Degree-0 real spherical-harmonic constant.
pub(crate) const SH_C0: f64 = 0.282_094_791_773_878_14;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0",
    "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, thiserror::Error)]
pub enum PlyError {
    #[error("unsupported asset: {0}")]
    Unsupported(String),
    #[error("PLY parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
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
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, Scalar)>,
    has_list: bool,
}

impl Element {
    fn stride(&self) -> usize {
        self.props.iter().map(|(_, t)| t.size()).sum()
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Vec<Element>, PlyError> {
    let mut line = String::new();
    let mut next = |line: &mut String| -> Result<(), PlyError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(PlyError::Parse("header ended before end_header".into()));
        }
        Ok(())
    };
    next(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(PlyError::Parse("missing 'ply' magic".into()));
    }
    let mut format_ok = false;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(&mut line)?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                let fmt = words.next().unwrap_or("");
                if fmt != "binary_little_endian" {
                    return Err(PlyError::Unsupported(format!(
                        "PLY format {fmt:?}; only binary_little_endian is supported"
                    )));
                }
                format_ok = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = words
                    .next()
                    .ok_or_else(|| PlyError::Parse("element without a name".into()))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| PlyError::Parse(format!("element {name} has no count")))?;
                elements.push(Element {
                    name: name.to_owned(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Parse("property before any element".into()))?;
                let ty = words.next().unwrap_or("");
                if ty == "list" {
                    el.has_list = true;
                    continue;
                }
                let scalar = Scalar::parse(ty)
                    .ok_or_else(|| PlyError::Parse(format!("unknown property type {ty:?}")))?;
                let name = words
                    .next()
                    .ok_or_else(|| PlyError::Parse("property without a name".into()))?;
                el.props.push((name.to_owned(), scalar));
            }
            Some("end_header") => break,
            Some(other) => return Err(PlyError::Parse(format!("unexpected header line {other:?}"))),
        }
    }
    if !format_ok {
        return Err(PlyError::Parse("missing format line".into()));
    }
    Ok(elements)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reads a splat cloud from any byte source.
pub fn read_ply<R: Read>(reader: R) -> Result<GaussianCloud, PlyError> {
    let mut r = BufReader::new(reader);
    let elements = read_header(&mut r)?;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        if el.has_list {
            return Err(PlyError::Unsupported(format!(
                "list properties in element {:?} before the vertices",
                el.name
            )));
        }
        let skip = (el.count as u64)
            .checked_mul(el.stride() as u64)
            .ok_or_else(|| PlyError::Parse("element size overflows".into()))?;
        io::copy(&mut (&mut r).take(skip), &mut io::sink())?;
    }
    let vertex = vertex.ok_or_else(|| PlyError::Unsupported("no vertex element".into()))?;
    if vertex.has_list {
        return Err(PlyError::Unsupported("list properties on vertices".into()));
    }

    let mut offsets = [(0usize, Scalar::F32); REQUIRED.len()];
    let mut missing = Vec::new();
    for (slot, want) in offsets.iter_mut().zip(REQUIRED) {
        let mut off = 0;
        let mut found = false;
        for (name, ty) in &vertex.props {
            if name == want {
                *slot = (off, *ty);
                found = true;
                break;
            }
            off += ty.size();
        }
        if !found {
            missing.push(want);
        }
    }
    if !missing.is_empty() {
        return Err(PlyError::Unsupported(format!(
            "missing vertex properties: {}",
            missing.join(", ")
        )));
    }

    let stride = vertex.stride();
    let mut row = vec![0u8; stride];
    let mut gaussians = Vec::with_capacity(vertex.count.min(1 << 20));
    for i in 0..vertex.count {
        r.read_exact(&mut row).map_err(|e| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                PlyError::Parse(format!("file ends at vertex {i} of {}", vertex.count))
            } else {
                PlyError::Io(e)
            }
        })?;
        let f: Vec<f64> = offsets.iter().map(|(off, ty)| ty.read(&row[*off..])).collect();
        if f.iter().any(|v| !v.is_finite()) {
            return Err(PlyError::Parse(format!("non-finite value in vertex {i}")));
        }
        let q = Quaternion::new(f[10], f[11], f[12], f[13]);
        if q.norm() == 0.0 {
            return Err(PlyError::Parse(format!("zero rotation in vertex {i}")));
        }
        let color = [f[3], f[4], f[5]].map(|dc| (0.5 + SH_C0 * dc).clamp(0.0, 1.0));
        let scale = Vector3::new(f[7].exp(), f[8].exp(), f[9].exp());
        if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(PlyError::Parse(format!("degenerate scale in vertex {i}")));
        }
        gaussians.push(Gaussian {
            mean: Vector3::new(f[0], f[1], f[2]),
            scale,
            rotation: UnitQuaternion::from_quaternion(q),
            opacity: sigmoid(f[6]),
            color,
        });
    }
    Ok(GaussianCloud { gaussians })
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud, PlyError> {
    read_ply(File::open(path)?)
}

/// Writes the cloud with float32 properties in the standard layout.
pub fn write_ply<W: Write>(writer: W, cloud: &GaussianCloud) -> Result<(), PlyError> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(w, "property float {name}")?;
    }
    for name in &REQUIRED[3..] {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    for g in &cloud.gaussians {
        let q = g.rotation.quaternion();
        let o = g.opacity.clamp(1e-7, 1.0 - 1e-7);
        let values = [
            g.mean.x,
            g.mean.y,
            g.mean.z,
            0.0,
            0.0,
            0.0,
            (g.color[0] - 0.5) / SH_C0,
            (g.color[1] - 0.5) / SH_C0,
            (g.color[2] - 0.5) / SH_C0,
            (o / (1.0 - o)).ln(),
            g.scale.x.ln(),
            g.scale.y.ln(),
            g.scale.z.ln(),
            q.w,
            q.i,
            q.j,
            q.k,
        ];
        for v in values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
