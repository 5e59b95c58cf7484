//! Binary little-endian PLY in the layout used by 3DGS training code.
//!
//! Opacity is stored as a logit, scale as log-scale and color as the DC
//! spherical-harmonic coefficient. Feature vectors never go into this file.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{Features, GaussianCloud, DEFAULT_FEATURE_DIM};
use crate::error::{data_error, format_error, Error, Result};

const SH_C0: f64 = 0.282_094_791_773_878_14;

const REQUIRED: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

const WRITTEN: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0",
    "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
];

#[derive(Debug, Clone, Copy)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
    has_list: bool,
}

impl Element {
    fn stride(&self) -> usize {
        self.properties.iter().map(|(_, t)| t.size()).sum()
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Vec<Element>> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        let n = r
            .read_line(&mut line)
            .map_err(|e| format_error!("reading PLY header: {}", e))?;
        if n == 0 {
            return Err(format_error!("PLY header ended before end_header"));
        }
        Ok(line.trim_end().to_string())
    };

    if next_line(r)? != "ply" {
        return Err(format_error!("missing 'ply' magic line"));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut saw_format = false;
    loop {
        let l = next_line(r)?;
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                let fmt = tok.next().unwrap_or("");
                if fmt != "binary_little_endian" {
                    return Err(format_error!(
                        "unsupported PLY format '{}', expected binary_little_endian",
                        fmt
                    ));
                }
                saw_format = true;
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| format_error!("unnamed element"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| format_error!("element '{}' has no count", name))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| format_error!("property before any element"))?;
                let ty = tok.next().unwrap_or("");
                if ty == "list" {
                    el.has_list = true;
                    continue;
                }
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| format_error!("unknown property type '{}'", ty))?;
                let name = tok
                    .next()
                    .ok_or_else(|| format_error!("property without a name"))?;
                el.properties.push((name.to_string(), ty));
            }
            Some("end_header") => break,
            Some(other) => return Err(format_error!("unexpected PLY header keyword '{}'", other)),
            None => {}
        }
    }
    if !saw_format {
        return Err(format_error!("PLY header has no format line"));
    }
    Ok(elements)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Reads a 3DGS PLY from any reader; features are initialized uniformly at random.
pub fn read_ply<R: Read>(reader: R, feature_dim: usize, seed: u64) -> Result<GaussianCloud> {
    let mut r = BufReader::new(reader);
    let elements = read_header(&mut r)?;

    let mut skip_bytes = 0usize;
    let mut vertex = None;
    for el in &elements {
        if el.name == "vertex" {
            vertex = Some(el);
            break;
        }
        if el.has_list {
            return Err(format_error!(
                "element '{}' with list properties precedes vertex data",
                el.name
            ));
        }
        skip_bytes += el.count * el.stride();
    }
    let vertex = vertex.ok_or_else(|| format_error!("PLY has no vertex element"))?;
    if vertex.has_list {
        return Err(format_error!("vertex element has list properties"));
    }
    let mut offsets = Vec::with_capacity(REQUIRED.len());
    for name in REQUIRED {
        let mut off = 0;
        let mut found = None;
        for (pname, ty) in &vertex.properties {
            if pname == name {
                found = Some((off, *ty));
                break;
            }
            off += ty.size();
        }
        offsets.push(found.ok_or_else(|| format_error!("missing vertex property '{}'", name))?);
    }
    let ignored_sh = vertex
        .properties
        .iter()
        .filter(|(n, _)| n.starts_with("f_rest_"))
        .count();
    if ignored_sh > 0 {
        log::warn!(
            "ignoring {} higher-order spherical-harmonic properties",
            ignored_sh
        );
    }

    std::io::copy(&mut (&mut r).take(skip_bytes as u64), &mut std::io::sink())
        .map_err(|e| format_error!("skipping PLY elements: {}", e))?;

    let n = vertex.count;
    let stride = vertex.stride();
    let mut cloud = GaussianCloud {
        positions: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        features: Features::init_uniform(n, feature_dim, seed),
    };
    let mut row = vec![0u8; stride];
    let mut v = [0f64; REQUIRED.len()];
    for i in 0..n {
        r.read_exact(&mut row)
            .map_err(|_| format_error!("PLY truncated at vertex {} of {}", i, n))?;
        for (k, &(off, ty)) in offsets.iter().enumerate() {
            v[k] = ty.decode(&row[off..off + ty.size()]);
            if !v[k].is_finite() {
                return Err(data_error!(
                    "non-finite '{}' at vertex {}",
                    REQUIRED[k],
                    i
                ));
            }
        }
        cloud.positions.push(Vector3::new(v[0], v[1], v[2]));
        cloud.colors.push([
            (0.5 + SH_C0 * v[3]).clamp(0.0, 1.0),
            (0.5 + SH_C0 * v[4]).clamp(0.0, 1.0),
            (0.5 + SH_C0 * v[5]).clamp(0.0, 1.0),
        ]);
        // Saturated logits would round to exactly 0 or 1 in f64.
        cloud
            .opacities
            .push(sigmoid(v[6]).clamp(f64::EPSILON, 1.0 - f64::EPSILON));
        cloud
            .scales
            .push(Vector3::new(v[7].exp(), v[8].exp(), v[9].exp()));
        let q = [v[10], v[11], v[12], v[13]];
        let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(data_error!("zero-length quaternion at vertex {}", i));
        }
        cloud.rotations.push(q.map(|x| x / norm));
    }
    Ok(cloud)
}

pub fn load_ply_with(path: impl AsRef<Path>, feature_dim: usize, seed: u64) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(file, feature_dim, seed)
}

/// Loads with the default feature width and seed 0.
pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    load_ply_with(path, DEFAULT_FEATURE_DIM, 0)
}

pub fn write_ply<W: Write>(cloud: &GaussianCloud, mut w: W) -> std::io::Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    for name in WRITTEN {
        header.push_str(&format!("property float {}\n", name));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;

    let mut buf = Vec::with_capacity(cloud.len() * WRITTEN.len() * 4);
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        let s = cloud.scales[i];
        let q = cloud.rotations[i];
        let values = [
            p.x,
            p.y,
            p.z,
            0.0,
            0.0,
            0.0,
            (c[0] - 0.5) / SH_C0,
            (c[1] - 0.5) / SH_C0,
            (c[2] - 0.5) / SH_C0,
            logit(cloud.opacities[i]),
            s.x.ln(),
            s.y.ln(),
            s.z.ln(),
            q[0],
            q[1],
            q[2],
            q[3],
        ];
        for v in values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(cloud, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Writes the Gaussians selected by `membership` with all their attributes.
pub fn save_segmentation(
    cloud: &GaussianCloud,
    membership: &[bool],
    path: impl AsRef<Path>,
) -> Result<()> {
    save_ply(&cloud.subset(membership)?, path)
}
