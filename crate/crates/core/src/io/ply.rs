//! Binary little-endian PLY for Gaussian clouds.
//!
//! Every vertex stores the raw optimisation parameters: centre, an
//! (unoriented) shortest-axis normal for viewers, linear RGB in `[0, 1]`,
//! opacity logit, log-scales and the raw `(w, x, y, z)` rotation. The writer
//! uses `double` so a checkpoint reloads bit-exactly; the reader also accepts
//! `float` and 8-bit `uchar` colors.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Vector3, Vector4};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "red", "green", "blue", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let mut header = format!("ply\nformat binary_little_endian 1.0\nelement vertex {}\n", cloud.len());
    for p in PROPERTIES {
        header.push_str(&format!("property double {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(cloud.len() * PROPERTIES.len() * 8);
    for g in cloud.iter() {
        let n: Vector3<f64> = g.rotation_matrix().column(g.shortest_axis()).into();
        let values = [
            g.position.x,
            g.position.y,
            g.position.z,
            n.x,
            n.y,
            n.z,
            g.color.x,
            g.color.y,
            g.color.z,
            g.opacity_raw,
            g.log_scales.x,
            g.log_scales.y,
            g.log_scales.z,
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
        ];
        for v in values {
            out.write_f64::<LittleEndian>(v).unwrap();
        }
    }
    out
}

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    U8,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        match name {
            "uchar" | "uint8" => Some(Scalar::U8),
            "float" | "float32" => Some(Scalar::F32),
            "double" | "float64" => Some(Scalar::F64),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            Scalar::U8 => 1,
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<GaussianCloud> {
    const END: &[u8] = b"end_header\n";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::format(path, "header is not ASCII"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(Error::format(path, "not a PLY file"));
    }
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    for (lineno, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::format(path, format!("header line {}: {msg}", lineno + 2));
        match parts.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, ..] => return Err(bad(&format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(bad("duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err(bad("vertex element must come first"));
                }
                in_vertex = false;
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| bad(&format!("unsupported property type {ty}")))?;
                props.push((name.to_string(), s));
            }
            ["property", ..] if !in_vertex => {}
            _ => return Err(bad(&format!("unrecognised '{line}'"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "no vertex element"))?;
    let mut slots = [usize::MAX; PROPERTIES.len()];
    for (k, name) in PROPERTIES.iter().enumerate() {
        if matches!(*name, "nx" | "ny" | "nz") {
            continue;
        }
        slots[k] = props
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::format(path, format!("missing vertex property {name}")))?;
    }
    let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
    let body = &bytes[header_end + END.len()..];
    if body.len() < stride * count {
        return Err(Error::format(
            path,
            format!("truncated vertex data: expected {} bytes, found {}", stride * count, body.len()),
        ));
    }
    let mut cur = Cursor::new(body);
    let mut gaussians = Vec::with_capacity(count);
    let mut row = vec![0.0f64; props.len()];
    for _ in 0..count {
        for (v, (name, s)) in row.iter_mut().zip(&props) {
            *v = match s {
                Scalar::U8 => {
                    let b = cur.read_u8().map_err(|e| Error::io(path, e))? as f64;
                    if matches!(name.as_str(), "red" | "green" | "blue") {
                        b / 255.0
                    } else {
                        b
                    }
                }
                Scalar::F32 => cur.read_f32::<LittleEndian>().map_err(|e| Error::io(path, e))? as f64,
                Scalar::F64 => cur.read_f64::<LittleEndian>().map_err(|e| Error::io(path, e))?,
            };
        }
        let f = |k: usize| row[slots[k]];
        gaussians.push(Gaussian {
            position: Vector3::new(f(0), f(1), f(2)),
            color: Vector3::new(f(6), f(7), f(8)),
            opacity_raw: f(9),
            log_scales: Vector3::new(f(10), f(11), f(12)),
            rotation: Vector4::new(f(13), f(14), f(15), f(16)),
        });
    }
    Ok(GaussianCloud::new(gaussians))
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &GaussianCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ply(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> GaussianCloud {
        (0..4)
            .map(|i| Gaussian {
                position: Vector3::new(i as f64 * 0.1, -1.0 / 3.0, 2.0),
                rotation: Vector4::new(0.9, 0.1 * i as f64, -0.2, 0.3),
                log_scales: Vector3::new(-2.0, -3.5, -1.0 / 7.0),
                opacity_raw: 0.37 - i as f64,
                color: Vector3::new(0.1, 0.2, 1.0 / 3.0),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let cloud = sample();
        let back = decode_ply(&encode_ply(&cloud), Path::new("mem")).unwrap();
        assert_eq!(back.gaussians, cloud.gaussians);
    }

    #[test]
    fn truncated_body_is_reported() {
        let mut bytes = encode_ply(&sample());
        bytes.truncate(bytes.len() - 8);
        let err = decode_ply(&bytes, Path::new("mem")).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn float_and_uchar_properties() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n".to_vec();
        for p in ["x", "y", "z"] {
            bytes.extend(format!("property float {p}\n").bytes());
        }
        for p in ["red", "green", "blue"] {
            bytes.extend(format!("property uchar {p}\n").bytes());
        }
        for p in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
            bytes.extend(format!("property float {p}\n").bytes());
        }
        bytes.extend(b"end_header\n");
        for v in [1.0f32, 2.0, 3.0] {
            bytes.extend(v.to_le_bytes());
        }
        bytes.extend([255u8, 0, 51]);
        for v in [0.0f32, -1.0, -1.0, -1.0, 1.0, 0.0, 0.0, 0.0] {
            bytes.extend(v.to_le_bytes());
        }
        let c = decode_ply(&bytes, Path::new("mem")).unwrap();
        assert_eq!(c.gaussians[0].position, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(c.gaussians[0].color, Vector3::new(1.0, 0.0, 0.2));
    }

    #[test]
    fn missing_property() {
        let bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty double x\nend_header\n";
        assert!(decode_ply(bytes, Path::new("mem")).is_err());
    }
}
