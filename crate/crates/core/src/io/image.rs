//! 8-bit binary PPM color images and little-endian PFM float maps.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::loss::RgbImage;

/// Splits off the next whitespace-delimited header token, skipping `#`
/// comments. Leaves `pos` just past the single whitespace byte that ends it.
fn header_token<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(path, "truncated header"));
    }
    let tok = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::format(path, "header is not ASCII"))?;
    *pos += 1;
    Ok(tok)
}

fn parse_dim(tok: &str, what: &str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("bad {what} '{tok}'"))),
    }
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.reserve(image.len() * 3);
    for c in &image.data {
        for v in c.iter() {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut pos = 0;
    if header_token(bytes, &mut pos, path)? != "P6" {
        return Err(Error::format(path, "not a binary PPM (P6)"));
    }
    let width = parse_dim(header_token(bytes, &mut pos, path)?, "width", path)?;
    let height = parse_dim(header_token(bytes, &mut pos, path)?, "height", path)?;
    let maxval = header_token(bytes, &mut pos, path)?;
    if maxval != "255" {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let need = width * height * 3;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() < need {
        return Err(Error::format(path, format!("truncated pixel data: expected {need} bytes, found {}", body.len())));
    }
    let data = body[..need]
        .chunks_exact(3)
        .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0)
        .collect();
    Ok(Grid::from_vec(width, height, data))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Contents of a PFM file.
#[derive(Debug, Clone, PartialEq)]
pub enum FloatMap {
    Gray(Grid<f64>),
    Rgb(Grid<Vector3<f64>>),
}

fn encode_pfm(width: usize, height: usize, channels: usize, value: impl Fn(usize, usize) -> f64) -> Vec<u8> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(width * height * channels * 4);
    // rows are stored bottom to top
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                out.write_f32::<LittleEndian>(value(y * width + x, c) as f32).unwrap();
            }
        }
    }
    out
}

pub fn encode_pfm_gray(map: &Grid<f64>) -> Vec<u8> {
    encode_pfm(map.width, map.height, 1, |i, _| map.data[i])
}

pub fn encode_pfm_rgb(map: &Grid<Vector3<f64>>) -> Vec<u8> {
    encode_pfm(map.width, map.height, 3, |i, c| map.data[i][c])
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<FloatMap> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos, path)? {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::format(path, format!("not a PFM file (magic '{other}')"))),
    };
    let width = parse_dim(header_token(bytes, &mut pos, path)?, "width", path)?;
    let height = parse_dim(header_token(bytes, &mut pos, path)?, "height", path)?;
    let scale_tok = header_token(bytes, &mut pos, path)?;
    let scale: f64 = scale_tok
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| Error::format(path, format!("bad scale '{scale_tok}'")))?;
    let need = width * height * channels * 4;
    let body = &bytes[pos.min(bytes.len())..];
    if body.len() < need {
        return Err(Error::format(path, format!("truncated float data: expected {need} bytes, found {}", body.len())));
    }
    let mut cur = Cursor::new(&body[..need]);
    let mut values = vec![0.0f64; width * height * channels];
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let v = if scale < 0.0 {
                    cur.read_f32::<LittleEndian>()
                } else {
                    cur.read_f32::<BigEndian>()
                }
                .map_err(|e| Error::io(path, e))?;
                values[(y * width + x) * channels + c] = v as f64;
            }
        }
    }
    Ok(if channels == 1 {
        FloatMap::Gray(Grid::from_vec(width, height, values))
    } else {
        FloatMap::Rgb(Grid::from_vec(
            width,
            height,
            values.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect(),
        ))
    })
}

pub fn write_pfm_gray(path: impl AsRef<Path>, map: &Grid<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm_gray(map)).map_err(|e| Error::io(path, e))
}

pub fn write_pfm_rgb(path: impl AsRef<Path>, map: &Grid<Vector3<f64>>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm_rgb(map)).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<FloatMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

pub fn read_pfm_gray(path: impl AsRef<Path>) -> Result<Grid<f64>> {
    let path = path.as_ref();
    match read_pfm(path)? {
        FloatMap::Gray(g) => Ok(g),
        FloatMap::Rgb(_) => Err(Error::format(path, "expected a 1-channel PFM")),
    }
}

pub fn read_pfm_rgb(path: impl AsRef<Path>) -> Result<Grid<Vector3<f64>>> {
    let path = path.as_ref();
    match read_pfm(path)? {
        FloatMap::Rgb(g) => Ok(g),
        FloatMap::Gray(_) => Err(Error::format(path, "expected a 3-channel PFM")),
    }
}
