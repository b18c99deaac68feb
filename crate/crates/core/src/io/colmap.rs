//! COLMAP text models (`cameras.txt`, `images.txt`, `points3D.txt`).
//!
//! COLMAP puts the centre of the top-left pixel at `(0.5, 0.5)`; this crate
//! puts it at `(0, 0)`. The principal point is shifted by half a pixel on the
//! way in and out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    pub camera_id: u32,
    /// World to camera.
    pub pose: Pose,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePoint {
    pub position: Vector3<f64>,
    /// Linear RGB in `[0, 1]`.
    pub color: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<SparsePoint>,
}

struct Fields<'a> {
    path: &'a Path,
    line: usize,
    parts: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn need(&self, n: usize) -> Result<()> {
        if self.parts.len() < n {
            return Err(self.err(format!("expected at least {n} fields, found {}", self.parts.len())));
        }
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, i: usize, what: &str) -> Result<T> {
        self.parts[i]
            .parse()
            .map_err(|_| self.err(format!("bad {what} '{}'", self.parts[i])))
    }
}

/// Non-comment lines with their 1-based line numbers. Blank lines are kept
/// because `images.txt` uses them for images without 2D points.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim_start().starts_with('#'))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<BTreeMap<u32, ColmapCamera>> {
    let mut out = BTreeMap::new();
    for (line, l) in data_lines(text) {
        if l.trim().is_empty() {
            continue;
        }
        let f = Fields {
            path,
            line,
            parts: l.split_whitespace().collect(),
        };
        f.need(4)?;
        let id: u32 = f.parse(0, "camera id")?;
        let model = f.parts[1];
        let width: usize = f.parse(2, "width")?;
        let height: usize = f.parse(3, "height")?;
        let params: Vec<f64> = (4..f.parts.len()).map(|i| f.parse(i, "parameter")).collect::<Result<_>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE" | "SIMPLE_PINHOLE", p) => {
                return Err(f.err(format!("{model} takes {} parameters, found {}", if model == "PINHOLE" { 4 } else { 3 }, p.len())))
            }
            _ => {
                return Err(Error::UnsupportedCameraModel {
                    path: path.to_path_buf(),
                    line,
                    model: model.to_string(),
                })
            }
        };
        let k = Intrinsics::new(fx, fy, cx - 0.5, cy - 0.5, width, height).map_err(|e| f.err(e.to_string()))?;
        if out.insert(id, ColmapCamera { id, intrinsics: k }).is_some() {
            return Err(f.err(format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

pub fn parse_images(text: &str, path: &Path) -> Result<Vec<ColmapImage>> {
    let mut out = Vec::new();
    let mut lines = data_lines(text);
    while let Some((line, l)) = lines.next() {
        if l.trim().is_empty() {
            continue;
        }
        let f = Fields {
            path,
            line,
            parts: l.split_whitespace().collect(),
        };
        f.need(10)?;
        let id: u32 = f.parse(0, "image id")?;
        let q: Vec<f64> = (1..5).map(|i| f.parse(i, "quaternion")).collect::<Result<_>>()?;
        let t: Vec<f64> = (5..8).map(|i| f.parse(i, "translation")).collect::<Result<_>>()?;
        let camera_id: u32 = f.parse(8, "camera id")?;
        let name = f.parts[9..].join(" ");
        let pose = Pose::from_quaternion([q[0], q[1], q[2], q[3]], Vector3::new(t[0], t[1], t[2])).map_err(|e| f.err(e.to_string()))?;
        out.push(ColmapImage {
            id,
            camera_id,
            pose,
            name,
        });
        // the 2D observation line that follows each image line
        lines.next();
    }
    Ok(out)
}

pub fn parse_points(text: &str, path: &Path) -> Result<Vec<SparsePoint>> {
    let mut out = Vec::new();
    for (line, l) in data_lines(text) {
        if l.trim().is_empty() {
            continue;
        }
        let f = Fields {
            path,
            line,
            parts: l.split_whitespace().collect(),
        };
        f.need(7)?;
        let _: u64 = f.parse(0, "point id")?;
        let x: Vec<f64> = (1..4).map(|i| f.parse(i, "coordinate")).collect::<Result<_>>()?;
        let c: Vec<u8> = (4..7).map(|i| f.parse(i, "color")).collect::<Result<_>>()?;
        out.push(SparsePoint {
            position: Vector3::new(x[0], x[1], x[2]),
            color: Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64) / 255.0,
        });
    }
    Ok(out)
}

/// Reads a model from `dir`. A missing `points3D.txt` is an error.
pub fn read_colmap(dir: impl AsRef<Path>) -> Result<ColmapModel> {
    let dir = dir.as_ref();
    let cp = dir.join("cameras.txt");
    let ip = dir.join("images.txt");
    let pp = dir.join("points3D.txt");
    let cameras = parse_cameras(&read_text(&cp)?, &cp)?;
    let images = parse_images(&read_text(&ip)?, &ip)?;
    for img in &images {
        if !cameras.contains_key(&img.camera_id) {
            return Err(Error::format(&ip, format!("image {} references unknown camera {}", img.id, img.camera_id)));
        }
    }
    let points = parse_points(&read_text(&pp)?, &pp)?;
    Ok(ColmapModel { cameras, images, points })
}

pub fn format_cameras(cameras: &BTreeMap<u32, ColmapCamera>) -> String {
    let mut s = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    for c in cameras.values() {
        let k = &c.intrinsics;
        writeln!(s, "{} PINHOLE {} {} {} {} {} {}", c.id, k.width, k.height, k.fx, k.fy, k.cx + 0.5, k.cy + 0.5).unwrap();
    }
    s
}

pub fn format_images(images: &[ColmapImage]) -> String {
    let mut s = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for img in images {
        let q = img.pose.quaternion();
        let t = img.pose.translation;
        writeln!(s, "{} {} {} {} {} {} {} {} {} {}", img.id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, img.camera_id, img.name).unwrap();
        s.push('\n');
    }
    s
}

pub fn format_points(points: &[SparsePoint]) -> String {
    let mut s = String::from("# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n");
    for (i, p) in points.iter().enumerate() {
        let c = p.color.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(s, "{} {} {} {} {} {} {} 0", i + 1, p.position.x, p.position.y, p.position.z, c.x, c.y, c.z).unwrap();
    }
    s
}

pub fn write_colmap(dir: impl AsRef<Path>, model: &ColmapModel) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [
        ("cameras.txt", format_cameras(&model.cameras)),
        ("images.txt", format_images(&model.images)),
        ("points3D.txt", format_points(&model.points)),
    ] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
