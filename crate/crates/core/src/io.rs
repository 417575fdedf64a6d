//! File formats: KITTI-style binary clouds, PFM/PGM rasters, 3×4 pose text,
//! intrinsics text and plain-text match dumps. Writers go through a temp file
//! and rename so readers never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud4D, RigidTransform};
use crate::raster::Grid;

/// Writes `bytes` to `path` atomically (sibling temp file, then rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Encodes a cloud as little-endian float32 `(x, y, z, intensity)` records.
pub fn encode_cloud(cloud: &PointCloud4D) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes float32 quadruplets; raw intensity is min-max normalized.
pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud4D> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(path, "length is not a multiple of 16 bytes"));
    }
    let pts = bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    PointCloud4D::from_raw(pts)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud4D> {
    decode_cloud(&fs::read(path)?, path)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud4D) -> Result<()> {
    write_atomic(path, &encode_cloud(cloud))
}

/// Single-channel little-endian PFM (`Pf`, negative scale). Rows are stored
/// bottom-to-top as the format requires.
pub fn encode_pfm(grid: &Grid<f64>) -> Vec<u8> {
    let (w, h) = (grid.width(), grid.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*grid.get(x, y) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Grid<f32>> {
    let (tokens, offset) = header_tokens(bytes, 4, path)?;
    if tokens[0] != "Pf" {
        return Err(Error::format(path, "only single-channel Pf maps are supported"));
    }
    let w: usize = parse_tok(&tokens[1], path)?;
    let h: usize = parse_tok(&tokens[2], path)?;
    let scale: f64 = parse_tok(&tokens[3], path)?;
    let payload = &bytes[offset..];
    if payload.len() != w * h * 4 {
        return Err(Error::format(path, "payload size does not match dimensions"));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; w * h];
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, yb) = (i % w, i / w);
        data[(h - 1 - yb) * w + x] = v;
    }
    Ok(Grid::from_vec(w, h, data).expect("sized"))
}

pub fn write_pfm(path: &Path, grid: &Grid<f64>) -> Result<()> {
    write_atomic(path, &encode_pfm(grid))
}

pub fn read_pfm(path: &Path) -> Result<Grid<f32>> {
    decode_pfm(&fs::read(path)?, path)
}

/// 8-bit binary PGM. Values are scaled by `255 / max_value` and clamped.
pub fn encode_pgm(grid: &Grid<f64>, max_value: f64) -> Vec<u8> {
    let (w, h) = (grid.width(), grid.height());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let s = if max_value > 0.0 { 255.0 / max_value } else { 0.0 };
    out.extend(grid.as_slice().iter().map(|v| (v * s).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Grid<f64>> {
    let (tokens, offset) = header_tokens(bytes, 4, path)?;
    if tokens[0] != "P5" {
        return Err(Error::format(path, "expected binary PGM (P5)"));
    }
    let w: usize = parse_tok(&tokens[1], path)?;
    let h: usize = parse_tok(&tokens[2], path)?;
    let maxval: f64 = parse_tok(&tokens[3], path)?;
    if maxval <= 0.0 || maxval > 255.0 {
        return Err(Error::format(path, "only 8-bit PGM is supported"));
    }
    let payload = &bytes[offset..];
    if payload.len() != w * h {
        return Err(Error::format(path, "payload size does not match dimensions"));
    }
    let data = payload.iter().map(|b| *b as f64 / maxval).collect();
    Ok(Grid::from_vec(w, h, data).expect("sized"))
}

pub fn write_pgm(path: &Path, grid: &Grid<f64>, max_value: f64) -> Result<()> {
    write_atomic(path, &encode_pgm(grid, max_value))
}

pub fn read_pgm(path: &Path) -> Result<Grid<f64>> {
    decode_pgm(&fs::read(path)?, path)
}

// PNM-style header: whitespace-separated tokens, `#` comments, and exactly one
// whitespace byte after the last token.
fn header_tokens(bytes: &[u8], n: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(path, "missing payload"));
    }
    Ok((tokens, i + 1))
}

fn parse_tok<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(path, format!("cannot parse {s:?}")))
}

/// Camera image from a binary PGM, or any PNG/other format the `image`
/// crate decodes, converted to luma in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<crate::raster::GrayImage> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P5") {
        return Ok(crate::raster::GrayImage::new(decode_pgm(&bytes, path)?));
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(crate::raster::GrayImage::new(
        Grid::from_vec(w as usize, h as usize, data).expect("sized"),
    ))
}

/// One line: 12 row-major reals of `[R | t]`.
pub fn format_pose(t: &RigidTransform) -> String {
    let rows = t.to_rows();
    let vals: Vec<String> = rows.iter().flatten().map(|v| format!("{v:e}")).collect();
    format!("{}\n", vals.join(" "))
}

pub fn parse_pose(text: &str, path: &Path) -> Result<RigidTransform> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|s| parse_tok(s, path))
        .collect::<Result<_>>()?;
    if vals.len() != 12 {
        return Err(Error::format(path, format!("expected 12 values, found {}", vals.len())));
    }
    let r = Matrix3::new(
        vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10],
    );
    let t = Vector3::new(vals[3], vals[7], vals[11]);
    // text files written by other tools often carry only 6-9 digits
    RigidTransform::new(r, t).or_else(|_| {
        RigidTransform::from_approx(r, t, 1e-4).map_err(|e| Error::format(path, e.to_string()))
    })
}

pub fn read_pose(path: &Path) -> Result<RigidTransform> {
    parse_pose(&fs::read_to_string(path)?, path)
}

pub fn write_pose(path: &Path, t: &RigidTransform) -> Result<()> {
    write_atomic(path, format_pose(t).as_bytes())
}

/// `fx fy cx cy width height` on one line.
pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "{:e} {:e} {:e} {:e} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
}

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(Error::format(path, "expected: fx fy cx cy width height"));
    }
    CameraIntrinsics::new(
        parse_tok(toks[0], path)?,
        parse_tok(toks[1], path)?,
        parse_tok(toks[2], path)?,
        parse_tok(toks[3], path)?,
        parse_tok(toks[4], path)?,
        parse_tok(toks[5], path)?,
    )
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    parse_intrinsics(&fs::read_to_string(path)?, path)
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<()> {
    write_atomic(path, format_intrinsics(k).as_bytes())
}
