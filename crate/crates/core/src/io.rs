//! Cube, ground-truth and score-map files.
//!
//! A cube is a pair of files sharing a stem: `<stem>.json` holds the header
//! `{"height":H,"width":W,"bands":B,"dtype":"f32le","layout":"bsq"}` and
//! `<stem>.raw` holds `H·W·B` little-endian `f32` values, band-major then
//! row-major. Ground truth and previews are binary PGM (`P5`, maxval 255).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cube::{GroundTruthMap, HsiCube};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubeHeader {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub dtype: HeaderTag,
    pub layout: HeaderTag,
}

/// Fixed-vocabulary header strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeaderTag {
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "bsq")]
    Bsq,
}

/// Header and payload paths for a cube stem (`foo`, `foo.json` or `foo.raw`).
pub fn cube_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

pub fn load_cube<T: Scalar>(path: &Path) -> Result<HsiCube<T>> {
    let (header_path, raw_path) = cube_paths(path);
    for p in [&header_path, &raw_path] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let text = fs::read_to_string(&header_path)?;
    let header: CubeHeader =
        serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
    if header.dtype != HeaderTag::F32Le || header.layout != HeaderTag::Bsq {
        return Err(Error::MalformedHeader {
            path: header_path,
            reason: "dtype must be \"f32le\" and layout \"bsq\"".into(),
        });
    }
    if header.height < 3 || header.width < 3 || header.bands == 0 {
        return Err(Error::MalformedHeader {
            path: header_path,
            reason: format!(
                "cube must be at least 3x3x1, got {}x{}x{}",
                header.height, header.width, header.bands
            ),
        });
    }
    let bytes = fs::read(&raw_path)?;
    let expected = header.height * header.width * header.bands;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len() / 4,
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    HsiCube::new(header.height, header.width, header.bands, values)
}

pub fn save_cube<T: Scalar>(cube: &HsiCube<T>, path: &Path) -> Result<()> {
    let (header_path, raw_path) = cube_paths(path);
    let header = CubeHeader {
        height: cube.height(),
        width: cube.width(),
        bands: cube.bands(),
        dtype: HeaderTag::F32Le,
        layout: HeaderTag::Bsq,
    };
    fs::write(&header_path, serde_json::to_string(&header)?)?;
    let mut payload = Vec::with_capacity(cube.as_slice().len() * 4);
    for v in cube.as_slice() {
        payload.extend_from_slice(&v.as_f32().to_le_bytes());
    }
    fs::write(raw_path, payload)?;
    Ok(())
}

pub fn write_pgm(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<()> {
    assert_eq!(pixels.len(), height * width);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Reads a binary 8-bit PGM, returning `(height, width, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // Four whitespace-separated header tokens; '#' starts a comment line.
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates maxval from the raster.
    pos += 1;
    if tokens[0] != "P5" {
        return Err(bad("expected binary PGM magic P5"));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| bad("non-numeric PGM header field"));
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    if parse(&tokens[3])? != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(Error::SizeMismatch {
            expected: width * height,
            actual: raster.len(),
        });
    }
    Ok((height, width, raster.to_vec()))
}

pub fn save_truth(truth: &GroundTruthMap, path: &Path) -> Result<()> {
    let px: Vec<u8> = truth.labels().iter().map(|&l| if l { 255 } else { 0 }).collect();
    write_pgm(path, truth.height(), truth.width(), &px)
}

/// Any non-zero pixel is a target.
pub fn load_truth(path: &Path) -> Result<GroundTruthMap> {
    let (h, w, px) = read_pgm(path)?;
    GroundTruthMap::new(h, w, px.into_iter().map(|p| p != 0).collect())
}

/// Min/max scales values to 0..=255 for a PGM preview. Constant input maps to 0.
pub fn to_gray<T: Scalar>(values: &[T]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    values
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * T::of(255.0)).round().as_f64() as u8
            } else {
                0
            }
        })
        .collect()
}
