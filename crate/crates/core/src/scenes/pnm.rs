//! Binary PPM (P6, 8-bit) and PGM (P5, 16-bit big-endian) with a JSON depth
//! sidecar.
//!
//! Depth value `d` in `[d_min, d_max]` encodes as
//! `1 + round((d − d_min)/(d_max − d_min)·65534)`; the code `0` marks an
//! invalid pixel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, SceneError, SceneMeta, SceneSample};

pub const DEPTH_MAXVAL: u32 = 65535;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSidecar {
    pub d_min: f64,
    pub d_max: f64,
    pub maxval: u32,
    /// Code reserved for pixels without ground truth.
    pub invalid_code: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<SceneMeta>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub rgb: PathBuf,
    pub depth: PathBuf,
}

impl SamplePaths {
    pub fn sidecar(&self) -> PathBuf {
        sidecar_path(&self.depth)
    }
}

pub fn sidecar_path(depth: &Path) -> PathBuf {
    let mut name = depth.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Header {
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    let bad = |reason: String| SceneError::Header {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(bad(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad(format!("expected a number at byte {start}")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("number out of range at byte {start}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad(format!(
            "bad dimensions {width}x{height} or maxval {maxval}"
        )));
    }
    Ok(Header {
        width: width as usize,
        height: height as usize,
        maxval,
        offset: pos + 1,
    })
}

fn payload<'a>(
    bytes: &'a [u8],
    header: &Header,
    bytes_per_pixel: usize,
    path: &Path,
) -> Result<&'a [u8]> {
    let expected = header.width * header.height * bytes_per_pixel;
    let body = &bytes[header.offset..];
    if body.len() < expected {
        return Err(SceneError::Truncated {
            path: path.display().to_string(),
            expected,
            found: body.len(),
        });
    }
    Ok(&body[..expected])
}

/// Writes interleaved RGB in `[0, 1]` as an 8-bit P6.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    assert_eq!(rgb.len(), 3 * width * height, "rgb length");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(
        rgb.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out).map_err(io_err(path))
}

/// Returns `(width, height, rgb)` with values scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header = parse_header(&bytes, b"P6", path)?;
    if header.maxval > 255 {
        return Err(SceneError::Maxval {
            path: path.display().to_string(),
            found: header.maxval,
            expected: 255,
        });
    }
    let scale = header.maxval as f64;
    let rgb = payload(&bytes, &header, 3, path)?
        .iter()
        .map(|&b| b as f64 / scale)
        .collect();
    Ok((header.width, header.height, rgb))
}

/// Raw 16-bit big-endian P5 with maxval 65535.
pub fn write_pgm16(path: &Path, width: usize, height: usize, codes: &[u16]) -> Result<()> {
    assert_eq!(codes.len(), width * height, "pgm length");
    let mut out = format!("P5\n{width} {height}\n{DEPTH_MAXVAL}\n").into_bytes();
    for &c in codes {
        out.extend_from_slice(&c.to_be_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let header = parse_header(&bytes, b"P5", path)?;
    if header.maxval != DEPTH_MAXVAL {
        return Err(SceneError::Maxval {
            path: path.display().to_string(),
            found: header.maxval,
            expected: DEPTH_MAXVAL,
        });
    }
    let codes = payload(&bytes, &header, 2, path)?
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((header.width, header.height, codes))
}

pub fn encode_depth(d: f64, d_min: f64, d_max: f64) -> u16 {
    let t = ((d - d_min) / (d_max - d_min)).clamp(0.0, 1.0);
    1 + (t * (DEPTH_MAXVAL - 1) as f64).round() as u16
}

pub fn decode_depth(code: u16, d_min: f64, d_max: f64) -> f64 {
    d_min + (code - 1) as f64 * (d_max - d_min) / (DEPTH_MAXVAL - 1) as f64
}

/// Writes the depth PGM and its sidecar.
pub fn write_depth(
    path: &Path,
    width: usize,
    height: usize,
    depth: &[f64],
    valid: &[bool],
    sidecar: &DepthSidecar,
) -> Result<()> {
    let codes: Vec<u16> = depth
        .iter()
        .zip(valid)
        .map(|(&d, &v)| {
            if v {
                encode_depth(d, sidecar.d_min, sidecar.d_max)
            } else {
                0
            }
        })
        .collect();
    write_pgm16(path, width, height, &codes)?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(sidecar).map_err(|source| SceneError::Json {
        path: side.display().to_string(),
        source,
    })?;
    fs::write(&side, json).map_err(io_err(&side))
}

/// Returns `(width, height, depth, valid, sidecar)`; invalid pixels carry
/// depth 0.
#[allow(clippy::type_complexity)]
pub fn read_depth(path: &Path) -> Result<(usize, usize, Vec<f64>, Vec<bool>, DepthSidecar)> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(SceneError::MissingSidecar(side.display().to_string()));
    }
    let text = fs::read(&side).map_err(io_err(&side))?;
    let sidecar: DepthSidecar =
        serde_json::from_slice(&text).map_err(|source| SceneError::Json {
            path: side.display().to_string(),
            source,
        })?;
    let (w, h, codes) = read_pgm16(path)?;
    let valid: Vec<bool> = codes.iter().map(|&c| c != sidecar.invalid_code).collect();
    let depth = codes
        .iter()
        .map(|&c| {
            if c == sidecar.invalid_code {
                0.0
            } else {
                decode_depth(c, sidecar.d_min, sidecar.d_max)
            }
        })
        .collect();
    Ok((w, h, depth, valid, sidecar))
}

/// Depth rendered for viewing: log-scaled over `[d_min, d_max]`, near is
/// bright, invalid is black.
pub fn write_depth_visual(
    path: &Path,
    width: usize,
    height: usize,
    depth: &[f64],
    d_min: f64,
    d_max: f64,
) -> Result<()> {
    let span = d_max.ln() - d_min.ln();
    let codes: Vec<u16> = depth
        .iter()
        .map(|&d| {
            if d > 0.0 {
                let t = 1.0 - ((d.ln() - d_min.ln()) / span).clamp(0.0, 1.0);
                1 + (t * (DEPTH_MAXVAL - 1) as f64).round() as u16
            } else {
                0
            }
        })
        .collect();
    write_pgm16(path, width, height, &codes)
}

pub fn write_sample(sample: &SceneSample, paths: &SamplePaths) -> Result<()> {
    let (d_min, d_max) = match &sample.meta {
        Some(m) => (m.config.d_min, m.config.d_max),
        None => {
            let valid = sample
                .depth
                .iter()
                .zip(&sample.valid)
                .filter(|(_, &v)| v)
                .map(|(&d, _)| d);
            valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
                (lo.min(d), hi.max(d))
            })
        }
    };
    let (d_min, d_max) = if d_min < d_max {
        (d_min, d_max)
    } else {
        (0.0, d_min.max(1.0))
    };
    write_ppm(&paths.rgb, sample.width, sample.height, &sample.rgb)?;
    let sidecar = DepthSidecar {
        d_min,
        d_max,
        maxval: DEPTH_MAXVAL,
        invalid_code: 0,
        meta: sample.meta.clone(),
    };
    write_depth(
        &paths.depth,
        sample.width,
        sample.height,
        &sample.depth,
        &sample.valid,
        &sidecar,
    )
}

pub fn read_sample(paths: &SamplePaths) -> Result<SceneSample> {
    let (w, h, rgb) = read_ppm(&paths.rgb)?;
    let (dw, dh, depth, valid, sidecar) = read_depth(&paths.depth)?;
    if (w, h) != (dw, dh) {
        return Err(SceneError::Header {
            path: paths.depth.display().to_string(),
            reason: format!("size {dw}x{dh} differs from rgb {w}x{h}"),
        });
    }
    Ok(SceneSample {
        height: h,
        width: w,
        rgb,
        depth,
        valid,
        meta: sidecar.meta,
    })
}
