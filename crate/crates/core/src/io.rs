//! Text and image artifacts: mask CSV, kernel CSV, loss traces, PGM.
//!
//! Every writer goes through [`write_atomic`], so a failed or interrupted
//! write never leaves a partial file behind.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::GaussianKernel;
use crate::numerics::Matrix;

/// Writes `bytes` to a temporary sibling file, then renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Headerless row-major CSV, 17 significant digits per value.
pub fn mask_to_csv(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 24);
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn parse_rows(text: &[u8], what: &str) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text);
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(format!("{what}: {e}")))?;
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("{what}: line {}: bad number {f:?}", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn mask_from_csv(text: &str) -> Result<Matrix> {
    let rows = parse_rows(text.as_bytes(), "mask csv")?;
    if rows.is_empty() {
        return Err(Error::Format("mask csv: no rows".into()));
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Format(format!("mask csv: {e}")))
}

pub fn write_mask_csv(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_atomic(path, mask_to_csv(m).as_bytes())
}

pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format(format!("{}: not UTF-8", path.display())))?;
    mask_from_csv(&text)
}

/// One `α,σ` line per kernel.
pub fn write_kernels_csv(path: impl AsRef<Path>, kernels: &[GaussianKernel]) -> Result<()> {
    let mut out = String::new();
    for k in kernels {
        out.push_str(&format!("{:.16e},{:.16e}\n", k.alpha, k.sigma));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_kernels_csv(path: impl AsRef<Path>) -> Result<Vec<GaussianKernel>> {
    let rows = parse_rows(&read_file(path.as_ref())?, "kernel csv")?;
    rows.into_iter()
        .map(|r| match r.as_slice() {
            [a, s] => Ok(GaussianKernel::new(*a, *s)),
            _ => Err(Error::Format(format!("kernel csv: expected 2 columns, got {}", r.len()))),
        })
        .collect()
}

/// `step,loss` lines with a header.
pub fn write_trace_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l:.16e}\n"));
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmMode {
    /// ASCII.
    P2,
    /// Binary.
    P5,
}

/// 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Min–max normalizes to `0..=255`, `round(255·(v − min)/(max − min))`.
/// A constant input maps to 128.
pub fn normalize_to_gray(m: &Matrix) -> Result<GrayImage> {
    if !m.is_finite() {
        return Err(Error::Format("cannot render non-finite values".into()));
    }
    let vals = m.as_slice();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pixels = vals
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (255.0 * (v - min) / range).round() as u8
            } else {
                128
            }
        })
        .collect();
    Ok(GrayImage {
        width: m.cols(),
        height: m.rows(),
        pixels,
    })
}

pub fn encode_pgm(img: &GrayImage, mode: PgmMode) -> Vec<u8> {
    match mode {
        PgmMode::P2 => {
            let mut out = format!("P2\n{} {}\n255\n", img.width, img.height);
            for row in img.pixels.chunks(img.width.max(1)) {
                let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
            out.into_bytes()
        }
        PgmMode::P5 => {
            let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&img.pixels);
            out
        }
    }
}

/// Decodes P2 or P5 with maxval ≤ 255; `#` comments in the header are skipped.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |msg: &str| Error::Format(format!("pgm: {msg}"));
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> Result<String> {
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
            return Err(bad("unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    let num = |s: String| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let width = num(next_token(&mut pos)?)?;
    let height = num(next_token(&mut pos)?)?;
    let maxval = num(next_token(&mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be in 1..=255"));
    }
    let count = width * height;
    let pixels = match magic.as_str() {
        "P5" => {
            // exactly one whitespace byte separates the header from the raster
            let start = pos + 1;
            if bytes.len() < start + count {
                return Err(bad("truncated raster"));
            }
            bytes[start..start + count].to_vec()
        }
        "P2" => {
            let mut px = Vec::with_capacity(count);
            for _ in 0..count {
                let v = num(next_token(&mut pos)?)?;
                if v > maxval {
                    return Err(bad("sample exceeds maxval"));
                }
                px.push(v as u8);
            }
            px
        }
        _ => return Err(bad("unknown magic")),
    };
    Ok(GrayImage { width, height, pixels })
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage, mode: PgmMode) -> Result<()> {
    write_atomic(path, &encode_pgm(img, mode))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    decode_pgm(&read_file(path.as_ref())?)
}
