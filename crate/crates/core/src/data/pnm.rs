//! Binary PPM (P6) and PGM (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Decoded image; samples are interleaved per pixel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Pnm {
    pub fn encode(&self) -> Vec<u8> {
        let magic = match self.kind {
            PnmKind::Gray => "P5",
            PnmKind::Rgb => "P6",
        };
        let mut out =
            format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            for &v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.encode()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Pnm> {
        let kind = match bytes.get(..2) {
            Some(b"P5") => PnmKind::Gray,
            Some(b"P6") => PnmKind::Rgb,
            _ => return Err(Error::parse(path, 0, "expected magic P5 or P6")),
        };
        let mut pos = 2;
        let mut field = |what: &str| -> Result<usize> {
            // whitespace and `#` comments
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
                return Err(Error::parse(path, start, format!("expected {what}")));
            }
            std::str::from_utf8(&bytes[start..pos])
                .unwrap()
                .parse()
                .map_err(|_| Error::parse(path, start, format!("{what} out of range")))
        };
        let width = field("width")?;
        let height = field("height")?;
        let maxval = field("maxval")?;
        if !(1..=65535).contains(&maxval) {
            return Err(Error::parse(
                path,
                pos,
                format!("maxval {maxval} outside 1..=65535"),
            ));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::parse(path, pos, "expected whitespace after maxval"));
        }
        pos += 1;
        let count = width * height * kind.channels();
        let wide = maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let payload = &bytes[pos..];
        if payload.len() != need {
            return Err(Error::parse(
                path,
                pos,
                format!("expected {need} payload bytes, found {}", payload.len()),
            ));
        }
        let data: Vec<u16> = if wide {
            payload
                .chunks(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]))
                .collect()
        } else {
            payload.iter().map(|&b| b as u16).collect()
        };
        if let Some(i) = data.iter().position(|&v| v as usize > maxval) {
            return Err(Error::parse(
                path,
                pos,
                format!("sample {i} exceeds maxval {maxval}"),
            ));
        }
        Ok(Pnm {
            kind,
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Pnm> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Pnm::decode(&bytes, path)
    }
}

/// Min-max normalise a `[H, W]` map to an 8-bit PGM. A constant map
/// becomes mid-gray (128).
pub fn heatmap<T: Real>(x: &Tensor<T>) -> Result<Pnm> {
    let [h, w] = x.dims2()?;
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let range = hi - lo;
    let data = x
        .data()
        .iter()
        .map(|v| {
            if range > 0.0 {
                ((v.as_f64() - lo) / range * 255.0).round() as u16
            } else {
                128
            }
        })
        .collect();
    Ok(Pnm {
        kind: PnmKind::Gray,
        width: w,
        height: h,
        maxval: 255,
        data,
    })
}

pub fn write_pgm_heatmap<T: Real>(x: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    heatmap(x)?.save(path)
}
