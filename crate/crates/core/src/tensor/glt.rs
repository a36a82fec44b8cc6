//! GLT1 tensor files.
//!
//! A record is an ASCII header line `GLT1 <dtype> <ndim> <d0> <d1> ...\n`
//! followed by the values, row-major and little-endian. A checkpoint bundle
//! is `GLTB <count>\n` followed by `count` pairs of a parameter-name line and
//! a GLT1 record.

use std::fs;
use std::path::Path;

use super::{DType, Element, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// A tensor of whichever dtype the file declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8(Tensor<u8>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::U8(_) => DType::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::U8(t) => t.shape(),
        }
    }

    /// Convert a floating-point tensor to `T`. Integer tensors are rejected.
    pub fn into_real<T: Real>(self) -> Result<Tensor<T>> {
        match self {
            AnyTensor::F32(t) => Ok(t.cast()),
            AnyTensor::F64(t) => Ok(t.cast()),
            AnyTensor::U8(_) => Err(Error::Data(
                "expected a floating-point tensor, found u8".into(),
            )),
        }
    }
}

pub fn encode<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(format!("GLT1 {} {}", T::DTYPE, t.ndim()).as_bytes());
    for d in t.shape() {
        out.extend_from_slice(format!(" {d}").as_bytes());
    }
    out.push(b'\n');
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str> {
    let start = *pos;
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|i| start + i)
        .ok_or_else(|| Error::parse(path, start, "unterminated header line"))?;
    *pos = end + 1;
    std::str::from_utf8(&bytes[start..end])
        .map_err(|_| Error::parse(path, start, "header is not ASCII"))
}

/// Decode one record starting at `*pos`, advancing past it.
pub fn decode(bytes: &[u8], pos: &mut usize, path: &Path) -> Result<AnyTensor> {
    let start = *pos;
    let line = read_line(bytes, pos, path)?;
    let mut fields = line.split(' ');
    let mut offset = start;
    let mut next = |what: &str| -> Result<(usize, &str)> {
        let at = offset;
        let f = fields
            .next()
            .ok_or_else(|| Error::parse(path, at, format!("missing {what}")))?;
        offset += f.len() + 1;
        Ok((at, f))
    };
    let (at, magic) = next("magic")?;
    if magic != "GLT1" {
        return Err(Error::parse(
            path,
            at,
            format!("bad magic `{magic}`, expected GLT1"),
        ));
    }
    let (at, dtype) = next("dtype")?;
    let dtype = DType::parse(dtype)
        .ok_or_else(|| Error::parse(path, at, format!("unknown dtype `{dtype}`")))?;
    let (at, ndim) = next("ndim")?;
    let ndim: usize = ndim
        .parse()
        .map_err(|_| Error::parse(path, at, format!("bad ndim `{ndim}`")))?;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let (at, d) = next(&format!("extent {i}"))?;
        shape.push(
            d.parse::<usize>()
                .map_err(|_| Error::parse(path, at, format!("bad extent `{d}`")))?,
        );
    }
    if let Ok((at, extra)) = next("") {
        return Err(Error::parse(
            path,
            at,
            format!("trailing header field `{extra}`"),
        ));
    }
    let numel: usize = shape.iter().product();
    let nbytes = numel * dtype.size();
    if bytes.len() - *pos < nbytes {
        return Err(Error::parse(
            path,
            bytes.len(),
            format!(
                "payload truncated: need {nbytes} bytes after offset {}",
                *pos
            ),
        ));
    }
    let payload = &bytes[*pos..*pos + nbytes];
    *pos += nbytes;
    fn read<T: Element>(shape: Vec<usize>, payload: &[u8]) -> Tensor<T> {
        let size = T::DTYPE.size();
        Tensor::new(shape, payload.chunks(size).map(T::read_le).collect()).unwrap()
    }
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read(shape, payload)),
        DType::F64 => AnyTensor::F64(read(shape, payload)),
        DType::U8 => AnyTensor::U8(read(shape, payload)),
    })
}

pub fn save<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = Vec::new();
    encode(t, &mut out);
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let t = decode(&bytes, &mut pos, path)?;
    if pos != bytes.len() {
        return Err(Error::parse(
            path,
            pos,
            "trailing bytes after tensor payload",
        ));
    }
    Ok(t)
}

/// Write every entry of `store` (trainable weights and running statistics)
/// in store order.
pub fn save_bundle<T: Real>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = format!("GLTB {}\n", store.len()).into_bytes();
    for (_, p) in store.iter() {
        out.extend_from_slice(p.name.as_bytes());
        out.push(b'\n');
        encode(&p.value, &mut out);
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(path.as_ref(), e))
}

/// Read a bundle as `(name, tensor)` pairs in file order.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<Vec<(String, AnyTensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let head = read_line(&bytes, &mut pos, path)?;
    let count = head
        .strip_prefix("GLTB ")
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| Error::parse(path, 0, format!("bad bundle header `{head}`")))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_line(&bytes, &mut pos, path)?.to_string();
        let t = decode(&bytes, &mut pos, path)?;
        entries.push((name, t));
    }
    if pos != bytes.len() {
        return Err(Error::parse(
            path,
            pos,
            "trailing bytes after last bundle entry",
        ));
    }
    Ok(entries)
}

/// Overwrite the values in `store` from a bundle. Names and shapes must
/// match exactly, in both directions.
pub fn restore_bundle<T: Real>(store: &mut ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let entries = load_bundle(path.as_ref())?;
    if entries.len() != store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors, model expects {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, t) in entries {
        let id = store.id(&name).ok_or_else(|| {
            Error::Data(format!(
                "checkpoint tensor `{name}` is not a model parameter"
            ))
        })?;
        let value = t.into_real::<T>()?;
        let p = store.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Data(format!(
                "`{name}`: checkpoint shape {:?}, model shape {:?}",
                value.shape(),
                p.value.shape()
            )));
        }
        p.value = value;
    }
    Ok(())
}
