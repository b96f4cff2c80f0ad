//! Parameter container: a plain-text index followed by raw little-endian data.
//!
//! ```text
//! ctseg-params 1
//! count <n>
//! <name> <dtype> <dims joined by 'x' | scalar> <byte offset> <trainable 0|1>
//! ...
//! data
//! <raw bytes>
//! ```
//!
//! Offsets are relative to the first byte after the `data` line.

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &str = "ctseg-params 1";

pub fn write_params<T: Real>(store: &ParamStore<T>) -> Vec<u8> {
    let mut header = format!("{MAGIC}\ncount {}\n", store.len());
    let mut offset = 0usize;
    for e in store.entries() {
        let dims = if e.value.shape().is_empty() {
            "scalar".to_string()
        } else {
            e.value
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        };
        header.push_str(&format!(
            "{} {} {} {} {}\n",
            e.name,
            T::DTYPE,
            dims,
            offset,
            u8::from(e.trainable)
        ));
        offset += e.value.numel() * T::BYTES;
    }
    header.push_str("data\n");
    let mut out = header.into_bytes();
    for e in store.entries() {
        for &v in e.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn read_params<T: Real>(bytes: &[u8], origin: &str) -> Result<ParamStore<T>> {
    let mut lines = Vec::new();
    let mut pos = 0usize;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(origin, lines.len() + 1, "unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end])
            .map_err(|_| Error::parse(origin, lines.len() + 1, "header is not utf-8"))?;
        pos += end + 1;
        if line == "data" {
            break;
        }
        lines.push(line.to_string());
    }
    let data = &bytes[pos..];
    if lines.first().map(String::as_str) != Some(MAGIC) {
        return Err(Error::parse(origin, 1, format!("expected '{MAGIC}'")));
    }
    let count: usize = lines
        .get(1)
        .and_then(|l| l.strip_prefix("count "))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| Error::parse(origin, 2, "expected 'count <n>'"))?;
    if lines.len() != count + 2 {
        return Err(Error::parse(
            origin,
            lines.len(),
            format!(
                "index lists {} entries, count says {count}",
                lines.len() - 2
            ),
        ));
    }
    let mut store = ParamStore::new();
    for (i, line) in lines[2..].iter().enumerate() {
        let lineno = i + 3;
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, dtype, dims, offset, trainable] = fields[..] else {
            return Err(Error::parse(origin, lineno, "expected 5 fields"));
        };
        if dtype != T::DTYPE {
            return Err(Error::parse(
                origin,
                lineno,
                format!("dtype {dtype}, expected {}", T::DTYPE),
            ));
        }
        let shape: Vec<usize> = if dims == "scalar" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(origin, lineno, format!("bad shape '{dims}'")))?
        };
        let offset: usize = offset
            .parse()
            .map_err(|_| Error::parse(origin, lineno, "bad offset"))?;
        let n: usize = shape.iter().product();
        let end = offset + n * T::BYTES;
        if end > data.len() {
            return Err(Error::parse(origin, lineno, "data section too short"));
        }
        let values = data[offset..end]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        let tensor = Tensor::new_allow_empty(&shape, values)?;
        store.add(name, tensor, trainable == "1")?;
    }
    Ok(store)
}

pub fn save_params<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    fs::write(path, write_params(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params<T: Real>(path: &Path) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params(&bytes, &path.display().to_string())
}
