//! RSSL-T binary tensor files and plain-text manifests.
//!
//! RSSL-T layout: magic `52 53 53 4C`, version u32 LE, ndim u32 LE, each dim
//! as u64 LE, then the payload as f64 LE in row-major order. Every persisted
//! artifact in the repo uses this format.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = [0x52, 0x53, 0x53, 0x4C];
pub const VERSION: u32 = 1;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let display = path.display().to_string();
    let mut file = fs::File::open(path).map_err(|e| Error::io(&display, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(&display, e))?;
    let bad = |reason: &str| Error::BadFormat {
        path: display.clone(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || bytes[..4] != MAGIC {
        return Err(bad("missing RSSL-T magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        if pos + 8 > bytes.len() {
            return Err(bad("truncated dims"));
        }
        shape.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
        pos += 8;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != pos + numel * 8 {
        return Err(bad("payload length does not match dims"));
    }
    let data = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Ordered key=value manifest. Keys render sorted so files are byte-stable.
pub type Manifest = BTreeMap<String, String>;

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let display = path.display().to_string();
    let mut file = fs::File::create(path).map_err(|e| Error::io(&display, e))?;
    for (k, v) in manifest {
        writeln!(file, "{k}={v}").map_err(|e| Error::io(&display, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
    let mut manifest = Manifest::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::BadFormat {
            path: display.clone(),
            reason: format!("line {}: expected key=value", lineno + 1),
        })?;
        manifest.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(manifest)
}

pub fn manifest_get<'a>(manifest: &'a Manifest, key: &str, path: &Path) -> Result<&'a str> {
    manifest
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::BadFormat {
            path: path.display().to_string(),
            reason: format!("missing key `{key}`"),
        })
}

pub fn manifest_parse<T: std::str::FromStr>(manifest: &Manifest, key: &str, path: &Path) -> Result<T> {
    let raw = manifest_get(manifest, key, path)?;
    raw.parse().map_err(|_| Error::BadFormat {
        path: path.display().to_string(),
        reason: format!("key `{key}`: cannot parse `{raw}`"),
    })
}
