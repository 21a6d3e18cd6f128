//! IDX (MNIST-family) file reader. Files may be gzip-compressed.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::dataset::Split;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UNSIGNED_BYTE: u8 = 0x08;

/// Decoded IDX array of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    const WHAT: &str = "IDX file";
    if bytes.len() < 4 {
        return Err(Error::format(WHAT, "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(WHAT, format!("bad magic {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != UNSIGNED_BYTE {
        return Err(Error::format(WHAT, format!("unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::format(WHAT, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::format(WHAT, "truncated dimension list"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(WHAT, "dimension product overflows"))?;
    let body = &bytes[header..];
    if body.len() < len {
        return Err(Error::format(
            WHAT,
            format!("truncated body: expected {len} bytes, found {}", body.len()),
        ));
    }
    Ok(IdxArray {
        dims,
        data: body[..len].to_vec(),
    })
}

pub fn read_idx_file(path: &Path) -> Result<IdxArray> {
    let raw = std::fs::read(path)?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Loads an image/label file pair. Pixels are scaled to [0, 1]; images get
/// a leading channel axis, `(n, 1, H, W)`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Split> {
    let images = read_idx_file(images_path.as_ref())?;
    let labels = read_idx_file(labels_path.as_ref())?;
    split_from_idx(images, labels)
}

pub fn split_from_idx(images: IdxArray, labels: IdxArray) -> Result<Split> {
    if labels.dims.len() != 1 {
        return Err(Error::format("IDX labels", format!("expected 1 dimension, got {:?}", labels.dims)));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::format(
            "IDX pair",
            format!("{n} images but {} labels", labels.dims[0]),
        ));
    }
    let shape = match images.dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        [n, f] => vec![*n, *f],
        d => return Err(Error::format("IDX images", format!("unsupported dims {d:?}"))),
    };
    let pixels = images.data.iter().map(|&b| b as f32 / 255.0).collect();
    let tensor = Tensor::new(shape, pixels).map_err(|e| Error::format("IDX images", e.to_string()))?;
    Split::new(tensor, labels.data.iter().map(|&b| b as usize).collect())
}

/// Serializes an unsigned-byte IDX array (used for fixtures and exports).
pub fn encode_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, UNSIGNED_BYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}
