//! Decoders for the upstream dataset files: IDX (MNIST, Fashion-MNIST) and
//! the CIFAR binary batches.

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Decoded IDX image file: `count` row-major `rows × cols` u8 images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn header(bytes: &[u8], what: &'static str, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let len = 4 + 4 * dims;
    if bytes.len() < len {
        return Err(Error::format(what, format!("header truncated ({} bytes)", bytes.len())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::format(what, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    Ok((0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect())
}

fn body<'a>(bytes: &'a [u8], offset: usize, dims: &[usize], what: &'static str) -> Result<&'a [u8]> {
    let want = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(what, "dimensions overflow"))?;
    let have = bytes.len() - offset;
    if have < want {
        return Err(Error::format(what, format!("truncated: {have} of {want} payload bytes")));
    }
    if have > want {
        return Err(Error::format(what, format!("{} trailing bytes", have - want)));
    }
    Ok(&bytes[offset..])
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let dims = header(bytes, "IDX image file", IDX_IMAGES_MAGIC, 3)?;
    let pixels = body(bytes, 16, &dims, "IDX image file")?;
    if dims[1] == 0 || dims[2] == 0 {
        return Err(Error::format("IDX image file", "zero image extent"));
    }
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels: pixels.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let dims = header(bytes, "IDX label file", IDX_LABELS_MAGIC, 1)?;
    Ok(body(bytes, 8, &dims, "IDX label file")?.to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub const PIXELS: usize = 3 * 32 * 32;

    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + Self::PIXELS,
            CifarVariant::Cifar100 => 2 + Self::PIXELS,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Decoded CIFAR records: labels (fine labels for CIFAR-100) and channel-major
/// pixels, `3072` bytes per record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecords {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar_records(bytes: &[u8], variant: CifarVariant) -> Result<CifarRecords> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::format(
            "CIFAR batch",
            format!("size {} is not a positive multiple of {rec}", bytes.len()),
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CifarVariant::PIXELS);
    for r in bytes.chunks_exact(rec) {
        let (label, px) = r.split_at(rec - CifarVariant::PIXELS);
        let label = *label.last().unwrap();
        if label as usize >= variant.num_classes() {
            return Err(Error::format("CIFAR batch", format!("label {label} out of range")));
        }
        labels.push(label);
        pixels.extend_from_slice(px);
    }
    Ok(CifarRecords { labels, pixels })
}

/// Reads a whole file, transparently gunzipping. A missing `path` falls back
/// to `path.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let path: PathBuf = if path.exists() {
        path.to_path_buf()
    } else {
        let mut gz = path.as_os_str().to_owned();
        gz.push(".gz");
        let gz = PathBuf::from(gz);
        if gz.exists() {
            gz
        } else {
            path.to_path_buf()
        }
    };
    let mut raw = Vec::new();
    File::open(&path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(&path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(&path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}
