//! IDX files: a big-endian magic number, big-endian `u32` dimensions, then
//! the `u8` payload. Gzipped copies (`.gz`) are decompressed on read.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use protonesy_core::tasks::{FeatureStore, TaskError};
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("wrong magic {found}, expected {expected}")]
    WrongMagic { expected: u32, found: u32 },
    #[error("truncated file: {expected} bytes declared, {found} present")]
    Truncated { expected: usize, found: usize },
    #[error("{found} bytes present, header declares {expected}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} is not a digit")]
    NotADigit(u8),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no {what} file in {}", dir.display())]
    Missing { what: String, dir: PathBuf },
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: u32,
    pub cols: u32,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        let size = (self.rows * self.cols) as usize;
        self.pixels.len().checked_div(size).unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        for v in [IMAGE_MAGIC, self.count() as u32, self.rows, self.cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::WrongMagic { expected, found });
    }
    Ok(())
}

fn check_length(bytes: &[u8], expected: usize) -> Result<(), IdxError> {
    let found = bytes.len();
    if found < expected {
        return Err(IdxError::Truncated { expected, found });
    }
    if found > expected {
        return Err(IdxError::TrailingBytes { expected, found });
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)?;
    let cols = read_u32(bytes, 12)?;
    check_length(bytes, 16 + n * (rows as usize) * (cols as usize))?;
    Ok(IdxImages {
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = read_u32(bytes, 4)? as usize;
    check_length(bytes, 8 + n)?;
    Ok(bytes[8..].to_vec())
}

pub fn labels_to_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Images with one digit label each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistStore {
    pub images: IdxImages,
    pub labels: Vec<u8>,
}

impl MnistStore {
    pub fn new(images: IdxImages, labels: Vec<u8>) -> Result<Self, IdxError> {
        if images.count() != labels.len() {
            return Err(IdxError::CountMismatch {
                images: images.count(),
                labels: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l > 9) {
            return Err(IdxError::NotADigit(l));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened rows scaled to `[0, 1]`.
    pub fn features(&self) -> Result<FeatureStore, IdxError> {
        let dim = (self.images.rows * self.images.cols) as usize;
        let labels = self.labels.iter().map(|&l| l as usize).collect();
        Ok(FeatureStore::from_pixels(dim, &self.images.pixels, labels)?)
    }
}

/// Reads a file, gunzipping when the name ends in `.gz`.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = fs::read(path).map_err(io)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<MnistStore, IdxError> {
    let images = parse_images(&read_bytes(images)?)?;
    let labels = parse_labels(&read_bytes(labels)?)?;
    MnistStore::new(images, labels)
}

/// Locates `{prefix}-{kind}-idx{n}-ubyte`, also accepting a `.` before
/// `idx` and a `.gz` suffix.
fn find_file(dir: &Path, prefix: &str, kind: &str, n: u8) -> Result<PathBuf, IdxError> {
    for sep in ['-', '.'] {
        for suffix in ["", ".gz"] {
            let p = dir.join(format!("{prefix}-{kind}{sep}idx{n}-ubyte{suffix}"));
            if p.is_file() {
                return Ok(p);
            }
        }
    }
    Err(IdxError::Missing {
        what: format!("{prefix} {kind}"),
        dir: dir.to_path_buf(),
    })
}

/// Loads the 60000-image training files (`prefix = "train"`) or the test
/// files (`prefix = "t10k"`) from a directory.
pub fn load_mnist_dir(dir: &Path, prefix: &str) -> Result<MnistStore, IdxError> {
    load_idx(
        &find_file(dir, prefix, "images", 3)?,
        &find_file(dir, prefix, "labels", 1)?,
    )
}

/// Whether a directory holds the training files.
pub fn has_mnist(dir: &Path) -> bool {
    find_file(dir, "train", "images", 3).is_ok() && find_file(dir, "train", "labels", 1).is_ok()
}
