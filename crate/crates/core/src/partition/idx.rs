use super::LabeledExample;
use crate::imaging::Image;
use byteorder::{BigEndian, ByteOrder};
use flate2::read::GzDecoder;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path} is truncated: header promises {expected} bytes, file holds {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} outside 0..=9")]
    BadLabel { index: usize, label: u8 },
}

/// Reads a file, transparently gunzipping when it starts with the gzip magic.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, IdxError> {
    let io = |source| IdxError::Io { path: path.to_path_buf(), source };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 + 4 * dims;
    if bytes.len() < 4 {
        return Err(IdxError::Truncated { path: path.into(), expected: need, actual: bytes.len() });
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(IdxError::BadMagic { path: path.into(), expected: magic, found });
    }
    if bytes.len() < need {
        return Err(IdxError::Truncated { path: path.into(), expected: need, actual: bytes.len() });
    }
    Ok((0..dims).map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize).collect())
}

/// Loads the first `limit` examples from an IDX image/label file pair
/// (optionally gzipped), scaling pixels to `[0, 1]`.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    limit: usize,
) -> Result<Vec<LabeledExample>, IdxError> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_maybe_gz(ip)?;
    let labels = read_maybe_gz(lp)?;
    let idims = header(ip, &images, IMAGE_MAGIC, 3)?;
    let ldims = header(lp, &labels, LABEL_MAGIC, 1)?;
    let (n, rows, cols) = (idims[0], idims[1], idims[2]);
    let image_bytes = 16 + n * rows * cols;
    if images.len() < image_bytes {
        return Err(IdxError::Truncated { path: ip.into(), expected: image_bytes, actual: images.len() });
    }
    if labels.len() < 8 + ldims[0] {
        return Err(IdxError::Truncated { path: lp.into(), expected: 8 + ldims[0], actual: labels.len() });
    }
    if n != ldims[0] {
        return Err(IdxError::CountMismatch { images: n, labels: ldims[0] });
    }
    let take = limit.min(n);
    let px = rows * cols;
    let mut out = Vec::with_capacity(take);
    for i in 0..take {
        let label = labels[8 + i];
        if label > 9 {
            return Err(IdxError::BadLabel { index: i, label });
        }
        let pixels = images[16 + i * px..16 + (i + 1) * px].iter().map(|b| *b as f64 / 255.0).collect();
        let image = Image::new(rows, cols, pixels).map_err(|_| IdxError::Truncated {
            path: ip.into(),
            expected: image_bytes,
            actual: images.len(),
        })?;
        out.push(LabeledExample { image, label: label as usize });
    }
    Ok(out)
}

/// Encodes examples as an (images, labels) IDX byte pair.
pub fn encode_idx(examples: &[LabeledExample]) -> (Vec<u8>, Vec<u8>) {
    let (rows, cols) = examples.first().map(|e| (e.image.height(), e.image.width())).unwrap_or((28, 28));
    let mut images = Vec::with_capacity(16 + examples.len() * rows * cols);
    let mut word = [0u8; 4];
    for v in [IMAGE_MAGIC, examples.len() as u32, rows as u32, cols as u32] {
        BigEndian::write_u32(&mut word, v);
        images.extend_from_slice(&word);
    }
    let mut labels = Vec::with_capacity(8 + examples.len());
    for v in [LABEL_MAGIC, examples.len() as u32] {
        BigEndian::write_u32(&mut word, v);
        labels.extend_from_slice(&word);
    }
    for e in examples {
        images.extend(e.image.pixels().iter().map(|p| (p * 255.0).round() as u8));
        labels.push(e.label as u8);
    }
    (images, labels)
}
