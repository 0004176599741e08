//! IDX container parsing (the MNIST/EMNIST file format).
//!
//! Files may be raw or gzip-compressed; compression is detected from the
//! first two bytes, not the file name.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Unnormalized images and labels as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSplit {
    /// `count * rows * cols` pixel bytes, row-major per image.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl RawSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// First `n` samples (or all, if fewer).
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * self.rows * self.cols);
        self
    }

    /// Transposes every image in place (EMNIST stores images column-major).
    pub fn transpose_images(&mut self) {
        let (r, c) = (self.rows, self.cols);
        for img in self.pixels.chunks_exact_mut(r * c) {
            let src = img.to_vec();
            for y in 0..r {
                for x in 0..c {
                    img[x * r + y] = src[y * c + x];
                }
            }
        }
        (self.rows, self.cols) = (c, r);
    }
}

/// Reads a whole file, inflating it if it is gzip-compressed.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, offset, "truncated header"))
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Parses an image file body: returns `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(format_err(
            path,
            16 + body.len(),
            format!(
                "truncated: header declares {count} images of {rows}x{cols}, found {} pixel bytes",
                body.len()
            ),
        ));
    }
    if body.len() > need {
        return Err(format_err(path, 16 + need, "trailing bytes after last image"));
    }
    Ok((count, rows, cols, body.to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(format_err(
            path,
            8 + body.len(),
            format!("truncated: header declares {count} labels, found {}", body.len()),
        ));
    }
    if body.len() > count {
        return Err(format_err(path, 8 + count, "trailing bytes after last label"));
    }
    Ok(body.to_vec())
}

/// Loads a matching pair of image and label files.
pub fn load_idx(images: &Path, labels: &Path) -> Result<RawSplit> {
    let (count, rows, cols, pixels) = parse_images(&read_maybe_gz(images)?, images)?;
    let label_bytes = read_maybe_gz(labels)?;
    let labels_vec = parse_labels(&label_bytes, labels)?;
    if labels_vec.len() != count {
        return Err(format_err(
            labels,
            4,
            format!("{} labels but {count} images in {}", labels_vec.len(), images.display()),
        ));
    }
    Ok(RawSplit {
        pixels,
        labels: labels_vec,
        rows,
        cols,
    })
}

pub fn encode_images(split: &RawSplit) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + split.pixels.len());
    for v in [IMAGES_MAGIC, split.len() as u32, split.rows as u32, split.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&split.pixels);
    out
}

pub fn encode_labels(split: &RawSplit) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + split.len());
    for v in [LABELS_MAGIC, split.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&split.labels);
    out
}

/// Writes `split` as uncompressed IDX files.
pub fn write_idx(split: &RawSplit, images: &Path, labels: &Path) -> Result<()> {
    fs::write(images, encode_images(split))?;
    fs::write(labels, encode_labels(split))?;
    Ok(())
}
