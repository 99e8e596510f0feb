//! MNIST IDX ingestion.
//!
//! IDX files are big-endian: a 4-byte magic (`0x00000803` for images,
//! `0x00000801` for labels), one 4-byte count per dimension, then raw bytes.
//! Pixels are scaled to `[0, 1]` on load.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
}

impl Dataset {
    pub fn new(images: Vec<f64>, labels: Vec<u8>, rows: usize, cols: usize) -> Result<Self> {
        if images.len() != labels.len() * rows * cols {
            return Err(Error::Consistency(format!(
                "{} pixels for {} labels of {rows}×{cols} images",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.images
    }

    /// Keeps only the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let d = self.image_dim();
        let mut images = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }
}

/// Default file names of the official MNIST distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn paths(self, dir: &Path) -> (PathBuf, PathBuf) {
        let stem = match self {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        (
            dir.join(format!("{stem}-images-idx3-ubyte")),
            dir.join(format!("{stem}-labels-idx1-ubyte")),
        )
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("file ends inside the header at byte {offset}"),
        })
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} pixel bytes for {n} images of {rows}×{cols}", body.len()),
        });
    }
    Ok((body.iter().map(|&b| b as f64 / 255.0).collect(), n, rows, cols))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} label bytes for {n} labels", body.len()),
        });
    }
    Ok(body.to_vec())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (images, n, rows, cols) = parse_images(&fs::read(ip)?, ip)?;
    let labels = parse_labels(&fs::read(lp)?, lp)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} holds {n} images but {} holds {} labels",
            ip.display(),
            lp.display(),
            labels.len()
        )));
    }
    Dataset::new(images, labels, rows, cols)
}

pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (i, l) = split.paths(dir.as_ref());
    load_idx(i, l)
}

/// Keeps images whose label is in `digits`, preserving order.
pub fn filter_digits(ds: &Dataset, digits: &BTreeSet<u8>) -> Result<Dataset> {
    if digits.is_empty() || digits.iter().any(|&d| d > 9) {
        return Err(Error::InvalidInput(format!(
            "digit set must be a nonempty subset of 0..=9, got {digits:?}"
        )));
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| digits.contains(&ds.labels[i])).collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds.subset(&keep))
}

/// Encodes images (pixels in `[0, 1]`) and labels as an IDX pair.
pub fn encode_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + ds.images.len());
    images.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    images.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    images.extend_from_slice(&(ds.rows as u32).to_be_bytes());
    images.extend_from_slice(&(ds.cols as u32).to_be_bytes());
    images.extend(ds.images.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend_from_slice(&ds.labels);
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&0x803u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 255, 0, 17, 34, 68, 136]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x801u32.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 2]);
        (img, lab)
    }

    fn write_pair(img: &[u8], lab: &[u8]) -> (tempfile::TempDir, PathBuf, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (dir, ip, lp)
    }

    #[test]
    fn constructed_pair_round_trips() {
        let (img, lab) = fixture();
        let (_d, ip, lp) = write_pair(&img, &lab);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image_shape(), (2, 3));
        assert_eq!(ds.labels(), &[7, 2]);
        assert_eq!(ds.image(0), &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(ds.image(1)[0], 1.0);
        assert_eq!(ds.image(1)[2], 17.0 / 255.0);
        let (img2, lab2) = encode_idx(&ds);
        assert_eq!(img2, img);
        assert_eq!(lab2, lab);
    }

    #[test]
    fn wrong_label_magic() {
        let (img, mut lab) = fixture();
        lab[..4].copy_from_slice(&2051u32.to_be_bytes());
        let (_d, ip, lp) = write_pair(&img, &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch() {
        let (img, _) = fixture();
        let mut lab = Vec::new();
        lab.extend_from_slice(&0x801u32.to_be_bytes());
        lab.extend_from_slice(&3u32.to_be_bytes());
        lab.extend_from_slice(&[1, 2, 3]);
        let (_d, ip, lp) = write_pair(&img, &lab);
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn filtering() {
        let labels = vec![2, 4, 4, 2, 4, 2, 4, 4];
        let images = (0..8).map(|i| i as f64 / 10.0).collect();
        let ds = Dataset::new(images, labels, 1, 1).unwrap();
        let all: BTreeSet<u8> = (0..10).collect();
        assert_eq!(filter_digits(&ds, &all).unwrap(), ds);
        let twos = filter_digits(&ds, &BTreeSet::from([2])).unwrap();
        assert_eq!(twos.len(), 3);
        assert_eq!(twos.pixels(), &[0.0, 0.3, 0.5]);
        assert!(matches!(
            filter_digits(&ds, &BTreeSet::from([7])),
            Err(Error::EmptyDataset)
        ));
    }
}
