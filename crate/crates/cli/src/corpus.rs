//! Raw-byte corpora, their sidecar metadata and synthetic generators.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sparse_transformer::rng::{stream_rng, Stream};

/// Shape of image data stored as raw bytes, read from `<corpus>.meta.toml`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageMeta {
    /// Coordinate extents for data-mode positional embeddings.
    pub fn dims(&self) -> Vec<usize> {
        vec![self.height, self.width, self.channels]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub bytes: Vec<u8>,
    pub meta: Option<ImageMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.toml");
    PathBuf::from(s)
}

/// Reads `path` verbatim, together with its sidecar metadata if present.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if bytes.is_empty() {
        bail!("corpus too small: {} is empty", path.display());
    }
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = std::fs::read_to_string(&side)?;
        Some(toml::from_str(&text).with_context(|| format!("parsing {}", side.display()))?)
    } else {
        None
    };
    Ok(Corpus { bytes, meta })
}

/// `len` bytes repeating one `period`-byte motif of distinct random bytes.
pub fn periodic_corpus(len: usize, period: usize, seed: u64) -> Result<Vec<u8>> {
    if period == 0 || period > 256 {
        bail!("period {period} must lie in 1..=256");
    }
    let mut motif: Vec<u8> = (0..=255).collect();
    motif.shuffle(&mut stream_rng(seed, Stream::Batch));
    motif.truncate(period);
    Ok((0..len).map(|k| motif[k % period]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_load_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        std::fs::write(&path, [0x00, 0xFF, 0x41]).unwrap();
        let c = load_corpus(&path).unwrap();
        assert_eq!(c.bytes, vec![0, 255, 65]);
        assert!(c.meta.is_none());
        let data: Vec<u8> = (0..=255).cycle().take(1000).collect();
        std::fs::write(&path, &data).unwrap();
        assert_eq!(load_corpus(&path).unwrap().bytes, data);
    }

    #[test]
    fn empty_and_missing_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, []).unwrap();
        let err = load_corpus(&path).unwrap_err().to_string();
        assert!(err.contains("corpus too small"), "{err}");
        assert!(load_corpus(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn sidecar_supplies_image_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        std::fs::write(&path, vec![7u8; 192]).unwrap();
        std::fs::write(sidecar_path(&path), "height = 8\nwidth = 8\nchannels = 3\n").unwrap();
        let meta = load_corpus(&path).unwrap().meta.unwrap();
        assert_eq!(meta.dims(), vec![8, 8, 3]);
    }

    #[test]
    fn periodic_corpus_repeats_distinct_motif() {
        let c = periodic_corpus(1000, 64, 3).unwrap();
        assert!((64..1000).all(|k| c[k] == c[k - 64]));
        let mut motif = c[..64].to_vec();
        motif.sort();
        motif.dedup();
        assert_eq!(motif.len(), 64);
        assert_eq!(c, periodic_corpus(1000, 64, 3).unwrap());
        assert!(periodic_corpus(10, 0, 0).is_err());
    }
}
