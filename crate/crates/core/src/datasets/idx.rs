//! IDX container used by the MNIST family of datasets.
//!
//! Layout: a big-endian magic word `0x0000_08NN` where the low byte is the
//! number of dimensions, one big-endian `u32` per dimension, then the
//! unsigned-byte payload. Gzip-compressed files (leading `1f 8b`) are
//! decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Canonical SHA-256 digests of the uncompressed MNIST files.
pub const MNIST_SHA256: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// One decoded IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxArray {
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<u8>,
    },
    Labels(Vec<u8>),
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: bytes.len(),
            reason: format!("header truncated, expected 4 bytes at offset {offset}"),
        })
}

fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| Error::Format {
            offset: 0,
            reason: format!("gzip stream: {e}"),
        })?;
        Ok(out.into())
    } else {
        Ok(bytes.into())
    }
}

/// Decode an image (`0x803`) or label (`0x801`) IDX file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let bytes = maybe_gunzip(bytes)?;
    let bytes = bytes.as_ref();
    let magic = read_u32(bytes, 0)?;
    match magic {
        IMAGES_MAGIC => {
            let count = read_u32(bytes, 4)? as usize;
            let rows = read_u32(bytes, 8)? as usize;
            let cols = read_u32(bytes, 12)? as usize;
            let per = rows * cols;
            let need = count * per;
            let payload = &bytes[16..];
            if payload.len() < need {
                // offset of the first image that cannot be read in full
                let full = payload.len() / per.max(1);
                return Err(Error::Format {
                    offset: 16 + full * per,
                    reason: format!(
                        "image payload truncated: header declares {count} images of {rows}x{cols}, only {} bytes present",
                        payload.len()
                    ),
                });
            }
            Ok(IdxArray::Images {
                count,
                rows,
                cols,
                pixels: payload[..need].to_vec(),
            })
        }
        LABELS_MAGIC => {
            let count = read_u32(bytes, 4)? as usize;
            let payload = &bytes[8..];
            if payload.len() < count {
                return Err(Error::Format {
                    offset: 8 + payload.len(),
                    reason: format!("label payload truncated: header declares {count} labels"),
                });
            }
            Ok(IdxArray::Labels(payload[..count].to_vec()))
        }
        other => Err(Error::Format {
            offset: 0,
            reason: format!("bad magic number {other:#010x}, expected 0x00000803 or 0x00000801"),
        }),
    }
}

/// Encode back into uncompressed IDX bytes.
pub fn write_idx(array: &IdxArray) -> Vec<u8> {
    match array {
        IdxArray::Images {
            count,
            rows,
            cols,
            pixels,
        } => {
            let mut out = Vec::with_capacity(16 + pixels.len());
            for v in [IMAGES_MAGIC, *count as u32, *rows as u32, *cols as u32] {
                out.extend_from_slice(&v.to_be_bytes());
            }
            out.extend_from_slice(pixels);
            out
        }
        IdxArray::Labels(labels) => {
            let mut out = Vec::with_capacity(8 + labels.len());
            out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
            out
        }
    }
}

/// Images and labels of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImageSet {
    pub rows: usize,
    pub cols: usize,
    /// `len * rows * cols` intensities, image-major.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

impl RawImageSet {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if pixels.len() != labels.len() * rows * cols {
            return Err(Error::param(format!(
                "{} labels need {} pixels, got {}",
                labels.len(),
                labels.len() * rows * cols,
                pixels.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn from_idx(images: IdxArray, labels: IdxArray) -> Result<Self> {
        match (images, labels) {
            (
                IdxArray::Images {
                    count,
                    rows,
                    cols,
                    pixels,
                },
                IdxArray::Labels(labels),
            ) => {
                if count != labels.len() {
                    return Err(Error::param(format!(
                        "image count {count} does not match label count {}",
                        labels.len()
                    )));
                }
                Self::new(rows, cols, pixels, labels)
            }
            _ => Err(Error::param("expected an image array and a label array")),
        }
    }

    /// Load `<prefix>-images-idx3-ubyte[.gz]` and the matching label file.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let images = find_file(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?;
        let labels = find_file(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?;
        Self::from_idx(parse_idx(&fs::read(images)?)?, parse_idx(&fs::read(labels)?)?)
    }

    /// Load a lone image file; every label is set to zero.
    pub fn load_images(path: &Path) -> Result<Self> {
        match parse_idx(&fs::read(path)?)? {
            IdxArray::Images {
                count,
                rows,
                cols,
                pixels,
            } => Self::new(rows, cols, pixels, vec![0; count]),
            IdxArray::Labels(_) => Err(Error::Format {
                offset: 0,
                reason: format!("{} holds labels, expected images", path.display()),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.rows * self.cols;
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.rows * self.cols;
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Self {
            rows: self.rows,
            cols: self.cols,
            pixels,
            labels,
        }
    }

    pub fn to_idx(&self) -> (IdxArray, IdxArray) {
        (
            IdxArray::Images {
                count: self.len(),
                rows: self.rows,
                cols: self.cols,
                pixels: self.pixels.clone(),
            },
            IdxArray::Labels(self.labels.clone()),
        )
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Missing {
        dir: dir.to_path_buf(),
        files: vec![stem.to_string(), format!("{stem}.gz")],
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Check the uncompressed MNIST files in `dir` against their canonical digests.
/// Returns the names of files whose digest differs.
pub fn verify_mnist_checksums(dir: &Path) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    for (name, digest) in MNIST_SHA256 {
        let bytes = fs::read(find_file(dir, name)?)?;
        let raw = maybe_gunzip(&bytes)?;
        if sha256_hex(&raw) != digest {
            bad.push(name.to_string());
        }
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn minimal_image_file() {
        let mut b = header(2051, &[1, 1, 1]);
        b.push(0x7f);
        assert_eq!(
            parse_idx(&b).unwrap(),
            IdxArray::Images {
                count: 1,
                rows: 1,
                cols: 1,
                pixels: vec![127]
            }
        );
    }

    #[test]
    fn label_file() {
        let mut b = header(2049, &[2]);
        b.extend_from_slice(&[3, 7]);
        assert_eq!(parse_idx(&b).unwrap(), IdxArray::Labels(vec![3, 7]));
    }

    #[test]
    fn truncated_images_report_offset() {
        let mut b = header(2051, &[2, 28, 28]);
        b.extend(std::iter::repeat(0u8).take(784));
        match parse_idx(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16 + 784),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_short_header() {
        assert!(matches!(
            parse_idx(&header(0x0803_0000, &[1])),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(Error::Format { .. })));
        assert!(matches!(parse_idx(&header(2049, &[5])), Err(Error::Format { .. })));
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let mut b = header(2049, &[3]);
        b.extend_from_slice(&[1, 2, 9]);
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&b).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(gz[..2], [0x1f, 0x8b]);
        assert_eq!(parse_idx(&gz).unwrap(), IdxArray::Labels(vec![1, 2, 9]));
    }

    #[test]
    fn mismatched_counts_rejected() {
        let imgs = IdxArray::Images {
            count: 2,
            rows: 1,
            cols: 1,
            pixels: vec![1, 2],
        };
        assert!(RawImageSet::from_idx(imgs, IdxArray::Labels(vec![1])).is_err());
    }

    #[test]
    fn missing_directory_lists_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        match RawImageSet::load(dir.path(), Split::Train) {
            Err(Error::Missing { files, .. }) => assert!(files[0].contains("train-images")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn raw_set_roundtrips_bytewise(
            rows in 1usize..5, cols in 1usize..5,
            seed_pixels in proptest::collection::vec(any::<u8>(), 0..200),
        ) {
            let per = rows * cols;
            let n = seed_pixels.len() / per;
            let pixels = seed_pixels[..n * per].to_vec();
            let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
            let set = RawImageSet::new(rows, cols, pixels, labels).unwrap();
            let (ib, lb) = set.to_idx();
            let (ibytes, lbytes) = (write_idx(&ib), write_idx(&lb));
            let back = RawImageSet::from_idx(parse_idx(&ibytes).unwrap(), parse_idx(&lbytes).unwrap()).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(write_idx(&back.to_idx().0), ibytes);
        }
    }
}
