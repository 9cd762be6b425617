//! Dataset loading and NULL-channel encoding.
//!
//! IDX files are parsed byte-exactly: big-endian magic `00 00 08 D` with
//! D in {1, 3}, D big-endian u32 dimension sizes, then a row-major uint8
//! payload. Pixels are normalized as byte/255 with no mean-centering so the
//! (v, 1-v) encoding invariant stays exact.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::{AblationPattern, Geometry, Shape};
use crate::error::{Error, Result};

/// One image: `channels` planes of `height * width` intensities in [0, 1],
/// stored plane-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "pixel buffer length {} does not match {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Argument("pixel intensity outside [0, 1]".into()));
        }
        Ok(Image { height, width, channels, pixels })
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.height, self.width)
    }

    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.pixels[(ch * self.height + y) * self.width + x]
    }
}

/// A NULL-encoded image with doubled channels: retained pixels carry
/// (v, 1-v) per original channel, ablated pixels carry (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    pub height: usize,
    pub width: usize,
    /// Twice the source channel count.
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl EncodedImage {
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.pixels[(ch * self.height + y) * self.width + x]
    }
}

/// Images plus labels; lengths always match and every label is below
/// `num_classes`.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl RawDataset {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Argument(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(RawDataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic seeded shuffle into train / validation / test parts.
    pub fn split(
        &self,
        seed: u64,
        validation_count: usize,
        test_count: usize,
    ) -> Result<(RawDataset, RawDataset, RawDataset)> {
        let n = self.len();
        if validation_count + test_count > n {
            return Err(Error::Argument(format!(
                "requested {validation_count} validation + {test_count} test from {n} samples"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let take = |idx: &[usize]| -> RawDataset {
            RawDataset {
                images: idx.iter().map(|&i| self.images[i].clone()).collect(),
                labels: idx.iter().map(|&i| self.labels[i]).collect(),
                num_classes: self.num_classes,
            }
        };
        let (test, rest) = order.split_at(test_count);
        let (val, train) = rest.split_at(validation_count);
        Ok((take(train), take(val), take(test)))
    }
}

/// Contents of one IDX file: either a label vector or an image stack.
#[derive(Debug, Clone)]
pub enum IdxContent {
    Labels(Vec<u8>),
    Images(Vec<Image>),
}

const IDX_DTYPE_U8: u8 = 0x08;

fn read_u32(bytes: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
}

/// Parse one IDX file. Order-preserving and lossless: `to_idx_bytes`
/// reproduces the input byte-for-byte.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxContent> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!(
            "IDX header needs 4 bytes, got {}",
            bytes.len()
        )));
    }
    let magic = &bytes[0..4];
    if magic[0] != 0 || magic[1] != 0 || magic[2] != IDX_DTYPE_U8 {
        return Err(Error::Format(format!(
            "bad IDX magic {:02x} {:02x} {:02x} {:02x}",
            magic[0], magic[1], magic[2], magic[3]
        )));
    }
    let ndim = magic[3] as usize;
    if ndim != 1 && ndim != 3 {
        return Err(Error::Format(format!(
            "bad IDX magic {:02x} {:02x} {:02x} {:02x} (expected 1 or 3 dimensions)",
            magic[0], magic[1], magic[2], magic[3]
        )));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "IDX header needs {header} bytes, got {}",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = (0..ndim).map(|d| read_u32(bytes, 4 + 4 * d) as usize).collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("IDX dimension product overflows".into()))?;
    let expected = header + payload;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "IDX payload length mismatch: expected {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let body = &bytes[header..];
    if ndim == 1 {
        return Ok(IdxContent::Labels(body.to_vec()));
    }
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let images = (0..count)
        .map(|i| {
            let px = body[i * rows * cols..(i + 1) * rows * cols]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Image::new(rows, cols, 1, px)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IdxContent::Images(images))
}

/// Serialize back to IDX bytes (round-trip inverse of [`parse_idx`]).
pub fn to_idx_bytes(content: &IdxContent) -> Result<Vec<u8>> {
    match content {
        IdxContent::Labels(labels) => {
            let mut out = vec![0, 0, IDX_DTYPE_U8, 1];
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
            Ok(out)
        }
        IdxContent::Images(images) => {
            let (rows, cols) = images
                .first()
                .map(|im| (im.height, im.width))
                .unwrap_or((0, 0));
            let mut out = vec![0, 0, IDX_DTYPE_U8, 3];
            out.extend_from_slice(&(images.len() as u32).to_be_bytes());
            out.extend_from_slice(&(rows as u32).to_be_bytes());
            out.extend_from_slice(&(cols as u32).to_be_bytes());
            for im in images {
                if im.height != rows || im.width != cols || im.channels != 1 {
                    return Err(Error::Argument("mixed image shapes in IDX stack".into()));
                }
                out.extend(im.pixels.iter().map(|&v| (v * 255.0).round() as u8));
            }
            Ok(out)
        }
    }
}

/// Load an image/label IDX pair into a dataset.
pub fn load_idx_pair(image_bytes: &[u8], label_bytes: &[u8], num_classes: usize) -> Result<RawDataset> {
    let images = match parse_idx(image_bytes)? {
        IdxContent::Images(v) => v,
        IdxContent::Labels(_) => {
            return Err(Error::Format("expected an image file, found labels".into()))
        }
    };
    let labels = match parse_idx(label_bytes)? {
        IdxContent::Labels(v) => v,
        IdxContent::Images(_) => {
            return Err(Error::Format("expected a label file, found images".into()))
        }
    };
    RawDataset::new(images, labels, num_classes)
}

/// Parse the CIFAR-10 binary format: records of 1 label byte followed by
/// 3072 pixel bytes (3 planes of 32x32).
pub fn parse_cifar10(bytes: &[u8]) -> Result<RawDataset> {
    const RECORD: usize = 1 + 3 * 32 * 32;
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 payload length {} is not a multiple of {RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(RECORD) {
        labels.push(rec[0]);
        let px = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(Image::new(32, 32, 3, px)?);
    }
    RawDataset::new(images, labels, 10)
}

/// Apply one ablation pattern: retained pixels become (v, 1-v) per channel,
/// ablated pixels become (0, 0).
pub fn null_encode(image: &Image, geometry: &Geometry, pattern: &AblationPattern) -> Result<EncodedImage> {
    if geometry.shape != image.shape() {
        return Err(Error::Geometry(format!(
            "pattern shape {}x{} does not match image {}x{}",
            geometry.shape.height, geometry.shape.width, image.height, image.width
        )));
    }
    let mask = geometry.retained_mask(pattern)?;
    Ok(encode_with_mask(image, &mask))
}

/// NULL-encode against a precomputed retained mask (row-major `h*w` bools).
pub fn encode_with_mask(image: &Image, mask: &[bool]) -> EncodedImage {
    let (h, w, c) = (image.height, image.width, image.channels);
    debug_assert_eq!(mask.len(), h * w);
    let mut pixels = vec![0.0; h * w * 2 * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if mask[y * w + x] {
                    let v = image.get(ch, y, x);
                    pixels[((2 * ch) * h + y) * w + x] = v;
                    pixels[((2 * ch + 1) * h + y) * w + x] = 1.0 - v;
                }
            }
        }
    }
    EncodedImage { height: h, width: w, channels: 2 * c, pixels }
}
