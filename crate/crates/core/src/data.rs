//! MNIST ingestion, pixel-depth discretization and deterministic batching.
//!
//! Pixels are discretized to `2^δ` levels by snapping each intensity to the
//! center of its bin:
//!
//! ```text
//! w   = 256 / 2^δ
//! I_δ = floor(I / w) · w + w / 2
//! ```
//!
//! The network sees `I_δ / 256`, so the normalized domain is `[0, 1]` and the
//! quantizer can be applied to already-normalized (possibly adversarially
//! perturbed) values through [`quantize_unit`], which is the same map
//! expressed on `x = I / 256`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

/// Environment variable naming the directory holding the four MNIST IDX files.
pub const DATA_DIR_ENV: &str = "QG_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Labeled 8-bit grayscale images.
#[derive(Debug, Clone)]
pub struct RawDataset {
    images: Vec<u8>,
    labels: Vec<u8>,
    rows: usize,
    cols: usize,
    split: Split,
}

impl RawDataset {
    pub fn new(images: Vec<u8>, labels: Vec<u8>, rows: usize, cols: usize, split: Split) -> Result<Self> {
        let pixels = rows * cols;
        if pixels == 0 || images.len() != labels.len() * pixels {
            return Err(Error::InvalidArgument(format!(
                "{} image bytes do not hold {} images of {rows}x{cols}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, 9]")));
        }
        Ok(RawDataset {
            images,
            labels,
            rows,
            cols,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// First `n` items (or all of them if fewer).
    pub fn take(&self, n: usize) -> RawDataset {
        let n = n.min(self.len());
        RawDataset {
            images: self.images[..n * self.pixels()].to_vec(),
            labels: self.labels[..n].to_vec(),
            rows: self.rows,
            cols: self.cols,
            split: self.split,
        }
    }

    /// Normalized raw pixels `I / 256` for the given items, one row each.
    pub fn normalized(&self, indices: &[usize]) -> Tensor {
        let p = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| v as f32 / 256.0));
        }
        Tensor::new([indices.len(), p], data).expect("rows are image-sized")
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn idx_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses an IDX3 image file into (pixels, count, rows, cols).
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(Vec<u8>, usize, usize, usize)> {
    if bytes.len() < 16 {
        return Err(idx_error(
            path,
            format!("truncated header: expected 16 bytes, found {}", bytes.len()),
        ));
    }
    let magic = read_u32_be(bytes, 0);
    if magic != IMAGE_MAGIC {
        return Err(idx_error(
            path,
            format!("bad magic 0x{magic:08x}, expected image magic 0x{IMAGE_MAGIC:08x}"),
        ));
    }
    let n = read_u32_be(bytes, 4) as usize;
    let rows = read_u32_be(bytes, 8) as usize;
    let cols = read_u32_be(bytes, 12) as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(idx_error(
            path,
            format!(
                "truncated or oversized file: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    Ok((bytes[16..].to_vec(), n, rows, cols))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(idx_error(
            path,
            format!("truncated header: expected 8 bytes, found {}", bytes.len()),
        ));
    }
    let magic = read_u32_be(bytes, 0);
    if magic != LABEL_MAGIC {
        return Err(idx_error(
            path,
            format!("bad magic 0x{magic:08x}, expected label magic 0x{LABEL_MAGIC:08x}"),
        ));
    }
    let n = read_u32_be(bytes, 4) as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(idx_error(
            path,
            format!(
                "truncated or oversized file: expected {expected} bytes, found {}",
                bytes.len()
            ),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an image/label IDX pair.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<RawDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let (images, n, rows, cols) = parse_idx_images(images_path, &img_bytes)?;
    let labels = parse_idx_labels(labels_path, &lbl_bytes)?;
    if labels.len() != n {
        return Err(idx_error(
            labels_path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    RawDataset::new(images, labels, rows, cols, split).map_err(|e| idx_error(images_path, e.to_string()))
}

/// Loads one MNIST split from `dir` using the standard uncompressed file names.
pub fn load_mnist(dir: &Path, split: Split) -> Result<RawDataset> {
    let stem = split.file_stem();
    load_idx(
        &dir.join(format!("{stem}-images-idx3-ubyte")),
        &dir.join(format!("{stem}-labels-idx1-ubyte")),
        split,
    )
}

/// `$QG_DATA_DIR`, falling back to `data/mnist` under the workspace root.
pub fn default_data_dir() -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Input pixel depth δ, restricted to the evaluated depths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct InputBits(u8);

impl InputBits {
    pub const SUPPORTED: [u8; 4] = [2, 3, 4, 8];

    pub fn new(bits: u8) -> Result<Self> {
        if Self::SUPPORTED.contains(&bits) {
            Ok(InputBits(bits))
        } else {
            Err(Error::InvalidArgument(format!(
                "input_bits must be one of {:?}, got {bits}",
                Self::SUPPORTED
            )))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn levels(self) -> u32 {
        1 << self.0
    }

    /// Bin width in raw intensity units, `256 / 2^δ`.
    pub fn bin_width(self) -> f32 {
        256.0 / self.levels() as f32
    }
}

impl TryFrom<u8> for InputBits {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        InputBits::new(v)
    }
}

impl From<InputBits> for u8 {
    fn from(b: InputBits) -> u8 {
        b.0
    }
}

impl fmt::Display for InputBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}b", self.0)
    }
}

/// Snaps one raw intensity in `[0, 255]` to its bin center.
#[inline]
pub fn discretize_intensity(i: f32, bits: InputBits) -> f32 {
    let w = bits.bin_width();
    (i / w).floor() * w + 0.5 * w
}

/// Discretizes raw intensities (any shape) to bin centers at depth `bits`.
pub fn discretize_pixels(x: &Tensor, bits: InputBits) -> Result<Tensor> {
    if let Some(bad) = x.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::Domain {
            op: "discretize_pixels",
            detail: format!("intensity {bad} outside [0, 255]"),
        });
    }
    Ok(x.map(|v| discretize_intensity(v, bits)))
}

/// The discretizer on normalized pixels `x = I / 256`, for `x ∈ [0, 1]`.
///
/// Agrees exactly with `discretize_intensity(256·x) / 256` on `[0, 255/256]`;
/// the single point `x = 1` (reachable after clipping a perturbation) lands in
/// the top bin.
#[inline]
pub fn quantize_unit(x: f32, bits: InputBits) -> f32 {
    let levels = bits.levels() as f32;
    let bin = (x * levels).floor().clamp(0.0, levels - 1.0);
    (bin + 0.5) / levels
}

/// Input pipeline settings shared by training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input_bits: InputBits,
    pub shuffle_seed: u64,
    pub batch_size: usize,
}

impl PipelineConfig {
    pub fn new(input_bits: InputBits, shuffle_seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(PipelineConfig {
            input_bits,
            shuffle_seed,
            batch_size,
        })
    }

    /// Applies the model's input discretization to normalized pixels.
    pub fn discretize(&self, x: &Tensor) -> Tensor {
        let bits = self.input_bits;
        x.map(|v| quantize_unit(v, bits))
    }

    pub fn discretize_in_place(&self, x: &mut Tensor) {
        let bits = self.input_bits;
        x.data_mut().iter_mut().for_each(|v| *v = quantize_unit(*v, bits));
    }
}

/// One minibatch: dataset indices, normalized raw pixels, and the
/// discretized view the model consumes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub raw: Tensor,
    pub x: Tensor,
    pub labels: Vec<u8>,
}

/// Iterator over minibatches in a fixed order.
pub struct Batches<'a> {
    ds: &'a RawDataset,
    cfg: PipelineConfig,
    order: Vec<usize>,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let raw = self.ds.normalized(&indices);
        let x = self.cfg.discretize(&raw);
        let labels = self.ds.labels_at(&indices);
        Some(Batch {
            indices,
            raw,
            x,
            labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.order.len() - self.pos;
        let n = left.div_ceil(self.cfg.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Shuffled batches for `epoch`; the order is a pure function of
/// `(cfg.shuffle_seed, epoch)`. The final short batch is kept.
pub fn batches<'a>(ds: &'a RawDataset, cfg: &PipelineConfig, epoch: usize) -> Result<Batches<'a>> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    Rng::with_stream(cfg.shuffle_seed, epoch as u64).shuffle(&mut order);
    Ok(Batches {
        ds,
        cfg: *cfg,
        order,
        pos: 0,
    })
}

/// Batches in dataset order, for evaluation.
pub fn sequential_batches<'a>(ds: &'a RawDataset, cfg: &PipelineConfig) -> Result<Batches<'a>> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty dataset".into()));
    }
    Ok(Batches {
        ds,
        cfg: *cfg,
        order: (0..ds.len()).collect(),
        pos: 0,
    })
}
