//! MNIST IDX ingestion, labeled datasets and seeded train/validation splits.
//!
//! IDX layout (all header words big-endian u32):
//!
//! ```text
//! images: magic 0x00000803 | count | rows | cols | count*rows*cols u8
//! labels: magic 0x00000801 | count | count u8
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
/// Digits 0-9 plus the 18 concept labels 10-27.
pub const NUM_LABELS: usize = 28;
pub const FIRST_CONCEPT_LABEL: u8 = 10;
pub const MAX_LABEL: u8 = 27;

/// Un-normalized 28x28 image as stored in an IDX file.
pub type RawImage = [u8; PIXELS];

/// A 28x28 single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, PartialEq)]
pub struct Image28 {
    pixels: [f32; PIXELS],
}

impl std::fmt::Debug for Image28 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image28(sum={:.3})", self.sum())
    }
}

impl Image28 {
    pub fn zeros() -> Self {
        Self { pixels: [0.0; PIXELS] }
    }

    pub fn filled(value: f32) -> Result<Self> {
        Self::from_pixels(&[value; PIXELS])
    }

    /// Validates length and range; values are copied as-is.
    pub fn from_pixels(pixels: &[f32]) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        let mut out = [0.0; PIXELS];
        out.copy_from_slice(pixels);
        Ok(Self { pixels: out })
    }

    /// Clamps every value into `[0, 1]` (NaN becomes 0).
    pub fn from_pixels_clamped(pixels: &[f32]) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        let mut out = [0.0; PIXELS];
        for (o, &p) in out.iter_mut().zip(pixels) {
            *o = if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) };
        }
        Ok(Self { pixels: out })
    }

    pub fn pixels(&self) -> &[f32; PIXELS] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * SIDE + col]
    }

    pub fn sum(&self) -> f32 {
        self.pixels.iter().sum()
    }

    /// Quantizes back to bytes by rounding `p * 255`.
    pub fn to_raw(&self) -> RawImage {
        let mut raw = [0u8; PIXELS];
        for (r, &p) in raw.iter_mut().zip(&self.pixels) {
            *r = (p * 255.0).round().clamp(0.0, 255.0) as u8;
        }
        raw
    }

    /// Round-trips through 8-bit quantization, the precision of every
    /// persisted image.
    pub fn quantized(&self) -> Self {
        normalize(&self.to_raw())
    }
}

/// Divides every byte by 255.
pub fn normalize(raw: &RawImage) -> Image28 {
    let mut pixels = [0.0f32; PIXELS];
    for (p, &r) in pixels.iter_mut().zip(raw.iter()) {
        *p = r as f32 / 255.0;
    }
    Image28 { pixels }
}

fn read_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    match read_u32(bytes, 0) {
        Some(found) if found == expected => Ok(()),
        Some(found) => Err(Error::BadMagic { expected, found }),
        None => Err(Error::TruncatedPayload {
            expected: 4,
            found: bytes.len(),
        }),
    }
}

/// Parses an IDX3 image file. Pixels are returned un-normalized.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<RawImage>> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let header = |off| {
        read_u32(bytes, off).ok_or(Error::TruncatedPayload {
            expected: 16,
            found: bytes.len(),
        })
    };
    let count = header(4)? as usize;
    let rows = header(8)?;
    let cols = header(12)?;
    if rows as usize != SIDE || cols as usize != SIDE {
        return Err(Error::BadDims { rows, cols });
    }
    let payload = &bytes[16..];
    let expected = count * PIXELS;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(PIXELS)
        .map(|chunk| {
            let mut img = [0u8; PIXELS];
            img.copy_from_slice(chunk);
            img
        })
        .collect())
}

/// Parses an IDX1 label file holding MNIST digit labels (0-9).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    parse_idx_labels_up_to(bytes, 9)
}

/// Parses an IDX1 label file, accepting labels up to `max_label` inclusive.
pub fn parse_idx_labels_up_to(bytes: &[u8], max_label: u8) -> Result<Vec<u8>> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32(bytes, 4).ok_or(Error::TruncatedPayload {
        expected: 8,
        found: bytes.len(),
    })? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::TruncatedPayload {
            expected: count,
            found: payload.len(),
        });
    }
    if let Some((index, &label)) = payload.iter().enumerate().find(|(_, &l)| l > max_label) {
        return Err(Error::LabelOutOfRange { index, label });
    }
    Ok(payload.to_vec())
}

pub fn encode_idx_images(images: &[RawImage]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * PIXELS);
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.len() as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    out.extend_from_slice(&(SIDE as u32).to_be_bytes());
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Original,
    Concept,
}

impl Origin {
    pub fn of_label(label: u8) -> Option<Self> {
        match label {
            0..=9 => Some(Origin::Original),
            10..=MAX_LABEL => Some(Origin::Concept),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    image: Image28,
    label: u8,
    origin: Origin,
}

impl LabeledSample {
    /// The origin is implied by the label range.
    pub fn new(image: Image28, label: u8) -> Result<Self> {
        let origin = Origin::of_label(label).ok_or(Error::LabelOutOfRange { index: 0, label })?;
        Ok(Self {
            image,
            label,
            origin,
        })
    }

    pub fn image(&self) -> &Image28 {
        &self.image
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn is_concept(&self) -> bool {
        self.origin == Origin::Concept
    }
}

/// An ordered collection of labeled samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataSet {
    pub samples: Vec<LabeledSample>,
    /// Seed of the last shuffle applied to `samples`, if any.
    pub seed: Option<u64>,
}

impl DataSet {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        Self {
            samples,
            seed: None,
        }
    }

    /// Builds a dataset from parsed IDX images and labels (up to label 27).
    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self> {
        let images = parse_idx_images(images)?;
        let labels = parse_idx_labels_up_to(labels, MAX_LABEL)?;
        if images.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let samples = images
            .iter()
            .zip(labels)
            .map(|(raw, label)| LabeledSample::new(normalize(raw), label))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(samples))
    }

    /// Encodes as an (images, labels) IDX byte pair.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let raws: Vec<RawImage> = self.samples.iter().map(|s| s.image.to_raw()).collect();
        let labels: Vec<u8> = self.samples.iter().map(|s| s.label).collect();
        (encode_idx_images(&raws), encode_idx_labels(&labels))
    }

    /// Writes `<stem>-images-idx3-ubyte` and `<stem>-labels-idx1-ubyte` into `dir`.
    pub fn write_idx(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let (img, lab) = self.to_idx_bytes();
        let (img_path, lab_path) = idx_paths(dir, stem);
        fs::write(&img_path, img)?;
        fs::write(&lab_path, lab)?;
        Ok((img_path, lab_path))
    }

    pub fn read_idx(dir: &Path, stem: &str) -> Result<Self> {
        let (img_path, lab_path) = idx_paths(dir, stem);
        Self::from_idx_bytes(&fs::read(img_path)?, &fs::read(lab_path)?)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledSample> {
        self.samples.iter()
    }

    pub fn label_counts(&self) -> [usize; NUM_LABELS] {
        let mut counts = [0; NUM_LABELS];
        for s in &self.samples {
            counts[s.label as usize] += 1;
        }
        counts
    }

    /// Samples whose label lies in `lo..=hi`, in order.
    pub fn filter_labels(&self, lo: u8, hi: u8) -> DataSet {
        DataSet {
            samples: self
                .samples
                .iter()
                .filter(|s| (lo..=hi).contains(&s.label))
                .cloned()
                .collect(),
            seed: self.seed,
        }
    }

    pub fn images(&self) -> Vec<&Image28> {
        self.samples.iter().map(|s| &s.image).collect()
    }
}

pub fn idx_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{stem}-images-idx3-ubyte")),
        dir.join(format!("{stem}-labels-idx1-ubyte")),
    )
}

/// Loads the official MNIST training pair from `dir`.
pub fn load_mnist_train(dir: &Path) -> Result<DataSet> {
    let images = parse_idx_images(&fs::read(dir.join("train-images-idx3-ubyte"))?)?;
    let labels = parse_idx_labels(&fs::read(dir.join("train-labels-idx1-ubyte"))?)?;
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    let samples = images
        .iter()
        .zip(labels)
        .map(|(raw, label)| LabeledSample::new(normalize(raw), label))
        .collect::<Result<Vec<_>>>()?;
    Ok(DataSet::new(samples))
}

/// Number of training samples for a split; `floor(fraction * n)`.
///
/// A 1e-9 guard absorbs binary representation error so that e.g.
/// `0.7 * 114_000` yields 79,800 rather than 79,799.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

/// Seeded uniform shuffle, then the first `floor(fraction * n)` samples go to
/// training and the remainder to validation. Both partitions keep the shuffled
/// order and record the seed.
pub fn split_train_val(data: &DataSet, train_fraction: f64, seed: u64) -> Result<(DataSet, DataSet)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} not in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = train_count(data.len(), train_fraction);
    let pick = |idx: &[usize]| DataSet {
        samples: idx.iter().map(|&i| data.samples[i].clone()).collect(),
        seed: Some(seed),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Deterministic seeded subsample of `fraction` of the samples (order kept).
pub fn subsample(data: &DataSet, fraction: f64, seed: u64) -> Result<DataSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subset fraction {fraction} not in (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(data.clone());
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut keep = order[..train_count(data.len(), fraction)].to_vec();
    keep.sort_unstable();
    Ok(DataSet {
        samples: keep.iter().map(|&i| data.samples[i].clone()).collect(),
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    fn labeled(n: usize) -> DataSet {
        let samples = (0..n)
            .map(|i| {
                let mut raw = [0u8; PIXELS];
                raw[0] = (i % 256) as u8;
                raw[1] = (i / 256) as u8;
                LabeledSample::new(normalize(&raw), (i % 28) as u8).unwrap()
            })
            .collect();
        DataSet::new(samples)
    }

    fn key(s: &LabeledSample) -> (u8, u8, u8) {
        let r = s.image.to_raw();
        (r[0], r[1], s.label)
    }

    #[test]
    fn single_black_image() {
        let mut bytes = header(IMAGE_MAGIC, &[1, 28, 28]);
        bytes.extend(std::iter::repeat_n(0, PIXELS));
        let imgs = parse_idx_images(&bytes).unwrap();
        assert_eq!(imgs.len(), 1);
        assert!(imgs[0].iter().all(|&p| p == 0));
    }

    #[test]
    fn truncated_images() {
        let mut bytes = header(IMAGE_MAGIC, &[2, 28, 28]);
        bytes.extend(std::iter::repeat_n(0, PIXELS));
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::TruncatedPayload { expected: 1568, found: 784 })
        ));
    }

    #[test]
    fn bad_magic_and_dims() {
        let bytes = header(LABEL_MAGIC, &[0, 28, 28]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::BadMagic { .. })));
        let bytes = header(IMAGE_MAGIC, &[0, 32, 28]);
        assert!(matches!(
            parse_idx_images(&bytes),
            Err(Error::BadDims { rows: 32, cols: 28 })
        ));
        assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn labels_copy_and_range() {
        let mut bytes = header(LABEL_MAGIC, &[3]);
        bytes.extend([0, 5, 9]);
        assert_eq!(parse_idx_labels(&bytes).unwrap(), vec![0, 5, 9]);
        let mut bytes = header(LABEL_MAGIC, &[1]);
        bytes.push(12);
        assert!(matches!(
            parse_idx_labels(&bytes),
            Err(Error::LabelOutOfRange { index: 0, label: 12 })
        ));
        assert_eq!(parse_idx_labels_up_to(&bytes, MAX_LABEL).unwrap(), vec![12]);
        let mut bytes = header(LABEL_MAGIC, &[4]);
        bytes.push(1);
        assert!(matches!(parse_idx_labels(&bytes), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn normalize_fixed_points() {
        assert_eq!(normalize(&[0; PIXELS]), Image28::zeros());
        assert!(normalize(&[255; PIXELS]).pixels().iter().all(|&p| p == 1.0));
        let mut raw = [0u8; PIXELS];
        raw[3] = 128;
        assert!((normalize(&raw).pixels()[3] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn normalize_quantize_round_trip() {
        let raw: RawImage = std::array::from_fn(|i| (i % 256) as u8);
        assert_eq!(normalize(&raw).to_raw(), raw);
    }

    #[test]
    fn image_range_checked() {
        assert!(Image28::from_pixels(&[1.5; PIXELS]).is_err());
        assert!(Image28::from_pixels(&[0.5; 10]).is_err());
        assert_eq!(Image28::from_pixels_clamped(&[1.5; PIXELS]).unwrap(), Image28::filled(1.0).unwrap());
    }

    #[test]
    fn origin_follows_label() {
        let s = LabeledSample::new(Image28::zeros(), 9).unwrap();
        assert_eq!(s.origin(), Origin::Original);
        let s = LabeledSample::new(Image28::zeros(), 10).unwrap();
        assert_eq!(s.origin(), Origin::Concept);
        assert!(LabeledSample::new(Image28::zeros(), 28).is_err());
    }

    #[test]
    fn split_paper_counts() {
        assert_eq!(train_count(114_000, 0.7), 79_800);
        assert_eq!(114_000 - train_count(114_000, 0.7), 34_200);
        assert_eq!(train_count(60_000, 0.7), 42_000);
    }

    #[test]
    fn split_ten_is_partition() {
        let data = labeled(10);
        let (train, val) = split_train_val(&data, 0.7, 3).unwrap();
        assert_eq!((train.len(), val.len()), (7, 3));
        let t: HashSet<_> = train.iter().map(key).collect();
        let v: HashSet<_> = val.iter().map(key).collect();
        assert!(t.is_disjoint(&v));
        let all: HashSet<_> = data.iter().map(key).collect();
        assert_eq!(t.union(&v).cloned().collect::<HashSet<_>>(), all);
    }

    #[test]
    fn split_deterministic_and_seed_sensitive() {
        let data = labeled(1000);
        let a = split_train_val(&data, 0.7, 11).unwrap();
        let b = split_train_val(&data, 0.7, 11).unwrap();
        assert_eq!(a, b);
        let c = split_train_val(&data, 0.7, 12).unwrap();
        assert_ne!(a.0, c.0);
        let counts = data.label_counts();
        let (tc, vc) = (a.0.label_counts(), a.1.label_counts());
        for l in 0..NUM_LABELS {
            assert_eq!(tc[l] + vc[l], counts[l]);
        }
    }

    #[test]
    fn split_errors() {
        assert!(matches!(
            split_train_val(&DataSet::default(), 0.7, 0),
            Err(Error::EmptyDataset)
        ));
        assert!(split_train_val(&labeled(3), 1.0, 0).is_err());
    }

    #[test]
    fn dataset_idx_round_trip() {
        let data = labeled(40);
        let (img, lab) = data.to_idx_bytes();
        let back = DataSet::from_idx_bytes(&img, &lab).unwrap();
        assert_eq!(back, data);
        let dir = tempfile::tempdir().unwrap();
        data.write_idx(dir.path(), "x").unwrap();
        assert_eq!(DataSet::read_idx(dir.path(), "x").unwrap(), data);
    }

    #[test]
    fn subsample_keeps_fraction() {
        let data = labeled(100);
        let s = subsample(&data, 0.1, 4).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(s, subsample(&data, 0.1, 4).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn idx_images_round_trip(bytes in proptest::collection::vec(proptest::num::u8::ANY, 0..4 * PIXELS)) {
            let n = bytes.len() / PIXELS;
            let mut file = header(IMAGE_MAGIC, &[n as u32, 28, 28]);
            file.extend_from_slice(&bytes[..n * PIXELS]);
            let parsed = parse_idx_images(&file).unwrap();
            proptest::prop_assert_eq!(encode_idx_images(&parsed), file);
        }

        #[test]
        fn normalize_monotone(a in 0u8..=255, b in 0u8..=255) {
            let mut ra = [0u8; PIXELS];
            let mut rb = [0u8; PIXELS];
            ra[0] = a;
            rb[0] = b;
            let (na, nb) = (normalize(&ra).pixels()[0], normalize(&rb).pixels()[0]);
            proptest::prop_assert_eq!(a.cmp(&b), na.partial_cmp(&nb).unwrap());
        }
    }
}
