//! Visual concepts: rectangle distributions over digit strokes, segment
//! extraction and the augmented concept dataset.
//!
//! A concept is a rectangle whose top-left corner, width and height are each
//! drawn from a Normal distribution around hand-calibrated means. A concept
//! sample keeps the source pixels inside the rectangle at their original
//! location and zeros everything else.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DataSet, Image28, LabeledSample, Origin, PIXELS, SIDE};
use crate::{Error, Result};

pub const NUM_CONCEPTS: usize = 18;
pub const DEFAULT_P: f64 = 0.8;
pub const DEFAULT_PER_CONCEPT: usize = 3000;

/// The shipped concept table. The rectangles were calibrated by hand on
/// per-digit mean MNIST images; pin `version` when comparing results.
pub const DEFAULT_TABLE_JSON: &str = include_str!("../assets/concepts_v1.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    #[serde(rename = "id")]
    pub concept_id: u8,
    pub source_digit: u8,
    pub mean_x: f64,
    pub mean_y: f64,
    pub mean_w: f64,
    pub mean_h: f64,
    #[serde(default = "default_std")]
    pub std: f64,
}

fn default_std() -> f64 {
    1.0
}

impl ConceptSpec {
    pub fn label(&self) -> u8 {
        self.concept_id + dataset::FIRST_CONCEPT_LABEL
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SchemaViolation(format!("concept {}: {m}", self.concept_id)));
        if self.concept_id as usize >= NUM_CONCEPTS {
            return bad("id out of range 0-17".into());
        }
        if self.source_digit > 9 {
            return bad(format!("source_digit {} not a digit", self.source_digit));
        }
        let side = SIDE as f64;
        if !(1.0..=side).contains(&self.mean_w) || !(1.0..=side).contains(&self.mean_h) {
            return bad(format!("mean size {}x{} outside [1, 28]", self.mean_w, self.mean_h));
        }
        if !(0.0..=side - 1.0).contains(&self.mean_x) || !(0.0..=side - 1.0).contains(&self.mean_y) {
            return bad(format!("mean corner ({}, {}) outside [0, 27]", self.mean_x, self.mean_y));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return bad(format!("std {} must be positive", self.std));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptTable {
    pub version: String,
    pub concepts: Vec<ConceptSpec>,
}

impl ConceptTable {
    pub fn default_table() -> Self {
        Self::from_json(DEFAULT_TABLE_JSON).expect("bundled concept table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ConceptTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Exactly 18 entries with ids 0-17, every digit covered, digits 2 and 4
    /// at least twice.
    pub fn validate(&self) -> Result<()> {
        if self.concepts.len() != NUM_CONCEPTS {
            return Err(Error::SchemaViolation(format!(
                "expected {NUM_CONCEPTS} concepts, found {}",
                self.concepts.len()
            )));
        }
        let mut seen = [false; NUM_CONCEPTS];
        let mut per_digit = [0usize; 10];
        for c in &self.concepts {
            c.validate()?;
            if std::mem::replace(&mut seen[c.concept_id as usize], true) {
                return Err(Error::SchemaViolation(format!("duplicate concept id {}", c.concept_id)));
            }
            per_digit[c.source_digit as usize] += 1;
        }
        if let Some(d) = per_digit.iter().position(|&n| n == 0) {
            return Err(Error::SchemaViolation(format!("digit {d} has no concept")));
        }
        if per_digit[2] < 2 || per_digit[4] < 2 {
            return Err(Error::SchemaViolation("digits 2 and 4 need at least two concepts each".into()));
        }
        Ok(())
    }

    /// Specs ordered by concept id.
    pub fn sorted(&self) -> Vec<&ConceptSpec> {
        let mut v: Vec<_> = self.concepts.iter().collect();
        v.sort_by_key(|c| c.concept_id);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn is_valid(&self) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= SIDE && self.y + self.h <= SIDE
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y..self.y + self.h).contains(&row) && (self.x..self.x + self.w).contains(&col)
    }

    /// Rounds real-valued geometry, then clamps size into `[1, 28]` and the
    /// corner so the rectangle fits.
    pub fn clamped(x: f64, y: f64, w: f64, h: f64) -> Self {
        let side = SIDE as f64;
        let w = w.round().clamp(1.0, side) as usize;
        let h = h.round().clamp(1.0, side) as usize;
        let x = x.round().clamp(0.0, (SIDE - w) as f64) as usize;
        let y = y.round().clamp(0.0, (SIDE - h) as f64) as usize;
        Self { x, y, w, h }
    }
}

/// Draws x, y, w, h (in that order) from `Normal(mean, std)`, rounds and
/// clamps.
pub fn sample_rect<R: Rng>(spec: &ConceptSpec, rng: &mut R) -> Rect {
    let mut draw = |mean: f64| {
        let z: f64 = rng.sample(StandardNormal);
        mean + spec.std * z
    };
    let x = draw(spec.mean_x);
    let y = draw(spec.mean_y);
    let w = draw(spec.mean_w);
    let h = draw(spec.mean_h);
    Rect::clamped(x, y, w, h)
}

/// Copies `src` inside `r` onto a blank canvas at the same location.
pub fn extract_segment(src: &Image28, r: Rect) -> Image28 {
    debug_assert!(r.is_valid());
    let mut px = [0.0f32; PIXELS];
    for row in r.y..r.y + r.h {
        let span = row * SIDE + r.x..row * SIDE + r.x + r.w;
        px[span.clone()].copy_from_slice(&src.pixels()[span]);
    }
    Image28::from_pixels(&px).expect("copied pixels stay in range")
}

/// One representative image per digit, taken from decoded cluster centers of
/// a baseline model.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeSet {
    pub images: Vec<Image28>,
    /// Identifier of the checkpoint that produced the images.
    pub provenance: String,
}

impl RepresentativeSet {
    pub fn new(images: Vec<Image28>, provenance: impl Into<String>) -> Result<Self> {
        if images.len() != 10 {
            return Err(Error::InvalidArgument(format!("need 10 representatives, got {}", images.len())));
        }
        Ok(Self {
            images,
            provenance: provenance.into(),
        })
    }

    pub fn image(&self, digit: u8) -> &Image28 {
        &self.images[digit as usize]
    }

    /// Persists as an IDX pair with labels 0-9 in order.
    pub fn write_idx(&self, dir: &Path, stem: &str) -> Result<()> {
        let samples = self
            .images
            .iter()
            .enumerate()
            .map(|(d, img)| LabeledSample::new(img.clone(), d as u8))
            .collect::<Result<Vec<_>>>()?;
        DataSet::new(samples).write_idx(dir, stem)?;
        Ok(())
    }

    pub fn read_idx(dir: &Path, stem: &str, provenance: impl Into<String>) -> Result<Self> {
        let data = DataSet::read_idx(dir, stem)?;
        let labels: Vec<u8> = data.iter().map(|s| s.label()).collect();
        if labels != (0..10).collect::<Vec<u8>>() {
            return Err(Error::InvalidArgument(format!("representative labels must be 0..9 in order, got {labels:?}")));
        }
        Self::new(data.samples.into_iter().map(|s| s.image().clone()).collect(), provenance)
    }
}

/// Indices of original-labeled training samples grouped by digit.
#[derive(Debug, Clone)]
pub struct SourcePool<'a> {
    train: &'a DataSet,
    by_digit: Vec<Vec<usize>>,
}

impl<'a> SourcePool<'a> {
    pub fn new(train: &'a DataSet) -> Self {
        let mut by_digit = vec![Vec::new(); 10];
        for (i, s) in train.iter().enumerate() {
            if s.origin() == Origin::Original {
                by_digit[s.label() as usize].push(i);
            }
        }
        Self { train, by_digit }
    }

    pub fn count(&self, digit: u8) -> usize {
        self.by_digit[digit as usize].len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceChoice {
    Training(usize),
    Representative,
}

/// With probability `p` a uniformly chosen training image of `digit`,
/// otherwise the digit's representative.
pub fn choose_source<R: Rng>(pool: &SourcePool<'_>, digit: u8, p: f64, rng: &mut R) -> Result<SourceChoice> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("p = {p} not in [0, 1]")));
    }
    let candidates = &pool.by_digit[digit as usize];
    if candidates.is_empty() {
        return Err(Error::NoSampleForDigit(digit));
    }
    if rng.random_bool(p) {
        Ok(SourceChoice::Training(candidates[rng.random_range(0..candidates.len())]))
    } else {
        Ok(SourceChoice::Representative)
    }
}

pub fn choose_source_image<'b, R: Rng>(pool: &'b SourcePool<'_>, digit: u8, reps: &'b RepresentativeSet, p: f64, rng: &mut R) -> Result<&'b Image28> {
    Ok(match choose_source(pool, digit, p, rng)? {
        SourceChoice::Training(i) => pool.train.samples[i].image(),
        SourceChoice::Representative => reps.image(digit),
    })
}

/// `n` samples of one concept from the concept's own random stream.
fn generate_concept(spec: &ConceptSpec, pool: &SourcePool<'_>, reps: &RepresentativeSet, n: usize, p: f64, seed: u64) -> Result<Vec<LabeledSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spec.concept_id as u64);
    (0..n)
        .map(|_| {
            let src = choose_source_image(pool, spec.source_digit, reps, p, &mut rng)?;
            let rect = sample_rect(spec, &mut rng);
            LabeledSample::new(extract_segment(src, rect), spec.label())
        })
        .collect()
}

/// Generates `18 * n_per_concept` concept samples, grouped by concept id.
///
/// Each concept draws from the ChaCha stream `(seed, concept_id)`, so the
/// result does not depend on how many worker threads are used.
pub fn generate_concept_dataset(table: &ConceptTable, train: &DataSet, reps: &RepresentativeSet, n_per_concept: usize, p: f64, seed: u64) -> Result<DataSet> {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    generate_concept_dataset_with_threads(table, train, reps, n_per_concept, p, seed, threads)
}

pub fn generate_concept_dataset_with_threads(
    table: &ConceptTable,
    train: &DataSet,
    reps: &RepresentativeSet,
    n_per_concept: usize,
    p: f64,
    seed: u64,
    threads: usize,
) -> Result<DataSet> {
    if n_per_concept == 0 {
        return Err(Error::InvalidArgument("n_per_concept must be at least 1".into()));
    }
    table.validate()?;
    let pool = SourcePool::new(train);
    let specs = table.sorted();
    let threads = threads.clamp(1, NUM_CONCEPTS);
    let per_thread = specs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<LabeledSample>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(per_thread)
            .map(|chunk| {
                let pool = &pool;
                scope.spawn(move || {
                    let mut out = Vec::with_capacity(chunk.len() * n_per_concept);
                    for spec in chunk {
                        out.extend(generate_concept(spec, pool, reps, n_per_concept, p, seed)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("generation thread panicked")).collect()
    });
    let mut samples = Vec::with_capacity(NUM_CONCEPTS * n_per_concept);
    for part in parts {
        samples.extend(part?);
    }
    Ok(DataSet {
        samples,
        seed: Some(seed),
    })
}

/// Concatenates original (labels 0-9) and concept (labels 10-27) samples.
pub fn build_augmented_dataset(original: &DataSet, concepts: &DataSet) -> Result<DataSet> {
    if let Some(s) = original.iter().find(|s| s.origin() != Origin::Original) {
        return Err(Error::LabelCollision(format!("original set contains label {}", s.label())));
    }
    if let Some(s) = concepts.iter().find(|s| s.origin() != Origin::Concept) {
        return Err(Error::LabelCollision(format!("concept set contains label {}", s.label())));
    }
    let mut samples = Vec::with_capacity(original.len() + concepts.len());
    samples.extend(original.samples.iter().cloned());
    samples.extend(concepts.samples.iter().cloned());
    Ok(DataSet::new(samples))
}

/// The segment at each concept's mean rectangle, cut from the digit's
/// representative. Indexed by concept id.
pub fn concept_templates(table: &ConceptTable, reps: &RepresentativeSet) -> Vec<Image28> {
    table
        .sorted()
        .into_iter()
        .map(|c| extract_segment(reps.image(c.source_digit), mean_rect(c)))
        .collect()
}

pub fn mean_rect(spec: &ConceptSpec) -> Rect {
    Rect::clamped(spec.mean_x, spec.mean_y, spec.mean_w, spec.mean_h)
}
