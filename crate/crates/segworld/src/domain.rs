//! Core data types: token-grid images, instructions, scene contexts, reasoning
//! chains, binary masks with a bit-exact RLE codec, and dataset records.
//!
//! Everything here is immutable after construction and safe to share across
//! threads.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A synthetic image: a 2-D grid of object-token identifiers.
///
/// Token id 0 is background. Cells are stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GridImageRepr", into = "GridImageRepr")]
pub struct GridImage {
    width: usize,
    height: usize,
    cells: Vec<u32>,
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct GridImageRepr {
    width: usize,
    height: usize,
    cells: Vec<Vec<u32>>,
    feature_dim: usize,
}

impl TryFrom<GridImageRepr> for GridImage {
    type Error = Error;

    fn try_from(repr: GridImageRepr) -> Result<Self> {
        if repr.cells.len() != repr.height || repr.cells.iter().any(|row| row.len() != repr.width) {
            return Err(Error::InvalidSample {
                sample_id: String::new(),
                reason: format!(
                    "cells shape does not match {}x{} header",
                    repr.width, repr.height
                ),
            });
        }
        GridImage::new(
            repr.width,
            repr.height,
            repr.cells.into_iter().flatten().collect(),
            repr.feature_dim,
        )
    }
}

impl From<GridImage> for GridImageRepr {
    fn from(image: GridImage) -> Self {
        let cells = image
            .cells
            .chunks(image.width)
            .map(|row| row.to_vec())
            .collect();
        GridImageRepr {
            width: image.width,
            height: image.height,
            cells,
            feature_dim: image.feature_dim,
        }
    }
}

impl GridImage {
    pub fn new(width: usize, height: usize, cells: Vec<u32>, feature_dim: usize) -> Result<Self> {
        if width == 0 || height == 0 || feature_dim == 0 {
            return Err(Error::InvalidSample {
                sample_id: String::new(),
                reason: "image dimensions and feature_dim must be positive".into(),
            });
        }
        if cells.len() != width * height {
            return Err(Error::InvalidSample {
                sample_id: String::new(),
                reason: format!(
                    "expected {} cells for {}x{}, got {}",
                    width * height,
                    width,
                    height,
                    cells.len()
                ),
            });
        }
        Ok(GridImage {
            width,
            height,
            cells,
            feature_dim,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Row-major cell tokens.
    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.width + col]
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// Distinct non-background tokens in row-major first-occurrence order.
    pub fn distinct_tokens(&self) -> Vec<u32> {
        let mut seen = Vec::new();
        for &token in &self.cells {
            if token != 0 && !seen.contains(&token) {
                seen.push(token);
            }
        }
        seen
    }

    /// Largest token id present, for vocabulary-bound checks.
    pub fn max_token(&self) -> u32 {
        self.cells.iter().copied().max().unwrap_or(0)
    }
}

/// Instruction condition under which a sample is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Referring,
    Reasoning,
    Intent,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 3] = [
        InstructionKind::Referring,
        InstructionKind::Reasoning,
        InstructionKind::Intent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstructionKind::Referring => "referring",
            InstructionKind::Reasoning => "reasoning",
            InstructionKind::Intent => "intent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "referring" => Some(InstructionKind::Referring),
            "reasoning" => Some(InstructionKind::Reasoning),
            "intent" => Some(InstructionKind::Intent),
            _ => None,
        }
    }

    /// Target-referential kinds, i.e. everything except intent.
    pub fn target_referential() -> [InstructionKind; 2] {
        [InstructionKind::Referring, InstructionKind::Reasoning]
    }
}

impl fmt::Display for InstructionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub kind: InstructionKind,
}

impl Instruction {
    pub fn new(text: impl Into<String>, kind: InstructionKind) -> Self {
        Instruction {
            text: text.into(),
            kind,
        }
    }
}

/// Stage-0 output: the four-level scene context (scene sentence, object list,
/// relation statements, plausible events).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneContext {
    pub scene: String,
    pub objects: Vec<String>,
    pub relations: Vec<String>,
    pub events: Vec<String>,
}

impl SceneContext {
    /// A context is acceptable as supervision only with a non-empty object list.
    pub fn is_valid_supervision(&self) -> bool {
        !self.objects.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.scene.is_empty()
            && self.objects.is_empty()
            && self.relations.is_empty()
            && self.events.is_empty()
    }
}

/// Stage-1 output: object, action, part, affordance.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub object: String,
    pub action: String,
    pub part: String,
    pub affordance: String,
}

impl ReasoningChain {
    pub fn new(
        object: impl Into<String>,
        action: impl Into<String>,
        part: impl Into<String>,
        affordance: impl Into<String>,
    ) -> Self {
        ReasoningChain {
            object: object.into(),
            action: action.into(),
            part: part.into(),
            affordance: affordance.into(),
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.object.is_empty()
            && !self.action.is_empty()
            && !self.part.is_empty()
            && !self.affordance.is_empty()
    }

    pub fn fields(&self) -> [&str; 4] {
        [&self.object, &self.action, &self.part, &self.affordance]
    }
}

/// A 2-D binary mask over grid cells, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskRepr", into = "MaskRepr")]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    width: usize,
    height: usize,
    runs: Vec<u32>,
}

impl TryFrom<MaskRepr> for BinaryMask {
    type Error = Error;

    fn try_from(repr: MaskRepr) -> Result<Self> {
        BinaryMask::from_runs(repr.width, repr.height, &repr.runs)
    }
}

impl From<BinaryMask> for MaskRepr {
    fn from(mask: BinaryMask) -> Self {
        MaskRepr {
            width: mask.width,
            height: mask.height,
            runs: mask.to_runs(),
        }
    }
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::MalformedRle {
                reason: "mask dimensions must be positive".into(),
            });
        }
        if bits.len() != width * height {
            return Err(Error::MalformedRle {
                reason: format!(
                    "expected {} bits for {}x{}, got {}",
                    width * height,
                    width,
                    height,
                    bits.len()
                ),
            });
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Build a mask from the cells of `image` whose token equals `token`.
    pub fn from_token(image: &GridImage, token: u32) -> Self {
        BinaryMask {
            width: image.width(),
            height: image.height(),
            bits: image.cells().iter().map(|&t| t == token).collect(),
        }
    }

    /// Threshold per-cell probabilities at strictly greater than 0.5.
    pub fn from_probs(width: usize, height: usize, probs: &[f64]) -> Result<Self> {
        if probs.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: probs.len(),
            });
        }
        Ok(BinaryMask {
            width,
            height,
            bits: probs.iter().map(|&p| p > 0.5).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Alternating run lengths over the row-major scan; the first run counts
    /// zeros and may be 0. No other run is zero and there is no trailing
    /// zero-length run.
    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count: u32 = 0;
        for &bit in &self.bits {
            if bit == current {
                count += 1;
            } else {
                runs.push(count);
                current = bit;
                count = 1;
            }
        }
        runs.push(count);
        runs
    }

    pub fn from_runs(width: usize, height: usize, runs: &[u32]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::MalformedRle {
                reason: "mask dimensions must be positive".into(),
            });
        }
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (width * height) as u64 {
            return Err(Error::MalformedRle {
                reason: format!("runs sum to {}, expected {}", total, width * height),
            });
        }
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &run in runs {
            bits.extend(std::iter::repeat(value).take(run as usize));
            value = !value;
        }
        BinaryMask::new(width, height, bits)
    }
}

/// Encode a mask into the wire format: width and height as little-endian u32,
/// then the alternating run lengths as little-endian u32, zeros first.
pub fn rle_encode(mask: &BinaryMask) -> Vec<u8> {
    let runs = mask.to_runs();
    let mut bytes = Vec::with_capacity(8 + 4 * runs.len());
    bytes.extend_from_slice(&(mask.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(mask.height() as u32).to_le_bytes());
    for run in runs {
        bytes.extend_from_slice(&run.to_le_bytes());
    }
    bytes
}

/// Inverse of [`rle_encode`].
pub fn rle_decode(bytes: &[u8]) -> Result<BinaryMask> {
    if bytes.len() < 8 {
        return Err(Error::MalformedRle {
            reason: format!("header needs 8 bytes, got {}", bytes.len()),
        });
    }
    if (bytes.len() - 8) % 4 != 0 {
        return Err(Error::MalformedRle {
            reason: "run payload is not a whole number of u32 words".into(),
        });
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let runs: Vec<u32> = bytes[8..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    BinaryMask::from_runs(width, height, &runs)
}

/// Official train/test tag carried by every dataset record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// One dataset record: image, instructions, ground-truth chain and mask, and
/// (for training samples) the synthesized observation context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub base_image_id: String,
    pub split: SplitTag,
    pub image: GridImage,
    pub instructions: BTreeMap<InstructionKind, String>,
    pub chain: ReasoningChain,
    pub mask_gt: BinaryMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<SceneContext>,
}

impl Sample {
    pub fn instruction(&self, kind: InstructionKind) -> Option<Instruction> {
        self.instructions
            .get(&kind)
            .map(|text| Instruction::new(text.clone(), kind))
    }

    /// Structural invariants every ingested sample must satisfy.
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidSample {
            sample_id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if self.base_image_id.is_empty() {
            return Err(Error::MissingBaseImageId {
                sample_id: self.id.clone(),
            });
        }
        if self.instructions.is_empty() {
            return Err(fail("no instructions".into()));
        }
        if self.instructions.values().any(|t| t.trim().is_empty()) {
            return Err(fail("empty instruction text".into()));
        }
        if !self.chain.is_complete() {
            return Err(fail("incomplete reasoning chain".into()));
        }
        if self.mask_gt.width() != self.image.width() || self.mask_gt.height() != self.image.height()
        {
            return Err(Error::DimensionMismatch {
                expected_width: self.image.width(),
                expected_height: self.image.height(),
                actual_width: self.mask_gt.width(),
                actual_height: self.mask_gt.height(),
            });
        }
        if self.mask_gt.is_empty() {
            return Err(Error::EmptyGroundTruth);
        }
        if let Some(obs) = &self.observation {
            if !obs.is_valid_supervision() {
                return Err(fail("observation has empty object list".into()));
            }
        }
        Ok(())
    }
}

/// Per-component loss weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_0: f64,
    pub lambda_1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_mask: 1.0,
            lambda_0: 0.5,
            lambda_1: 1.0,
        }
    }
}

/// Scheduled-sampling curriculum parameters. `warmup_steps` has no default and
/// must be chosen per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub p_max: f64,
}

impl ScheduleConfig {
    pub fn new(warmup_steps: u64) -> Self {
        ScheduleConfig {
            warmup_steps,
            p_max: 0.5,
        }
    }
}

/// Id-level view of the dataset splits, including the source-disjoint clean
/// test subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test_official: Vec<String>,
    pub test_clean: Vec<String>,
    pub test_overlap: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let clean: std::collections::BTreeSet<_> = self.test_clean.iter().collect();
        let overlap: std::collections::BTreeSet<_> = self.test_overlap.iter().collect();
        let official: std::collections::BTreeSet<_> = self.test_official.iter().collect();
        if !clean.is_disjoint(&overlap) {
            return Err(Error::InvalidConfig {
                reason: "test_clean and test_overlap intersect".into(),
            });
        }
        let union: std::collections::BTreeSet<_> = clean.union(&overlap).copied().collect();
        if union != official {
            return Err(Error::InvalidConfig {
                reason: "test_clean and test_overlap do not partition test_official".into(),
            });
        }
        Ok(())
    }
}
