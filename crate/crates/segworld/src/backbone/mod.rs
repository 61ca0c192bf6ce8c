//! Backbone contract plus the two implementations used throughout: a small
//! trainable attention model and a table-driven deterministic stub for oracle
//! tests.

mod params;
mod stub;
mod tiny;

pub use params::{ParamSet, init_uniform};
pub use stub::{StubBackbone, StubBranch};
pub use tiny::{ModelConfig, TinyBackbone, CHECKPOINT_VERSION};

use crate::autodiff::Mat;
use crate::domain::GridImage;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Which of the two forward passes a sequence belongs to. Each pass has its own
/// learned prompt embedding; the stage-0 prompt is the only stage-0-exclusive
/// parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Stage0,
    Stage1,
}

/// Next-token logits and the final-layer hidden state at the last position.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// Per-cell feature rows for one image, row-major.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureGrid {
    pub fn feature_dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn n_cells(&self) -> usize {
        self.rows.len()
    }
}

/// Affine map from the [SEG] hidden state to the decoder prompt embedding.
#[derive(Debug, Clone)]
pub struct SegProjector {
    /// `[hidden_dim, prompt_dim]`
    pub w: Mat,
    /// `[1, prompt_dim]`
    pub b: Mat,
}

impl SegProjector {
    pub fn identity(dim: usize) -> Self {
        let mut w = Mat::zeros(dim, dim);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        SegProjector {
            w,
            b: Mat::zeros(1, dim),
        }
    }
}

/// Per-cell bilinear mask head: logit(cell) = prompt . (feature . u) + bias.
#[derive(Debug, Clone)]
pub struct MaskDecoder {
    /// `[feature_dim, prompt_dim]`
    pub u: Mat,
    pub bias: f64,
}

impl MaskDecoder {
    pub fn identity(dim: usize, bias: f64) -> Self {
        let mut u = Mat::zeros(dim, dim);
        for i in 0..dim {
            u.set(i, i, 1.0);
        }
        MaskDecoder { u, bias }
    }
}

/// The engine-facing model contract: image features, conditioned next-token
/// prediction with hidden-state access, and the learned projection/decoder
/// heads. Implementations must be deterministic functions of their inputs.
pub trait Backbone {
    fn vocab(&self) -> &Vocab;
    fn hidden_dim(&self) -> usize;
    fn encode_image(&self, image: &GridImage) -> Result<FeatureGrid>;
    /// One forward over `(prompt | image tokens | text)`; logits predict the
    /// next token after `text`, hidden is the state at the last position.
    fn step(&self, image: &GridImage, text: &[u32], pass: Pass) -> Result<StepOutput>;
    fn seg_projector(&self) -> SegProjector;
    fn mask_decoder(&self) -> MaskDecoder;
}

pub(crate) fn check_image_tokens(image: &GridImage, vocab: &Vocab) -> Result<()> {
    if (image.max_token() as usize) < vocab.len() {
        Ok(())
    } else {
        Err(Error::InvalidSample {
            sample_id: String::new(),
            reason: format!(
                "image token {} outside vocabulary of size {}",
                image.max_token(),
                vocab.len()
            ),
        })
    }
}
