//! The trainable desk-scale backbone: a 2-layer single-head causal attention
//! model over `(pass prompt | image tokens | text tokens)` with RMS pre-norm,
//! a SiLU MLP, an LM head, and learned feature/projection/decoder heads for
//! mask prediction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamId, Tape, Var};
use crate::backbone::{
    check_image_tokens, init_uniform, Backbone, FeatureGrid, MaskDecoder, ParamSet, Pass,
    SegProjector, StepOutput,
};
use crate::domain::GridImage;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub prompt_dim: usize,
    pub max_seq_len: usize,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            n_layers: 2,
            mlp_hidden: 128,
            prompt_dim: 32,
            max_seq_len: 160,
            init_scale: 0.08,
        }
    }
}

/// Final-norm hidden states and LM logits for a full teacher-forced sequence.
pub struct ForwardVars {
    /// `[seq_len, hidden_dim]`
    pub hidden: Var,
    /// `[seq_len, vocab]`
    pub logits: Var,
    /// Number of rows before the first text token (prompt + image cells).
    pub prefix_len: usize,
}

#[derive(Debug, Clone)]
pub struct TinyBackbone {
    config: ModelConfig,
    vocab: Vocab,
    params: ParamSet,
}

impl TinyBackbone {
    pub fn new(vocab: Vocab, config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let v = vocab.len();
        let h = config.mlp_hidden;
        let pd = config.prompt_dim;
        let s = config.init_scale;

        let mut params = ParamSet::new();
        params.add("embed", init_uniform(&mut rng, v, d, s));
        params.add("pos", init_uniform(&mut rng, config.max_seq_len, d, s));
        params.add("prompt.stage0", init_uniform(&mut rng, 1, d, s));
        params.add("prompt.stage1", init_uniform(&mut rng, 1, d, s));
        for layer in 0..config.n_layers {
            for head in ["wq", "wk", "wv", "wo"] {
                params.add(
                    format!("layer{layer}.attn.{head}"),
                    init_uniform(&mut rng, d, d, s),
                );
            }
            params.add(
                format!("layer{layer}.norm1.gain"),
                Mat::from_vec(1, d, vec![1.0; d]),
            );
            params.add(
                format!("layer{layer}.norm2.gain"),
                Mat::from_vec(1, d, vec![1.0; d]),
            );
            params.add(
                format!("layer{layer}.mlp.w1"),
                init_uniform(&mut rng, d, h, s),
            );
            params.add(format!("layer{layer}.mlp.b1"), Mat::zeros(1, h));
            params.add(
                format!("layer{layer}.mlp.w2"),
                init_uniform(&mut rng, h, d, s),
            );
            params.add(format!("layer{layer}.mlp.b2"), Mat::zeros(1, d));
        }
        params.add("final_norm.gain", Mat::from_vec(1, d, vec![1.0; d]));
        params.add("lm_head.w", init_uniform(&mut rng, d, v, s));
        params.add("lm_head.b", Mat::zeros(1, v));
        params.add("feature.w", init_uniform(&mut rng, d, d, s));
        params.add("project.w", init_uniform(&mut rng, d, pd, s));
        params.add("project.b", Mat::zeros(1, pd));
        params.add("decoder.u", init_uniform(&mut rng, d, pd, s));
        params.add("decoder.b", Mat::zeros(1, 1));

        TinyBackbone {
            config,
            vocab,
            params,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn param_var(&self, tape: &mut Tape, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        tape.param(id, self.params.get(id).clone())
    }

    /// Ids of the parameters used exclusively by the observation pass.
    pub fn stage0_only_param_ids(&self) -> Vec<ParamId> {
        vec![self.params.id("prompt.stage0").expect("prompt.stage0")]
    }

    /// Ids of the projection + mask-decoder head parameters.
    pub fn head_param_ids(&self) -> Vec<ParamId> {
        ["project.w", "project.b", "decoder.u", "decoder.b"]
            .iter()
            .map(|n| self.params.id(n).expect("head param"))
            .collect()
    }

    /// Build the differentiable forward for `(prompt | image | text)`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        image: &GridImage,
        text: &[u32],
        pass: Pass,
    ) -> Result<ForwardVars> {
        check_image_tokens(image, &self.vocab)?;
        let d = self.config.hidden_dim;
        let n_cells = image.n_cells();
        let seq_len = 1 + n_cells + text.len();
        if seq_len > self.config.max_seq_len {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "sequence of {seq_len} tokens exceeds max_seq_len {}",
                    self.config.max_seq_len
                ),
            });
        }

        let embed = self.param_var(tape, "embed");
        let ids: Vec<usize> = image
            .cells()
            .iter()
            .map(|&t| t as usize)
            .chain(text.iter().map(|&t| t as usize))
            .collect();
        let token_rows = tape.gather_rows(embed, ids);
        let prompt_name = match pass {
            Pass::Stage0 => "prompt.stage0",
            Pass::Stage1 => "prompt.stage1",
        };
        let prompt = self.param_var(tape, prompt_name);
        let stacked = tape.concat_rows(vec![prompt, token_rows]);
        let pos = self.param_var(tape, "pos");
        let pos_slice = tape.slice_rows(pos, 0, seq_len);
        let mut x = tape.add(stacked, pos_slice);

        // Causal mask: position i attends to positions <= i.
        let mut mask = Mat::zeros(seq_len, seq_len);
        for i in 0..seq_len {
            for j in (i + 1)..seq_len {
                mask.set(i, j, -1e9);
            }
        }
        let mask = tape.leaf(mask);
        let scale = 1.0 / (d as f64).sqrt();

        for layer in 0..self.config.n_layers {
            let g1 = self.param_var(tape, &format!("layer{layer}.norm1.gain"));
            let normed = tape.rms_norm(x, g1);
            let wq = self.param_var(tape, &format!("layer{layer}.attn.wq"));
            let wk = self.param_var(tape, &format!("layer{layer}.attn.wk"));
            let wv = self.param_var(tape, &format!("layer{layer}.attn.wv"));
            let wo = self.param_var(tape, &format!("layer{layer}.attn.wo"));
            let q = tape.matmul(normed, wq);
            let k = tape.matmul(normed, wk);
            let v = tape.matmul(normed, wv);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, scale);
            let scores = tape.add(scores, mask);
            let attn = tape.softmax_rows(scores);
            let mixed = tape.matmul(attn, v);
            let proj = tape.matmul(mixed, wo);
            x = tape.add(x, proj);

            let g2 = self.param_var(tape, &format!("layer{layer}.norm2.gain"));
            let normed2 = tape.rms_norm(x, g2);
            let w1 = self.param_var(tape, &format!("layer{layer}.mlp.w1"));
            let b1 = self.param_var(tape, &format!("layer{layer}.mlp.b1"));
            let w2 = self.param_var(tape, &format!("layer{layer}.mlp.w2"));
            let b2 = self.param_var(tape, &format!("layer{layer}.mlp.b2"));
            let m = tape.matmul(normed2, w1);
            let m = tape.add_row(m, b1);
            let m = tape.silu(m);
            let m = tape.matmul(m, w2);
            let m = tape.add_row(m, b2);
            x = tape.add(x, m);
        }

        let gf = self.param_var(tape, "final_norm.gain");
        let hidden = tape.rms_norm(x, gf);
        let lm_w = self.param_var(tape, "lm_head.w");
        let lm_b = self.param_var(tape, "lm_head.b");
        let logits = tape.matmul(hidden, lm_w);
        let logits = tape.add_row(logits, lm_b);

        Ok(ForwardVars {
            hidden,
            logits,
            prefix_len: 1 + n_cells,
        })
    }

    /// Per-cell features on a tape: embed(cell) * feature.w.
    pub fn features_on_tape(&self, tape: &mut Tape, image: &GridImage) -> Result<Var> {
        check_image_tokens(image, &self.vocab)?;
        let embed = self.param_var(tape, "embed");
        let ids: Vec<usize> = image.cells().iter().map(|&t| t as usize).collect();
        let rows = tape.gather_rows(embed, ids);
        let w = self.param_var(tape, "feature.w");
        Ok(tape.matmul(rows, w))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = BTreeMap::new();
        for (_, name, value) in self.params.iter() {
            arrays.insert(
                name.to_string(),
                MatRepr {
                    rows: value.rows,
                    cols: value.cols,
                    data: value.data.clone(),
                },
            );
        }
        let checkpoint = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            words: self.vocab.tokens()[self.vocab.word_ids().start as usize
                ..self.vocab.word_ids().end as usize]
                .to_vec(),
            grid_tokens: self.vocab.tokens()[self.vocab.word_ids().end as usize..].to_vec(),
            params: arrays,
        };
        std::fs::write(path, serde_json::to_string(&checkpoint)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|source| Error::UnreadableFile {
            path: path.to_path_buf(),
            source,
        })?;
        let checkpoint: Checkpoint = serde_json::from_str(&data)?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: checkpoint.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let vocab = Vocab::from_parts(&checkpoint.words, &checkpoint.grid_tokens)?;
        // Rebuild with the saved shape, then overwrite every array.
        let mut model = TinyBackbone::new(vocab, checkpoint.config, 0);
        for (name, repr) in checkpoint.params {
            let id = model.params.id(&name).ok_or_else(|| Error::InvalidConfig {
                reason: format!("checkpoint has unknown parameter {name}"),
            })?;
            let current = model.params.get(id);
            if (current.rows, current.cols) != (repr.rows, repr.cols) {
                return Err(Error::InvalidConfig {
                    reason: format!("checkpoint parameter {name} has wrong shape"),
                });
            }
            *model.params.get_mut(id) = Mat::from_vec(repr.rows, repr.cols, repr.data);
        }
        Ok(model)
    }
}

impl Backbone for TinyBackbone {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn encode_image(&self, image: &GridImage) -> Result<FeatureGrid> {
        let mut tape = Tape::new();
        let features = self.features_on_tape(&mut tape, image)?;
        let value = tape.value(features);
        let rows = (0..value.rows).map(|i| value.row(i).to_vec()).collect();
        Ok(FeatureGrid {
            width: image.width(),
            height: image.height(),
            rows,
        })
    }

    fn step(&self, image: &GridImage, text: &[u32], pass: Pass) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let forward = self.forward_on_tape(&mut tape, image, text, pass)?;
        let logits = tape.value(forward.logits);
        let hidden = tape.value(forward.hidden);
        let last = logits.rows - 1;
        Ok(StepOutput {
            logits: logits.row(last).to_vec(),
            hidden: hidden.row(last).to_vec(),
        })
    }

    fn seg_projector(&self) -> SegProjector {
        SegProjector {
            w: self.params.by_name("project.w").clone(),
            b: self.params.by_name("project.b").clone(),
        }
    }

    fn mask_decoder(&self) -> MaskDecoder {
        MaskDecoder {
            u: self.params.by_name("decoder.u").clone(),
            bias: self.params.by_name("decoder.b").scalar(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    words: Vec<String>,
    grid_tokens: Vec<String>,
    params: BTreeMap<String, MatRepr>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> (TinyBackbone, GridImage) {
        let vocab = Vocab::from_parts(
            &["mug".into(), "drink".into(), "handle".into()],
            &["mug:body".into(), "mug:handle".into()],
        )
        .unwrap();
        let config = ModelConfig {
            hidden_dim: 16,
            n_layers: 2,
            mlp_hidden: 24,
            prompt_dim: 8,
            max_seq_len: 32,
            init_scale: 0.08,
        };
        let grid_body = vocab.id("mug:body").unwrap();
        let image = GridImage::new(2, 2, vec![0, grid_body, 0, 0], 16).unwrap();
        (TinyBackbone::new(vocab, config, 42), image)
    }

    #[test]
    fn step_is_deterministic() {
        let (model, image) = small_model();
        let text = vec![model.vocab.specials().scene];
        let a = model.step(&image, &text, Pass::Stage0).unwrap();
        let b = model.step(&image, &text, Pass::Stage0).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.hidden, b.hidden);
        assert_eq!(a.logits.len(), model.vocab.len());
        assert_eq!(a.hidden.len(), 16);
    }

    #[test]
    fn passes_use_distinct_prompts() {
        let (model, image) = small_model();
        let text = vec![model.vocab.specials().scene];
        let s0 = model.step(&image, &text, Pass::Stage0).unwrap();
        let s1 = model.step(&image, &text, Pass::Stage1).unwrap();
        assert_ne!(s0.logits, s1.logits);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, image) = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let loaded = TinyBackbone::load(&path).unwrap();
        let text = vec![model.vocab.specials().scene];
        let a = model.step(&image, &text, Pass::Stage0).unwrap();
        let b = loaded.step(&image, &text, Pass::Stage0).unwrap();
        assert_eq!(a.logits, b.logits);

        // A second save of the loaded model is byte-identical.
        let path2 = dir.path().join("model2.json");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_version_checked() {
        let (model, _) = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            TinyBackbone::load(&path).unwrap_err(),
            Error::CheckpointVersion { found: 9, .. }
        ));
    }

    #[test]
    fn image_tokens_must_fit_vocab() {
        let (model, _) = small_model();
        let image = GridImage::new(2, 2, vec![0, 9999, 0, 0], 16).unwrap();
        assert!(model.step(&image, &[], Pass::Stage0).is_err());
    }

    #[test]
    fn features_have_model_dims() {
        let (model, image) = small_model();
        let features = model.encode_image(&image).unwrap();
        assert_eq!(features.n_cells(), 4);
        assert_eq!(features.feature_dim(), 16);
    }
}
