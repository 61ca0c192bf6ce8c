//! The two-pass inference pipeline: instruction-free observation, the
//! instruction-conditioned chain ending in [SEG], projection of the [SEG]
//! hidden state into a decoder prompt, per-cell mask decoding, and the
//! sampled-context marginal estimate.
//!
//! Inference is read-only over model weights; concurrent `segment` calls on
//! one backbone are safe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureGrid, MaskDecoder, Pass, SegProjector};
use crate::domain::{BinaryMask, GridImage, Instruction, ReasoningChain, SceneContext};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Ablation switches. Each one removes exactly one prescribed piece of the
/// decoded token stream and nothing else.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Omit the events level from the observation pass.
    pub drop_events: bool,
    /// Run stage 1 without any scene context (no observation pass).
    pub drop_context: bool,
    /// Emit [SEG] directly after the instruction, with no chain tokens.
    pub drop_stage1_cot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    Greedy,
    Sampled { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Number of sampled contexts for the marginal estimate.
    pub context_samples: usize,
    pub ablation: AblationFlags,
    pub decode: DecodeMode,
    /// Grammar-constrained decoding: level delimiters and [SEG] are forced, so
    /// every decode is well-formed and [SEG] emission cannot fail.
    pub forced_decode: bool,
    /// Content-token budget per observation level.
    pub level_budget: usize,
    /// Content-token budget per chain field.
    pub field_budget: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            context_samples: 1,
            ablation: AblationFlags::default(),
            decode: DecodeMode::Greedy,
            forced_decode: true,
            level_budget: 12,
            field_budget: 3,
        }
    }
}

/// Hidden state captured at the emitted [SEG] token.
#[derive(Debug, Clone, PartialEq)]
pub struct SegState {
    pub hidden: Vec<f64>,
}

impl SegState {
    pub fn new(hidden: Vec<f64>) -> Result<Self> {
        if hidden.iter().all(|v| v.is_finite()) {
            Ok(SegState { hidden })
        } else {
            Err(Error::InvalidConfig {
                reason: "non-finite [SEG] hidden state".into(),
            })
        }
    }
}

/// Decoder prompt produced by projecting a [SEG] state.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub values: Vec<f64>,
}

/// Per-cell probabilities before binarization.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
}

impl SoftMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        SoftMask {
            width,
            height,
            probs: vec![0.0; width * height],
        }
    }

    /// Strict > 0.5 thresholding; an all-0.5 soft mask binarizes to empty.
    pub fn binarize(&self) -> BinaryMask {
        BinaryMask::from_probs(self.width, self.height, &self.probs).expect("consistent shape")
    }
}

/// Full output of one segmentation call.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: BinaryMask,
    pub soft_mask: SoftMask,
    pub chain: ReasoningChain,
    pub context: SceneContext,
    pub emitted_seg: bool,
}

fn pick_token<R: Rng>(
    logits: &[f64],
    allowed: &[u32],
    mode: DecodeMode,
    rng: &mut R,
) -> u32 {
    debug_assert!(!allowed.is_empty());
    match mode {
        DecodeMode::Greedy => {
            let mut best = allowed[0];
            let mut best_score = logits[allowed[0] as usize];
            for &t in &allowed[1..] {
                if logits[t as usize] > best_score {
                    best = t;
                    best_score = logits[t as usize];
                }
            }
            best
        }
        DecodeMode::Sampled { temperature } => {
            let temp = temperature.max(1e-6);
            let max = allowed
                .iter()
                .map(|&t| logits[t as usize])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = allowed
                .iter()
                .map(|&t| ((logits[t as usize] - max) / temp).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut draw = rng.random::<f64>() * total;
            for (&t, &w) in allowed.iter().zip(&weights) {
                draw -= w;
                if draw <= 0.0 {
                    return t;
                }
            }
            *allowed.last().unwrap()
        }
    }
}

/// Serialize a scene context into the level-delimited token stream:
/// `<SCENE> .. <OBJ> .. <REL> .. [<EVT> ..] <END>` with `<SEP>` between list
/// items. Items that are themselves vocabulary tokens (e.g. grid tokens) stay
/// single tokens.
pub fn context_tokens(context: &SceneContext, vocab: &Vocab, drop_events: bool) -> Vec<u32> {
    let sp = vocab.specials();
    let mut out = vec![sp.scene];
    out.extend(item_tokens(&context.scene, vocab));
    for (delim, items) in [
        (sp.obj, &context.objects),
        (sp.rel, &context.relations),
        (sp.evt, &context.events),
    ] {
        if delim == sp.evt && drop_events {
            continue;
        }
        out.push(delim);
        for (i, item) in items.iter().enumerate() {
            if i > 0 {
                out.push(sp.sep);
            }
            out.extend(item_tokens(item, vocab));
        }
    }
    out.push(sp.end);
    out
}

fn item_tokens(item: &str, vocab: &Vocab) -> Vec<u32> {
    if item.is_empty() {
        return Vec::new();
    }
    if let Some(id) = vocab.id(item) {
        return vec![id];
    }
    vocab.encode_text(item)
}

/// Parse a level-delimited token stream back into a scene context.
pub fn parse_context(tokens: &[u32], vocab: &Vocab) -> SceneContext {
    let sp = vocab.specials();
    let mut context = SceneContext::default();
    let mut level: Option<u32> = None;
    let mut item: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();

    let mut flush_item = |item: &mut Vec<String>, items: &mut Vec<String>| {
        if !item.is_empty() {
            items.push(item.join(" "));
            item.clear();
        }
    };
    let mut flush_level =
        |level: Option<u32>, items: &mut Vec<String>, context: &mut SceneContext| {
            let drained: Vec<String> = std::mem::take(items);
            match level {
                Some(l) if l == sp.scene => context.scene = drained.join(" "),
                Some(l) if l == sp.obj => context.objects = drained,
                Some(l) if l == sp.rel => context.relations = drained,
                Some(l) if l == sp.evt => context.events = drained,
                _ => {}
            }
        };

    for &token in tokens {
        if token == sp.scene || token == sp.obj || token == sp.rel || token == sp.evt {
            flush_item(&mut item, &mut items);
            flush_level(level, &mut items, &mut context);
            level = Some(token);
        } else if token == sp.sep {
            flush_item(&mut item, &mut items);
        } else if token == sp.end {
            break;
        } else {
            item.push(vocab.token(token).to_string());
        }
    }
    flush_item(&mut item, &mut items);
    flush_level(level, &mut items, &mut context);
    context
}

/// Stage 0: decode the four context levels from the image alone. By
/// construction there is no instruction parameter; the emitted context is a
/// property of the scene.
pub fn observe<B: Backbone, R: Rng>(
    image: &GridImage,
    backbone: &B,
    config: &EngineConfig,
    rng: &mut R,
) -> Result<SceneContext> {
    let vocab = backbone.vocab();
    let sp = *vocab.specials();
    // Observation levels may name either plain words or grid tokens (the stub
    // echoes grid tokens verbatim).
    let content: Vec<u32> = vocab.word_ids().chain(vocab.grid_ids()).collect();

    let mut levels = vec![
        ("scene", sp.obj),
        ("objects", sp.rel),
        (
            "relations",
            if config.ablation.drop_events {
                sp.end
            } else {
                sp.evt
            },
        ),
    ];
    if !config.ablation.drop_events {
        levels.push(("events", sp.end));
    }

    let mut text = vec![sp.scene];
    for (name, terminator) in levels {
        let mut emitted = 0usize;
        loop {
            if emitted >= config.level_budget && !config.forced_decode {
                return Err(Error::DecodeOverflow {
                    level: name.to_string(),
                    budget: config.level_budget,
                });
            }
            let out = backbone.step(image, &text, Pass::Stage0)?;
            let mut allowed: Vec<u32> = Vec::new();
            if emitted < config.level_budget {
                allowed.extend(&content);
                allowed.push(sp.sep);
            }
            allowed.push(terminator);
            let token = pick_token(&out.logits, &allowed, config.decode, rng);
            text.push(token);
            if token == terminator {
                break;
            }
            emitted += 1;
        }
    }
    Ok(parse_context(&text, vocab))
}

/// Stage 1: recover the chain (object, action, part, affordance) conditioned
/// on the image, the scene context, and the instruction, then capture the
/// hidden state of the emitted [SEG] token.
pub fn resolve<B: Backbone, R: Rng>(
    image: &GridImage,
    instruction: &Instruction,
    context: &SceneContext,
    backbone: &B,
    config: &EngineConfig,
    rng: &mut R,
) -> Result<(ReasoningChain, SegState)> {
    if context.is_empty() && !config.ablation.drop_context {
        return Err(Error::InvalidConfig {
            reason: "empty context requires drop_context".into(),
        });
    }
    let vocab = backbone.vocab();
    let sp = *vocab.specials();
    let words: Vec<u32> = vocab.word_ids().collect();

    let mut text = Vec::new();
    if !config.ablation.drop_context {
        text.extend(context_tokens(context, vocab, config.ablation.drop_events));
    }
    text.push(sp.ins);
    text.extend(vocab.encode_text(&instruction.text));

    let response_start = text.len();
    if config.ablation.drop_stage1_cot {
        if config.forced_decode {
            text.push(sp.seg);
        } else {
            let out = backbone.step(image, &text, Pass::Stage1)?;
            let mut allowed = words.clone();
            allowed.extend([sp.o, sp.a, sp.p, sp.f, sp.seg]);
            let token = pick_token(&out.logits, &allowed, config.decode, rng);
            if token != sp.seg {
                return Err(Error::NoSegToken);
            }
            text.push(sp.seg);
        }
    } else if config.forced_decode {
        let delims = [sp.o, sp.a, sp.p, sp.f];
        for (i, &delim) in delims.iter().enumerate() {
            text.push(delim);
            let stop = if i + 1 < delims.len() {
                delims[i + 1]
            } else {
                sp.seg
            };
            let mut emitted = 0usize;
            loop {
                let out = backbone.step(image, &text, Pass::Stage1)?;
                let mut allowed: Vec<u32> = Vec::new();
                if emitted < config.field_budget {
                    allowed.extend(&words);
                }
                allowed.push(stop);
                let token = pick_token(&out.logits, &allowed, config.decode, rng);
                if token == stop {
                    break;
                }
                text.push(token);
                emitted += 1;
            }
        }
        text.push(sp.seg);
    } else {
        // Free decoding: the model must emit delimiters and [SEG] on its own.
        let budget = 4 * (config.field_budget + 1) + 2;
        let mut allowed = words.clone();
        allowed.extend([sp.o, sp.a, sp.p, sp.f, sp.seg]);
        loop {
            if text.len() - response_start >= budget {
                return Err(Error::NoSegToken);
            }
            let out = backbone.step(image, &text, Pass::Stage1)?;
            let token = pick_token(&out.logits, &allowed, config.decode, rng);
            text.push(token);
            if token == sp.seg {
                break;
            }
        }
    }

    let chain = parse_chain(&text[response_start..], vocab);
    let out = backbone.step(image, &text, Pass::Stage1)?;
    Ok((chain, SegState::new(out.hidden)?))
}

fn parse_chain(response: &[u32], vocab: &Vocab) -> ReasoningChain {
    let sp = vocab.specials();
    let mut fields: [Vec<String>; 4] = Default::default();
    let mut current: Option<usize> = None;
    for &token in response {
        if token == sp.seg {
            break;
        }
        if token == sp.o {
            current = Some(0);
        } else if token == sp.a {
            current = Some(1);
        } else if token == sp.p {
            current = Some(2);
        } else if token == sp.f {
            current = Some(3);
        } else if let Some(i) = current {
            fields[i].push(vocab.token(token).to_string());
        }
    }
    ReasoningChain {
        object: fields[0].join(" "),
        action: fields[1].join(" "),
        part: fields[2].join(" "),
        affordance: fields[3].join(" "),
    }
}

/// Affine projection of the [SEG] hidden state into the decoder prompt.
pub fn project_seg(state: &SegState, projector: &SegProjector) -> Result<PromptEmbedding> {
    if state.hidden.len() != projector.w.rows {
        return Err(Error::LengthMismatch {
            expected: projector.w.rows,
            actual: state.hidden.len(),
        });
    }
    let pd = projector.w.cols;
    let mut values = vec![0.0; pd];
    for (i, &h) in state.hidden.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        let row = projector.w.row(i);
        for (v, &w) in values.iter_mut().zip(row) {
            *v += h * w;
        }
    }
    for (v, &b) in values.iter_mut().zip(&projector.b.data) {
        *v += b;
    }
    Ok(PromptEmbedding { values })
}

/// Map each cell feature through the decoder and score it against the prompt:
/// sigmoid(prompt . (feature . u) + bias) per cell.
pub fn decode_mask(
    prompt: &PromptEmbedding,
    features: &FeatureGrid,
    decoder: &MaskDecoder,
) -> Result<SoftMask> {
    if features.n_cells() != features.width * features.height {
        return Err(Error::DimensionMismatch {
            expected_width: features.width,
            expected_height: features.height,
            actual_width: features.n_cells(),
            actual_height: 1,
        });
    }
    if features.feature_dim() != decoder.u.rows {
        return Err(Error::LengthMismatch {
            expected: decoder.u.rows,
            actual: features.feature_dim(),
        });
    }
    if prompt.values.len() != decoder.u.cols {
        return Err(Error::LengthMismatch {
            expected: decoder.u.cols,
            actual: prompt.values.len(),
        });
    }
    let probs = features
        .rows
        .iter()
        .map(|feature| {
            let mut logit = decoder.bias;
            for (j, &p) in prompt.values.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let mut mapped = 0.0;
                for (i, &f) in feature.iter().enumerate() {
                    mapped += f * decoder.u.get(i, j);
                }
                logit += mapped * p;
            }
            1.0 / (1.0 + (-logit).exp())
        })
        .collect();
    Ok(SoftMask {
        width: features.width,
        height: features.height,
        probs,
    })
}

/// The full pipeline: observe, resolve, project, decode, binarize. A missing
/// [SEG] token becomes a non-emission result with an all-background mask.
pub fn segment<B: Backbone, R: Rng>(
    image: &GridImage,
    instruction: &Instruction,
    backbone: &B,
    config: &EngineConfig,
    rng: &mut R,
) -> Result<Segmentation> {
    let context = if config.ablation.drop_context {
        SceneContext::default()
    } else {
        observe(image, backbone, config, rng)?
    };
    match resolve(image, instruction, &context, backbone, config, rng) {
        Ok((chain, state)) => {
            let prompt = project_seg(&state, &backbone.seg_projector())?;
            let features = backbone.encode_image(image)?;
            let soft_mask = decode_mask(&prompt, &features, &backbone.mask_decoder())?;
            Ok(Segmentation {
                mask: soft_mask.binarize(),
                soft_mask,
                chain,
                context,
                emitted_seg: true,
            })
        }
        Err(Error::NoSegToken) => Ok(Segmentation {
            mask: BinaryMask::zeros(image.width(), image.height()),
            soft_mask: SoftMask::zeros(image.width(), image.height()),
            chain: ReasoningChain::default(),
            context,
            emitted_seg: false,
        }),
        Err(e) => Err(e),
    }
}

/// Monte-Carlo estimate of the context-marginalized mask: average the soft
/// masks obtained from `k` contexts sampled from the observation pass.
pub fn marginal_estimate<B: Backbone, R: Rng>(
    image: &GridImage,
    instruction: &Instruction,
    backbone: &B,
    config: &EngineConfig,
    k: usize,
    rng: &mut R,
) -> Result<SoftMask> {
    if k == 0 {
        return Err(Error::InvalidConfig {
            reason: "marginal estimate needs k >= 1".into(),
        });
    }
    let mut stage0_config = *config;
    stage0_config.decode = match config.decode {
        DecodeMode::Sampled { temperature } => DecodeMode::Sampled { temperature },
        DecodeMode::Greedy => DecodeMode::Sampled { temperature: 1.0 },
    };
    let stage1_config = EngineConfig {
        decode: DecodeMode::Greedy,
        ..*config
    };

    let mut acc = vec![0.0; image.n_cells()];
    for _ in 0..k {
        let context = if config.ablation.drop_context {
            SceneContext::default()
        } else {
            observe(image, backbone, &stage0_config, rng)?
        };
        let soft = match resolve(image, instruction, &context, backbone, &stage1_config, rng) {
            Ok((_, state)) => {
                let prompt = project_seg(&state, &backbone.seg_projector())?;
                let features = backbone.encode_image(image)?;
                decode_mask(&prompt, &features, &backbone.mask_decoder())?
            }
            Err(Error::NoSegToken) => SoftMask::zeros(image.width(), image.height()),
            Err(e) => return Err(e),
        };
        for (a, p) in acc.iter_mut().zip(&soft.probs) {
            *a += p;
        }
    }
    for a in acc.iter_mut() {
        *a /= k as f64;
    }
    Ok(SoftMask {
        width: image.width(),
        height: image.height(),
        probs: acc,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Intent-region similarity in the learned joint (prompt) space: entry (i, j)
/// compares the projected [SEG] state of intent i run on image j against the
/// decoder-mapped mean feature of image j's target region.
pub fn similarity_matrix<B: Backbone, R: Rng>(
    intents: &[Instruction],
    targets: &[(GridImage, BinaryMask)],
    backbone: &B,
    config: &EngineConfig,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if intents.is_empty() || targets.is_empty() {
        return Err(Error::EmptyInput);
    }
    if intents.len() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: intents.len(),
            actual: targets.len(),
        });
    }
    let decoder = backbone.mask_decoder();
    let projector = backbone.seg_projector();
    let pd = decoder.u.cols;

    // Pooled target-region vector per image, mapped into prompt space.
    let mut regions = Vec::with_capacity(targets.len());
    let mut contexts = Vec::with_capacity(targets.len());
    for (image, gt) in targets {
        let features = backbone.encode_image(image)?;
        let mut pooled = vec![0.0; pd];
        let mut count = 0usize;
        for (cell, feature) in features.rows.iter().enumerate() {
            if gt.bits()[cell] {
                for j in 0..pd {
                    let mut mapped = 0.0;
                    for (i, &f) in feature.iter().enumerate() {
                        mapped += f * decoder.u.get(i, j);
                    }
                    pooled[j] += mapped;
                }
                count += 1;
            }
        }
        if count > 0 {
            for v in pooled.iter_mut() {
                *v /= count as f64;
            }
        }
        regions.push(pooled);
        let context = if config.ablation.drop_context {
            SceneContext::default()
        } else {
            observe(image, backbone, config, rng)?
        };
        contexts.push(context);
    }

    let mut matrix = vec![vec![0.0; targets.len()]; intents.len()];
    for (i, intent) in intents.iter().enumerate() {
        for (j, (image, _)) in targets.iter().enumerate() {
            let sim = match resolve(image, intent, &contexts[j], backbone, config, rng) {
                Ok((_, state)) => {
                    let prompt = project_seg(&state, &projector)?;
                    cosine(&prompt.values, &regions[j])
                }
                Err(Error::NoSegToken) => 0.0,
                Err(e) => return Err(e),
            };
            matrix[i][j] = sim;
        }
    }
    Ok(matrix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mat;
    use crate::backbone::{StubBackbone, StubBranch};
    use crate::domain::InstructionKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stub_vocab() -> Vocab {
        let words: Vec<String> = [
            "tabletop", "kitchen", "beside", "use", "mug", "kettle", "drink", "pour", "handle",
            "spout", "graspable", "pourable", "i", "want", "to", "water", "tea", "have",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let grid: Vec<String> = ["mug:body", "mug:handle", "kettle:base", "kettle:spout"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Vocab::from_parts(&words, &grid).unwrap()
    }

    fn stub_image(vocab: &Vocab) -> GridImage {
        let mut cells = vec![0u32; 16];
        cells[0] = vocab.id("mug:body").unwrap();
        cells[1] = vocab.id("mug:handle").unwrap();
        cells[10] = vocab.id("kettle:base").unwrap();
        cells[11] = vocab.id("kettle:spout").unwrap();
        GridImage::new(4, 4, cells, 8).unwrap()
    }

    fn drink_chain() -> ReasoningChain {
        ReasoningChain::new("mug", "drink", "handle", "graspable")
    }

    fn pour_chain() -> ReasoningChain {
        ReasoningChain::new("kettle", "pour", "spout", "pourable")
    }

    fn simple_stub() -> (StubBackbone, GridImage) {
        let vocab = stub_vocab();
        let image = stub_image(&vocab);
        let stub = StubBackbone::new(
            vocab,
            vec![StubBranch {
                scene_word: "tabletop".into(),
                chain: drink_chain(),
            }],
        )
        .with_instruction("i want to drink water", drink_chain())
        .with_instruction("i want to have tea", pour_chain());
        (stub, image)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn observe_echoes_distinct_grid_tokens() {
        let (stub, image) = simple_stub();
        let context = observe(&image, &stub, &EngineConfig::default(), &mut rng()).unwrap();
        assert_eq!(context.scene, "tabletop");
        assert_eq!(
            context.objects,
            vec!["mug:body", "mug:handle", "kettle:base", "kettle:spout"]
        );
        assert!(context.is_valid_supervision());
    }

    #[test]
    fn observe_empty_grid_yields_invalid_supervision() {
        let (stub, _) = simple_stub();
        let empty = GridImage::new(3, 3, vec![0; 9], 8).unwrap();
        let context = observe(&empty, &stub, &EngineConfig::default(), &mut rng()).unwrap();
        assert!(context.objects.is_empty());
        assert!(!context.is_valid_supervision());
    }

    #[test]
    fn drop_events_changes_only_the_events_level() {
        let (stub, image) = simple_stub();
        let stub = stub
            .with_relations(vec!["mug beside kettle".into()])
            .with_events(vec!["use mug".into()]);
        let full = observe(&image, &stub, &EngineConfig::default(), &mut rng()).unwrap();
        let config = EngineConfig {
            ablation: AblationFlags {
                drop_events: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let dropped = observe(&image, &stub, &config, &mut rng()).unwrap();
        assert_eq!(full.events, vec!["use mug"]);
        assert!(dropped.events.is_empty());
        assert_eq!(dropped.scene, full.scene);
        assert_eq!(dropped.objects, full.objects);
        assert_eq!(dropped.relations, full.relations);
    }

    #[test]
    fn observe_overflow_without_forcing() {
        let vocab = stub_vocab();
        let image = stub_image(&vocab);
        let stub = StubBackbone::new(
            vocab,
            vec![StubBranch {
                scene_word: "kitchen tabletop kitchen tabletop".into(),
                chain: drink_chain(),
            }],
        );
        let config = EngineConfig {
            forced_decode: false,
            level_budget: 2,
            ..Default::default()
        };
        let err = observe(&image, &stub, &config, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::DecodeOverflow { .. }));
    }

    #[test]
    fn resolve_follows_instruction_table() {
        let (stub, image) = simple_stub();
        let config = EngineConfig::default();
        let context = observe(&image, &stub, &config, &mut rng()).unwrap();
        let instruction = Instruction::new("i want to have tea", InstructionKind::Intent);
        let (chain, state) =
            resolve(&image, &instruction, &context, &stub, &config, &mut rng()).unwrap();
        assert_eq!(chain, pour_chain());
        assert_eq!(state.hidden.len(), stub.hidden_dim());
    }

    #[test]
    fn drop_stage1_cot_yields_empty_chain_with_state() {
        let (stub, image) = simple_stub();
        let config = EngineConfig {
            ablation: AblationFlags {
                drop_stage1_cot: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let context = observe(&image, &stub, &config, &mut rng()).unwrap();
        let instruction = Instruction::new("i want to drink water", InstructionKind::Intent);
        let (chain, state) =
            resolve(&image, &instruction, &context, &stub, &config, &mut rng()).unwrap();
        assert_eq!(chain, ReasoningChain::default());
        assert_eq!(state.hidden.len(), stub.hidden_dim());
    }

    #[test]
    fn project_seg_identity_and_zero() {
        let state = SegState::new(vec![0.5, -1.0, 2.0]).unwrap();
        let identity = SegProjector::identity(3);
        assert_eq!(
            project_seg(&state, &identity).unwrap().values,
            vec![0.5, -1.0, 2.0]
        );
        let zero_state = SegState::new(vec![0.0; 3]).unwrap();
        assert_eq!(
            project_seg(&zero_state, &identity).unwrap().values,
            vec![0.0; 3]
        );
    }

    #[test]
    fn project_seg_matches_naive_product() {
        let mut rng = rng();
        let (d, pd) = (5, 4);
        let w = Mat::from_vec(
            d,
            pd,
            (0..d * pd)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect(),
        );
        let b = Mat::from_vec(
            1,
            pd,
            (0..pd)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect(),
        );
        let hidden: Vec<f64> = (0..d)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();

        // Independent route: iterate outputs first.
        let mut expected = vec![0.0; pd];
        #[allow(clippy::needless_range_loop)]
        for j in 0..pd {
            let mut acc = b.get(0, j);
            for i in 0..d {
                acc += hidden[i] * w.get(i, j);
            }
            expected[j] = acc;
        }

        let state = SegState::new(hidden).unwrap();
        let got = project_seg(&state, &SegProjector { w, b }).unwrap();
        for (g, e) in got.values.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_decoder_gives_all_half_and_empty_mask() {
        let features = FeatureGrid {
            width: 2,
            height: 2,
            rows: vec![vec![1.0, 0.0]; 4],
        };
        let decoder = MaskDecoder {
            u: Mat::zeros(2, 3),
            bias: 0.0,
        };
        let prompt = PromptEmbedding {
            values: vec![0.0; 3],
        };
        let soft = decode_mask(&prompt, &features, &decoder).unwrap();
        assert!(soft.probs.iter().all(|&p| p == 0.5));
        assert!(soft.binarize().is_empty());
    }

    #[test]
    fn decode_mask_is_cellwise_equivariant() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![0.5, 0.5, 0.0],
        ];
        let features = FeatureGrid {
            width: 2,
            height: 2,
            rows: rows.clone(),
        };
        let permuted = FeatureGrid {
            width: 2,
            height: 2,
            rows: vec![
                rows[2].clone(),
                rows[0].clone(),
                rows[3].clone(),
                rows[1].clone(),
            ],
        };
        let decoder = MaskDecoder::identity(3, -0.2);
        let prompt = PromptEmbedding {
            values: vec![0.7, -0.3, 0.9],
        };
        let a = decode_mask(&prompt, &features, &decoder).unwrap();
        let b = decode_mask(&prompt, &permuted, &decoder).unwrap();
        assert_eq!(b.probs, vec![a.probs[2], a.probs[0], a.probs[3], a.probs[1]]);
    }

    #[test]
    fn decode_mask_checks_dimensions() {
        let features = FeatureGrid {
            width: 2,
            height: 2,
            rows: vec![vec![1.0, 0.0]; 4],
        };
        let decoder = MaskDecoder::identity(3, 0.0);
        let prompt = PromptEmbedding {
            values: vec![0.0; 3],
        };
        assert!(matches!(
            decode_mask(&prompt, &features, &decoder).unwrap_err(),
            Error::LengthMismatch { .. }
        ));
    }

    #[test]
    fn segment_stub_pipeline_produces_exact_mask() {
        let (stub, image) = simple_stub();
        let instruction = Instruction::new("i want to drink water", InstructionKind::Intent);
        let result = segment(
            &image,
            &instruction,
            &stub,
            &EngineConfig::default(),
            &mut rng(),
        )
        .unwrap();
        assert!(result.emitted_seg);
        assert_eq!(result.chain, drink_chain());
        let target = stub.target_token(&drink_chain()).unwrap();
        let expected = BinaryMask::from_token(&image, target);
        assert_eq!(result.mask, expected);
        assert_eq!(
            result.soft_mask.probs,
            stub.expected_soft_mask(&drink_chain(), &image)
        );
    }

    #[test]
    fn drop_context_equals_empty_context_resolve() {
        let (stub, image) = simple_stub();
        let config = EngineConfig {
            ablation: AblationFlags {
                drop_context: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let instruction = Instruction::new("i want to drink water", InstructionKind::Intent);
        let via_segment = segment(&image, &instruction, &stub, &config, &mut rng()).unwrap();
        let (chain, state) = resolve(
            &image,
            &instruction,
            &SceneContext::default(),
            &stub,
            &config,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(via_segment.context, SceneContext::default());
        assert_eq!(via_segment.chain, chain);
        let prompt = project_seg(&state, &stub.seg_projector()).unwrap();
        let soft = decode_mask(
            &prompt,
            &stub.encode_image(&image).unwrap(),
            &stub.mask_decoder(),
        )
        .unwrap();
        assert_eq!(via_segment.soft_mask, soft);
    }

    #[test]
    fn suppressed_seg_is_recorded_as_non_emission() {
        let (stub, image) = simple_stub();
        let stub = stub.suppress_seg();
        let config = EngineConfig {
            forced_decode: false,
            ..Default::default()
        };
        let instruction = Instruction::new("i want to drink water", InstructionKind::Intent);
        let result = segment(&image, &instruction, &stub, &config, &mut rng()).unwrap();
        assert!(!result.emitted_seg);
        assert!(result.mask.is_empty());
        assert!(result.soft_mask.probs.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn forced_decode_always_emits_seg() {
        let (stub, image) = simple_stub();
        let stub = stub.suppress_seg();
        let config = EngineConfig::default();
        let instruction = Instruction::new("i want to drink water", InstructionKind::Intent);
        let result = segment(&image, &instruction, &stub, &config, &mut rng()).unwrap();
        assert!(result.emitted_seg);
    }

    #[test]
    fn observation_ignores_the_instruction() {
        let (stub, image) = simple_stub();
        let config = EngineConfig::default();
        let mut contexts = Vec::new();
        for i in 0..10 {
            let instruction =
                Instruction::new(format!("i want to drink water {i}"), InstructionKind::Intent);
            let result = segment(&image, &instruction, &stub, &config, &mut rng()).unwrap();
            contexts.push(result.context);
        }
        for context in &contexts[1..] {
            assert_eq!(context, &contexts[0]);
        }
    }

    #[test]
    fn segment_is_deterministic() {
        let (stub, image) = simple_stub();
        let config = EngineConfig::default();
        let instruction = Instruction::new("i want to have tea", InstructionKind::Intent);
        let a = segment(&image, &instruction, &stub, &config, &mut rng()).unwrap();
        let b = segment(&image, &instruction, &stub, &config, &mut rng()).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.chain, b.chain);
        assert_eq!(a.context, b.context);
    }

    #[test]
    fn marginal_with_single_context_equals_segment() {
        let (stub, image) = simple_stub();
        let config = EngineConfig::default();
        let instruction = Instruction::new("i want to drink water", InstructionKind::Intent);
        let soft = segment(&image, &instruction, &stub, &config, &mut rng())
            .unwrap()
            .soft_mask;
        for k in [1, 4] {
            let estimate =
                marginal_estimate(&image, &instruction, &stub, &config, k, &mut rng()).unwrap();
            for (e, s) in estimate.probs.iter().zip(&soft.probs) {
                assert!((e - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn marginal_two_branch_stub_converges_to_average() {
        let vocab = stub_vocab();
        let image = stub_image(&vocab);
        let stub = StubBackbone::new(
            vocab,
            vec![
                StubBranch {
                    scene_word: "tabletop".into(),
                    chain: drink_chain(),
                },
                StubBranch {
                    scene_word: "kitchen".into(),
                    chain: pour_chain(),
                },
            ],
        );
        // No instruction table: the decoded branch decides the chain, so the
        // two contexts yield two different soft masks.
        let a = stub.expected_soft_mask(&drink_chain(), &image);
        let b = stub.expected_soft_mask(&pour_chain(), &image);
        let exact: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x + y) / 2.0).collect();

        let instruction = Instruction::new("i want to have tea", InstructionKind::Intent);
        let config = EngineConfig::default();
        let estimate = marginal_estimate(
            &image,
            &instruction,
            &stub,
            &config,
            512,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let worst = estimate
            .probs
            .iter()
            .zip(&exact)
            .map(|(e, x)| (e - x).abs())
            .fold(0.0f64, f64::max);
        assert!(worst < 0.05, "L-infinity error {worst}");
    }

    #[test]
    fn similarity_single_pair_is_unit() {
        let (stub, image) = simple_stub();
        let gt = BinaryMask::from_token(&image, stub.target_token(&drink_chain()).unwrap());
        let intents = vec![Instruction::new(
            "i want to drink water",
            InstructionKind::Intent,
        )];
        let matrix = similarity_matrix(
            &intents,
            &[(image, gt)],
            &stub,
            &EngineConfig::default(),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(matrix.len(), 1);
        assert!((matrix[0][0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn similarity_rejects_empty_and_mismatched_input() {
        let (stub, image) = simple_stub();
        let gt = BinaryMask::from_token(&image, stub.target_token(&drink_chain()).unwrap());
        let err = similarity_matrix::<_, ChaCha8Rng>(
            &[],
            &[],
            &stub,
            &EngineConfig::default(),
            &mut rng(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyInput));

        let intents = vec![
            Instruction::new("i want to drink water", InstructionKind::Intent),
            Instruction::new("i want to have tea", InstructionKind::Intent),
        ];
        let err = similarity_matrix(
            &intents,
            &[(image, gt)],
            &stub,
            &EngineConfig::default(),
            &mut rng(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }
}
