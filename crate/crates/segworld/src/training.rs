//! Joint training of the two-pass model: mask loss (BCE + dice) routed through
//! the [SEG] hidden state, language-modeling losses for both passes, the
//! scheduled-sampling curriculum over self-generated contexts, and the mixed
//! instruction pool.
//!
//! Both passes run in one differentiable graph per sample. Self-generated
//! contexts are decoded greedily outside the graph and re-enter it as plain
//! tokens, so no mask or stage-1 gradient can reach stage-0-only parameters;
//! stage 0 is supervised only by its own language-modeling loss against the
//! synthesized context.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, ParamId, Tape, Var};
use crate::backbone::{ModelConfig, Pass, TinyBackbone};
use crate::domain::{
    BinaryMask, Instruction, InstructionKind, LossWeights, Sample, SceneContext, ScheduleConfig,
};
use crate::engine::{context_tokens, observe, AblationFlags, DecodeMode, EngineConfig};
use crate::error::{Error, Result};
use crate::vocab::Vocab;

const DICE_EPS: f64 = 1e-6;

/// Dice loss on per-cell probabilities: 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps).
pub fn dice_loss(pred_probs: &[f64], gt: &BinaryMask) -> Result<f64> {
    if pred_probs.len() != gt.bits().len() {
        return Err(Error::DimensionMismatch {
            expected_width: gt.width(),
            expected_height: gt.height(),
            actual_width: pred_probs.len(),
            actual_height: 1,
        });
    }
    let mut pg = 0.0;
    let mut p_sum = 0.0;
    let mut g_sum = 0.0;
    for (&p, &g) in pred_probs.iter().zip(gt.bits()) {
        let g = if g { 1.0 } else { 0.0 };
        pg += p * g;
        p_sum += p;
        g_sum += g;
    }
    Ok(1.0 - (2.0 * pg + DICE_EPS) / (p_sum + g_sum + DICE_EPS))
}

/// Mean logistic cross-entropy over cells, computed from logits.
pub fn bce_loss(pred_logits: &[f64], gt: &BinaryMask) -> Result<f64> {
    if pred_logits.len() != gt.bits().len() {
        return Err(Error::DimensionMismatch {
            expected_width: gt.width(),
            expected_height: gt.height(),
            actual_width: pred_logits.len(),
            actual_height: 1,
        });
    }
    let mut total = 0.0;
    for (&z, &g) in pred_logits.iter().zip(gt.bits()) {
        let t = if g { 1.0 } else { 0.0 };
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    Ok(total / pred_logits.len() as f64)
}

/// Mean negative log-probability of the target tokens. `token_logprobs[i]`
/// holds the model's log-distribution at response position i.
pub fn lm_loss(token_logprobs: &[Vec<f64>], target_tokens: &[u32]) -> Result<f64> {
    if token_logprobs.len() != target_tokens.len() {
        return Err(Error::LengthMismatch {
            expected: target_tokens.len(),
            actual: token_logprobs.len(),
        });
    }
    if target_tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut total = 0.0;
    for (row, &target) in token_logprobs.iter().zip(target_tokens) {
        let target = target as usize;
        if target >= row.len() {
            return Err(Error::LengthMismatch {
                expected: row.len(),
                actual: target,
            });
        }
        total -= row[target];
    }
    Ok(total / target_tokens.len() as f64)
}

/// The joint objective: lambda_mask*(bce+dice) + lambda_0*lm0 + lambda_1*lm1.
pub fn total_loss(
    mask_logits: &[f64],
    mask_gt: &BinaryMask,
    lm0: f64,
    lm1: f64,
    weights: &LossWeights,
) -> Result<f64> {
    let bce = bce_loss(mask_logits, mask_gt)?;
    let probs: Vec<f64> = mask_logits
        .iter()
        .map(|&z| 1.0 / (1.0 + (-z).exp()))
        .collect();
    let dice = dice_loss(&probs, mask_gt)?;
    Ok(weights.lambda_mask * (bce + dice) + weights.lambda_0 * lm0 + weights.lambda_1 * lm1)
}

/// Scheduled-sampling probability: min(t / warmup, 1) * p_max.
pub fn self_context_probability(t: u64, schedule: &ScheduleConfig) -> f64 {
    if schedule.warmup_steps == 0 || t >= schedule.warmup_steps {
        schedule.p_max
    } else {
        (t as f64 / schedule.warmup_steps as f64) * schedule.p_max
    }
}

/// Where the stage-1 context came from. Self-generated contexts are treated as
/// constants by the gradient computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextProvenance {
    Synthesized,
    SelfGenerated,
}

impl ContextProvenance {
    pub fn gradient_blocked(self) -> bool {
        matches!(self, ContextProvenance::SelfGenerated)
    }
}

/// One coin flip of the curriculum.
pub fn self_context_draw<R: Rng>(t: u64, schedule: &ScheduleConfig, rng: &mut R) -> bool {
    rng.random::<f64>() < self_context_probability(t, schedule)
}

/// Pick the stage-1 context: the self-generated one with probability
/// p_self(t), marked gradient-blocked, otherwise the synthesized supervision.
pub fn choose_context<R: Rng>(
    t: u64,
    schedule: &ScheduleConfig,
    rng: &mut R,
    synthesized: Option<&SceneContext>,
    self_generated: &SceneContext,
) -> Result<(SceneContext, ContextProvenance)> {
    let synthesized = synthesized.ok_or_else(|| Error::MissingSynthesizedContext {
        sample_id: String::new(),
    })?;
    if self_context_draw(t, schedule, rng) {
        Ok((self_generated.clone(), ContextProvenance::SelfGenerated))
    } else {
        Ok((synthesized.clone(), ContextProvenance::Synthesized))
    }
}

/// Draw the training instruction: intent with probability `intent_mix`, else
/// uniform over the available target-referential kinds.
pub fn sample_instruction<R: Rng>(
    sample: &Sample,
    intent_mix: f64,
    rng: &mut R,
) -> Result<Instruction> {
    if intent_mix > 0.0 && !sample.instructions.contains_key(&InstructionKind::Intent) {
        return Err(Error::MissingIntentInstruction {
            sample_id: sample.id.clone(),
        });
    }
    let take_intent = intent_mix > 0.0 && rng.random::<f64>() < intent_mix;
    if take_intent {
        return Ok(sample.instruction(InstructionKind::Intent).expect("checked"));
    }
    let referential: Vec<InstructionKind> = InstructionKind::target_referential()
        .into_iter()
        .filter(|k| sample.instructions.contains_key(k))
        .collect();
    if referential.is_empty() {
        // Intent is the only instruction present.
        return sample
            .instruction(InstructionKind::Intent)
            .ok_or_else(|| Error::InvalidSample {
                sample_id: sample.id.clone(),
                reason: "no instructions".into(),
            });
    }
    let kind = referential[rng.random_range(0..referential.len())];
    Ok(sample.instruction(kind).expect("checked"))
}

/// Training hyperparameters. `warmup_steps` must be set per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub intent_mix: f64,
    pub steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub model: ModelConfig,
    /// Evaluate on a train subset every this many steps (0 = only log losses).
    pub eval_every: u64,
    pub eval_limit: usize,
}

impl TrainConfig {
    pub fn new(warmup_steps: u64) -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            schedule: ScheduleConfig::new(warmup_steps),
            intent_mix: 0.2,
            steps: 300,
            learning_rate: 3e-3,
            batch_size: 4,
            seed: 0,
            ablation: AblationFlags::default(),
            model: ModelConfig::default(),
            eval_every: 0,
            eval_limit: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InvalidConfig {
            reason: reason.into(),
        };
        if !(0.0..=1.0).contains(&self.intent_mix) {
            return Err(bad("intent_mix must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.schedule.p_max) {
            return Err(bad("p_max must lie in [0,1]"));
        }
        if self.schedule.warmup_steps == 0 {
            return Err(bad("warmup_steps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad("learning_rate must be positive"));
        }
        if self.weights.lambda_mask < 0.0 || self.weights.lambda_0 < 0.0 || self.weights.lambda_1 < 0.0
        {
            return Err(bad("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Parse the flat `key = value` config format.
    pub fn from_flat_str(text: &str) -> Result<Self> {
        let mut config = TrainConfig::new(1);
        let mut saw_warmup = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidConfig {
                reason: format!("line {}: expected key = value", lineno + 1),
            })?;
            let key = key.trim();
            let value = value.trim();
            let parse_f64 = || -> Result<f64> {
                value.parse().map_err(|_| Error::InvalidConfig {
                    reason: format!("line {}: bad number {value:?}", lineno + 1),
                })
            };
            let parse_u64 = || -> Result<u64> {
                value.parse().map_err(|_| Error::InvalidConfig {
                    reason: format!("line {}: bad integer {value:?}", lineno + 1),
                })
            };
            let parse_bool = || -> Result<bool> {
                value.parse().map_err(|_| Error::InvalidConfig {
                    reason: format!("line {}: bad bool {value:?}", lineno + 1),
                })
            };
            match key {
                "lambda_mask" => config.weights.lambda_mask = parse_f64()?,
                "lambda_0" => config.weights.lambda_0 = parse_f64()?,
                "lambda_1" => config.weights.lambda_1 = parse_f64()?,
                "warmup_steps" => {
                    config.schedule.warmup_steps = parse_u64()?;
                    saw_warmup = true;
                }
                "p_max" => config.schedule.p_max = parse_f64()?,
                "intent_mix" => config.intent_mix = parse_f64()?,
                "steps" => config.steps = parse_u64()?,
                "learning_rate" => config.learning_rate = parse_f64()?,
                "batch_size" => config.batch_size = parse_u64()? as usize,
                "seed" => config.seed = parse_u64()?,
                "drop_events" => config.ablation.drop_events = parse_bool()?,
                "drop_context" => config.ablation.drop_context = parse_bool()?,
                "drop_stage1_cot" => config.ablation.drop_stage1_cot = parse_bool()?,
                "hidden_dim" => config.model.hidden_dim = parse_u64()? as usize,
                "n_layers" => config.model.n_layers = parse_u64()? as usize,
                "mlp_hidden" => config.model.mlp_hidden = parse_u64()? as usize,
                "prompt_dim" => config.model.prompt_dim = parse_u64()? as usize,
                "max_seq_len" => config.model.max_seq_len = parse_u64()? as usize,
                "init_scale" => config.model.init_scale = parse_f64()?,
                "eval_every" => config.eval_every = parse_u64()?,
                "eval_limit" => config.eval_limit = parse_u64()? as usize,
                other => {
                    return Err(Error::InvalidConfig {
                        reason: format!("line {}: unknown key {other:?}", lineno + 1),
                    })
                }
            }
        }
        if !saw_warmup {
            return Err(Error::InvalidConfig {
                reason: "warmup_steps is required".into(),
            });
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_flat_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("lambda_mask = {}\n", self.weights.lambda_mask));
        out.push_str(&format!("lambda_0 = {}\n", self.weights.lambda_0));
        out.push_str(&format!("lambda_1 = {}\n", self.weights.lambda_1));
        out.push_str(&format!("warmup_steps = {}\n", self.schedule.warmup_steps));
        out.push_str(&format!("p_max = {}\n", self.schedule.p_max));
        out.push_str(&format!("intent_mix = {}\n", self.intent_mix));
        out.push_str(&format!("steps = {}\n", self.steps));
        out.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("drop_events = {}\n", self.ablation.drop_events));
        out.push_str(&format!("drop_context = {}\n", self.ablation.drop_context));
        out.push_str(&format!(
            "drop_stage1_cot = {}\n",
            self.ablation.drop_stage1_cot
        ));
        out.push_str(&format!("hidden_dim = {}\n", self.model.hidden_dim));
        out.push_str(&format!("n_layers = {}\n", self.model.n_layers));
        out.push_str(&format!("mlp_hidden = {}\n", self.model.mlp_hidden));
        out.push_str(&format!("prompt_dim = {}\n", self.model.prompt_dim));
        out.push_str(&format!("max_seq_len = {}\n", self.model.max_seq_len));
        out.push_str(&format!("init_scale = {}\n", self.model.init_scale));
        out.push_str(&format!("eval_every = {}\n", self.eval_every));
        out.push_str(&format!("eval_limit = {}\n", self.eval_limit));
        out
    }
}

/// Monotone step counter of the curriculum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub step: u64,
}

/// Momentum-free adaptive update: each weight is scaled by the inverse root of
/// its bias-corrected second-moment estimate.
pub struct AdaptiveOptimizer {
    pub lr: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    second_moment: HashMap<ParamId, Mat>,
    frozen: HashSet<ParamId>,
}

impl AdaptiveOptimizer {
    pub fn new(lr: f64) -> Self {
        AdaptiveOptimizer {
            lr,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            second_moment: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn step(&mut self, model: &mut TinyBackbone, grads: &HashMap<ParamId, Mat>) {
        self.t += 1;
        let correction = 1.0 - self.beta2.powi(self.t as i32);
        for (&id, grad) in grads {
            if self.frozen.contains(&id) {
                continue;
            }
            let value = model.params_mut().get_mut(id);
            let moment = self
                .second_moment
                .entry(id)
                .or_insert_with(|| Mat::zeros(value.rows, value.cols));
            for k in 0..value.data.len() {
                let g = grad.data[k];
                moment.data[k] = self.beta2 * moment.data[k] + (1.0 - self.beta2) * g * g;
                let hat = moment.data[k] / correction;
                value.data[k] -= self.lr * g / (hat.sqrt() + self.eps);
            }
        }
    }
}

/// Handles into one sample's differentiable two-pass graph.
pub struct StepGraph {
    pub tape: Tape,
    /// Unweighted mask loss (bce + dice).
    pub mask: Var,
    pub lm0: Var,
    pub lm1: Var,
    /// Weighted total per the joint objective.
    pub total: Var,
}

/// Build the full differentiable forward for one sample: the stage-0 pass
/// teacher-forced on the synthesized context, the stage-1 pass teacher-forced
/// on the chosen context + instruction + chain response, and the mask head fed
/// by the [SEG] hidden state.
pub fn build_step_graph(
    model: &TinyBackbone,
    sample: &Sample,
    instruction: &Instruction,
    stage1_context: &SceneContext,
    weights: &LossWeights,
    ablation: &AblationFlags,
) -> Result<StepGraph> {
    let vocab = model.vocab();
    let sp = *vocab.specials();
    let synthesized = sample
        .observation
        .as_ref()
        .ok_or_else(|| Error::MissingSynthesizedContext {
            sample_id: sample.id.clone(),
        })?;

    let mut tape = Tape::new();

    // Stage 0: teacher-forced on the synthesized context.
    let text0 = context_tokens(synthesized, vocab, ablation.drop_events);
    let forward0 = model.forward_on_tape(&mut tape, &sample.image, &text0, Pass::Stage0)?;
    let logits0 = tape.slice_rows(forward0.logits, forward0.prefix_len - 1, text0.len());
    let lm0 = tape.mean_cross_entropy(logits0, text0.iter().map(|&t| t as usize).collect());

    // Stage 1: chosen context + instruction, then the chain response.
    let mut prefix1 = Vec::new();
    if !ablation.drop_context {
        prefix1.extend(context_tokens(stage1_context, vocab, ablation.drop_events));
    }
    prefix1.push(sp.ins);
    prefix1.extend(vocab.encode_text(&instruction.text));

    let mut response = Vec::new();
    if !ablation.drop_stage1_cot {
        for (delim, field) in [
            (sp.o, &sample.chain.object),
            (sp.a, &sample.chain.action),
            (sp.p, &sample.chain.part),
            (sp.f, &sample.chain.affordance),
        ] {
            response.push(delim);
            response.extend(vocab.encode_text(field));
        }
    }
    response.push(sp.seg);

    let mut text1 = prefix1.clone();
    text1.extend(&response);
    let forward1 = model.forward_on_tape(&mut tape, &sample.image, &text1, Pass::Stage1)?;
    let response_at = forward1.prefix_len + prefix1.len();
    let logits1 = tape.slice_rows(forward1.logits, response_at - 1, response.len());
    let lm1 = tape.mean_cross_entropy(logits1, response.iter().map(|&t| t as usize).collect());

    // Mask head: project the hidden state at the [SEG] position.
    let seq_len = forward1.prefix_len + text1.len();
    let seg_hidden = tape.slice_rows(forward1.hidden, seq_len - 1, 1);
    let project_w = tape.param(
        model.params().id("project.w").expect("project.w"),
        model.params().by_name("project.w").clone(),
    );
    let project_b = tape.param(
        model.params().id("project.b").expect("project.b"),
        model.params().by_name("project.b").clone(),
    );
    let prompt = tape.matmul(seg_hidden, project_w);
    let prompt = tape.add(prompt, project_b);

    let features = model.features_on_tape(&mut tape, &sample.image)?;
    let decoder_u = tape.param(
        model.params().id("decoder.u").expect("decoder.u"),
        model.params().by_name("decoder.u").clone(),
    );
    let decoder_b = tape.param(
        model.params().id("decoder.b").expect("decoder.b"),
        model.params().by_name("decoder.b").clone(),
    );
    let mapped = tape.matmul(features, decoder_u);
    let mask_logits = tape.matmul_nt(mapped, prompt);
    let mask_logits = tape.add_row(mask_logits, decoder_b);

    let gt: Vec<f64> = sample
        .mask_gt
        .bits()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let bce = tape.bce_with_logits_mean(mask_logits, gt.clone());

    let probs = tape.sigmoid(mask_logits);
    let gt_leaf = tape.leaf(Mat::column_vector(gt.clone()));
    let pg = tape.mul(probs, gt_leaf);
    let s_pg = tape.sum(pg);
    let s_pg2 = tape.scale(s_pg, 2.0);
    let eps = tape.scalar(DICE_EPS);
    let numerator = tape.add(s_pg2, eps);
    let s_p = tape.sum(probs);
    let g_sum: f64 = gt.iter().sum();
    let den_const = tape.scalar(g_sum + DICE_EPS);
    let denominator = tape.add(s_p, den_const);
    let ratio = tape.div(numerator, denominator);
    let one = tape.scalar(1.0);
    let dice = tape.sub(one, ratio);

    let mask = tape.add(bce, dice);
    let mask_w = tape.scale(mask, weights.lambda_mask);
    let lm0_w = tape.scale(lm0, weights.lambda_0);
    let lm1_w = tape.scale(lm1, weights.lambda_1);
    let partial = tape.add(mask_w, lm0_w);
    let total = tape.add(partial, lm1_w);

    Ok(StepGraph {
        tape,
        mask,
        lm0,
        lm1,
        total,
    })
}

/// Raw per-component losses plus the weighted total, averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mask: f64,
    pub lm0: f64,
    pub lm1: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub p_self: f64,
    /// Fraction of the batch trained on the intent instruction.
    pub intent_fraction: f64,
    /// Fraction of the batch conditioned on a self-generated context.
    pub self_fraction: f64,
}

fn engine_config_for_self_decode(ablation: &AblationFlags) -> EngineConfig {
    EngineConfig {
        ablation: *ablation,
        decode: DecodeMode::Greedy,
        forced_decode: true,
        ..EngineConfig::default()
    }
}

/// One optimizer step over a batch. Requires exclusive access to the model.
pub fn train_step(
    model: &mut TinyBackbone,
    batch: &[&Sample],
    state: &mut ScheduleState,
    optimizer: &mut AdaptiveOptimizer,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    assert!(!batch.is_empty(), "empty batch");
    let p_self = self_context_probability(state.step, &config.schedule);
    let mut accumulated: HashMap<ParamId, Mat> = HashMap::new();
    let mut breakdown = LossBreakdown::default();
    let mut intent_count = 0usize;
    let mut self_count = 0usize;
    let scale = 1.0 / batch.len() as f64;

    for sample in batch {
        let instruction = sample_instruction(sample, config.intent_mix, rng)?;
        if instruction.kind == InstructionKind::Intent {
            intent_count += 1;
        }
        let synthesized =
            sample
                .observation
                .as_ref()
                .ok_or_else(|| Error::MissingSynthesizedContext {
                    sample_id: sample.id.clone(),
                })?;
        // Same coin as `choose_context`; the self-generated context is only
        // decoded when the draw actually needs it.
        let use_self = self_context_draw(state.step, &config.schedule, rng);
        let stage1_context = if use_self && !config.ablation.drop_context {
            self_count += 1;
            observe(
                &sample.image,
                model,
                &engine_config_for_self_decode(&config.ablation),
                rng,
            )?
        } else {
            synthesized.clone()
        };

        let graph = build_step_graph(
            model,
            sample,
            &instruction,
            &stage1_context,
            &config.weights,
            &config.ablation,
        )?;
        let total = graph.tape.value(graph.total).scalar();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                detail: format!("sample {}", sample.id),
            });
        }
        breakdown.mask += graph.tape.value(graph.mask).scalar() * scale;
        breakdown.lm0 += graph.tape.value(graph.lm0).scalar() * scale;
        breakdown.lm1 += graph.tape.value(graph.lm1).scalar() * scale;
        breakdown.total += total * scale;

        let grads = graph.tape.backward(graph.total);
        for (id, mut grad) in grads.into_map() {
            for g in grad.data.iter_mut() {
                *g *= scale;
            }
            match accumulated.entry(id) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(grad);
                }
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    let acc = e.get_mut();
                    for (a, g) in acc.data.iter_mut().zip(&grad.data) {
                        *a += g;
                    }
                }
            }
        }
    }

    optimizer.step(model, &accumulated);
    state.step += 1;

    Ok(StepOutcome {
        breakdown,
        p_self,
        intent_fraction: intent_count as f64 / batch.len() as f64,
        self_fraction: self_count as f64 / batch.len() as f64,
    })
}

/// One JSON-lines record of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss_mask: f64,
    pub loss_lm0: f64,
    pub loss_lm1: f64,
    pub total: f64,
    pub p_self: f64,
    pub intent_fraction: f64,
}

/// Periodic evaluation snapshot taken during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: u64,
    pub miou: f64,
    pub seg_rate: f64,
}

pub struct TrainOutcome {
    pub model: TinyBackbone,
    pub log: Vec<LogEntry>,
    pub evals: Vec<EvalSnapshot>,
}

/// Full training loop: seeded batches of `train_step` with an optional
/// periodic train-subset evaluation.
pub fn train(samples: &[Sample], vocab: &Vocab, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    for sample in samples {
        sample.validate()?;
        if sample.observation.is_none() {
            return Err(Error::MissingSynthesizedContext {
                sample_id: sample.id.clone(),
            });
        }
    }

    let mut model = TinyBackbone::new(vocab.clone(), config.model.clone(), config.seed);
    let mut optimizer = AdaptiveOptimizer::new(config.learning_rate);
    let mut state = ScheduleState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = Vec::with_capacity(config.steps as usize);
    let mut evals = Vec::new();

    for _ in 0..config.steps {
        let batch: Vec<&Sample> = (0..config.batch_size)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let outcome = train_step(
            &mut model,
            &batch,
            &mut state,
            &mut optimizer,
            config,
            &mut rng,
        )?;
        log.push(LogEntry {
            step: state.step - 1,
            loss_mask: outcome.breakdown.mask,
            loss_lm0: outcome.breakdown.lm0,
            loss_lm1: outcome.breakdown.lm1,
            total: outcome.breakdown.total,
            p_self: outcome.p_self,
            intent_fraction: outcome.intent_fraction,
        });
        if config.eval_every > 0 && state.step % config.eval_every == 0 {
            let subset = &samples[..samples.len().min(config.eval_limit)];
            let eval_config = EngineConfig {
                ablation: config.ablation,
                ..EngineConfig::default()
            };
            let evaluation = crate::eval::evaluate(
                &model,
                subset,
                InstructionKind::Intent,
                &eval_config,
                config.seed,
            )?;
            evals.push(EvalSnapshot {
                step: state.step,
                miou: evaluation.report.miou,
                seg_rate: evaluation.report.seg_rate,
            });
        }
    }

    Ok(TrainOutcome { model, log, evals })
}

pub fn log_to_jsonl(log: &[LogEntry]) -> String {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry).expect("log entry"));
        out.push('\n');
    }
    out
}
