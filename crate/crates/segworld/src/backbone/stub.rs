//! A non-learned, table-driven backbone. Its decoded streams are fully
//! enumerable, so engine tests can state exact expected outputs.

use std::collections::BTreeMap;

use crate::backbone::{
    check_image_tokens, Backbone, FeatureGrid, MaskDecoder, Pass, SegProjector, StepOutput,
};
use crate::domain::{GridImage, ReasoningChain, SceneContext};
use crate::engine::context_tokens;
use crate::error::Result;
use crate::vocab::Vocab;

/// One sampleable observation outcome: the scene word identifies the branch
/// and the chain drives the stage-1 stream when no instruction-table entry
/// applies.
#[derive(Debug, Clone)]
pub struct StubBranch {
    pub scene_word: String,
    pub chain: ReasoningChain,
}

#[derive(Debug, Clone)]
pub struct StubBackbone {
    vocab: Vocab,
    branches: Vec<StubBranch>,
    chain_table: BTreeMap<String, ReasoningChain>,
    relations: Vec<String>,
    events: Vec<String>,
    /// When set, stage-1 never offers [SEG]; free decoding then runs out of
    /// budget and reports non-emission.
    seg_suppressed: bool,
}

impl StubBackbone {
    pub fn new(vocab: Vocab, branches: Vec<StubBranch>) -> Self {
        assert!(!branches.is_empty(), "stub needs at least one branch");
        StubBackbone {
            vocab,
            branches,
            chain_table: BTreeMap::new(),
            relations: Vec::new(),
            events: Vec::new(),
            seg_suppressed: false,
        }
    }

    /// Map an instruction text to the chain the stub will decode for it.
    pub fn with_instruction(mut self, instruction: &str, chain: ReasoningChain) -> Self {
        let key = self.normalize(instruction);
        self.chain_table.insert(key, chain);
        self
    }

    pub fn with_relations(mut self, relations: Vec<String>) -> Self {
        self.relations = relations;
        self
    }

    pub fn with_events(mut self, events: Vec<String>) -> Self {
        self.events = events;
        self
    }

    pub fn suppress_seg(mut self) -> Self {
        self.seg_suppressed = true;
        self
    }

    fn normalize(&self, text: &str) -> String {
        let ids = self.vocab.encode_text(text);
        self.vocab.decode(&ids).join(" ")
    }

    /// The context this branch emits for an image: the branch's scene word,
    /// the image's distinct non-background tokens as objects, and the fixed
    /// relation/event lists.
    pub fn branch_context(&self, branch: &StubBranch, image: &GridImage) -> SceneContext {
        let objects = image
            .distinct_tokens()
            .iter()
            .map(|&t| self.vocab.token(t).to_string())
            .collect();
        SceneContext {
            scene: branch.scene_word.clone(),
            objects,
            relations: self.relations.clone(),
            events: self.events.clone(),
        }
    }

    /// The exact chain the stub decodes for an instruction under a branch.
    pub fn chain_for(&self, instruction: &str, branch_index: usize) -> ReasoningChain {
        let key = self.normalize(instruction);
        self.chain_table
            .get(&key)
            .cloned()
            .unwrap_or_else(|| self.branches[branch_index].chain.clone())
    }

    /// Grid token whose cells the stub segments for a chain.
    pub fn target_token(&self, chain: &ReasoningChain) -> Option<u32> {
        self.vocab.id(&format!("{}:{}", chain.object, chain.part))
    }

    /// Exact soft mask the stub pipeline produces for a chain on an image:
    /// sigmoid(0.5) on target cells, sigmoid(-0.5) elsewhere.
    pub fn expected_soft_mask(&self, chain: &ReasoningChain, image: &GridImage) -> Vec<f64> {
        let target = self.target_token(chain);
        let hi = 1.0 / (1.0 + (-0.5f64).exp());
        let lo = 1.0 / (1.0 + (0.5f64).exp());
        image
            .cells()
            .iter()
            .map(|&cell| if Some(cell) == target { hi } else { lo })
            .collect()
    }

    fn stage0_streams(&self, image: &GridImage) -> Vec<Vec<u32>> {
        let mut streams = Vec::new();
        for branch in &self.branches {
            let context = self.branch_context(branch, image);
            for drop_events in [false, true] {
                let stream = context_tokens(&context, &self.vocab, drop_events);
                if !streams.contains(&stream) {
                    streams.push(stream);
                }
            }
        }
        streams
    }

    fn response_stream(&self, chain: &ReasoningChain) -> Vec<u32> {
        let sp = self.vocab.specials();
        let mut stream = Vec::new();
        for (delim, field) in [
            (sp.o, &chain.object),
            (sp.a, &chain.action),
            (sp.p, &chain.part),
            (sp.f, &chain.affordance),
        ] {
            stream.push(delim);
            stream.extend(self.vocab.encode_text(field));
        }
        stream.push(sp.seg);
        stream
    }

    /// Identify the branch encoded in a stage-1 prefix (the word right after
    /// <SCENE>), falling back to branch 0 when no context is present.
    fn branch_from_text(&self, text: &[u32]) -> usize {
        let sp = self.vocab.specials();
        let Some(pos) = text.iter().position(|&t| t == sp.scene) else {
            return 0;
        };
        let Some(&word) = text.get(pos + 1) else {
            return 0;
        };
        self.branches
            .iter()
            .position(|b| self.vocab.id(&b.scene_word) == Some(word))
            .unwrap_or(0)
    }

    fn stage1_desired(&self, text: &[u32]) -> Vec<u32> {
        let sp = self.vocab.specials();
        let Some(ins) = text.iter().position(|&t| t == sp.ins) else {
            return vec![sp.seg];
        };
        let resp_start = (ins + 1..text.len())
            .find(|&i| text[i] == sp.o || text[i] == sp.seg)
            .unwrap_or(text.len());
        let instruction = self.vocab.decode(&text[ins + 1..resp_start]).join(" ");
        let branch = self.branch_from_text(text);
        let chain = self.chain_for(&instruction, branch);
        let stream = self.response_stream(&chain);
        let emitted = text.len() - resp_start;
        if emitted < stream.len() {
            vec![stream[emitted]]
        } else {
            vec![sp.seg]
        }
    }

    fn logits_for(&self, desired: &[u32]) -> Vec<f64> {
        let mut logits = vec![-30.0; self.vocab.len()];
        for &t in desired {
            logits[t as usize] = 0.0;
        }
        logits
    }
}

impl Backbone for StubBackbone {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn hidden_dim(&self) -> usize {
        self.vocab.len()
    }

    fn encode_image(&self, image: &GridImage) -> Result<FeatureGrid> {
        check_image_tokens(image, &self.vocab)?;
        let v = self.vocab.len();
        let rows = image
            .cells()
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; v];
                row[t as usize] = 1.0;
                row
            })
            .collect();
        Ok(FeatureGrid {
            width: image.width(),
            height: image.height(),
            rows,
        })
    }

    fn step(&self, image: &GridImage, text: &[u32], pass: Pass) -> Result<StepOutput> {
        check_image_tokens(image, &self.vocab)?;
        let sp = self.vocab.specials();
        let v = self.vocab.len();

        let logits = match pass {
            Pass::Stage0 => {
                let streams = self.stage0_streams(image);
                let mut nexts: Vec<u32> = Vec::new();
                for stream in &streams {
                    if stream.len() > text.len() && stream.starts_with(text) {
                        let next = stream[text.len()];
                        if !nexts.contains(&next) {
                            nexts.push(next);
                        }
                    }
                }
                if nexts.is_empty() {
                    nexts.push(sp.end);
                }
                self.logits_for(&nexts)
            }
            Pass::Stage1 => {
                let mut desired = self.stage1_desired(text);
                if self.seg_suppressed {
                    desired = vec![self.vocab.word_ids().start.max(1)];
                }
                self.logits_for(&desired)
            }
        };

        // The hidden state only matters at the emitted [SEG] position: there it
        // is the one-hot of the grid token for the decoded chain's target part.
        let mut hidden = vec![0.0; v];
        if text.last() == Some(&sp.seg) {
            let ins = text.iter().position(|&t| t == sp.ins);
            if let Some(ins) = ins {
                let resp_start = (ins + 1..text.len())
                    .find(|&i| text[i] == sp.o || text[i] == sp.seg)
                    .unwrap_or(text.len());
                let instruction = self.vocab.decode(&text[ins + 1..resp_start]).join(" ");
                let branch = self.branch_from_text(text);
                let chain = self.chain_for(&instruction, branch);
                if text.len() - resp_start > 1 {
                    // A decoded chain precedes [SEG]; without one (stage-1 CoT
                    // dropped) the prompt stays zero.
                    if let Some(token) = self.target_token(&chain) {
                        hidden[token as usize] = 1.0;
                    }
                }
            }
        }

        Ok(StepOutput { logits, hidden })
    }

    fn seg_projector(&self) -> SegProjector {
        SegProjector::identity(self.vocab.len())
    }

    fn mask_decoder(&self) -> MaskDecoder {
        MaskDecoder::identity(self.vocab.len(), -0.5)
    }
}
