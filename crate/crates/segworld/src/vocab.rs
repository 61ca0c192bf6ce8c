//! Token vocabulary shared by the backbone, the engine, and the dataset files.
//!
//! The vocabulary is laid out as `[specials..][words..][grid tokens..]` with the
//! background token pinned to id 0 so that grid cells can reference it directly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BG: &str = "<BG>";
pub const SCENE: &str = "<SCENE>";
pub const OBJ: &str = "<OBJ>";
pub const REL: &str = "<REL>";
pub const EVT: &str = "<EVT>";
pub const O: &str = "<O>";
pub const A: &str = "<A>";
pub const P: &str = "<P>";
pub const F: &str = "<F>";
pub const SEG: &str = "[SEG]";
pub const END: &str = "<END>";
pub const SEP: &str = "<SEP>";
pub const INS: &str = "<INS>";
pub const UNK: &str = "<UNK>";

const SPECIALS: [&str; 14] = [
    BG, SCENE, OBJ, REL, EVT, O, A, P, F, SEG, END, SEP, INS, UNK,
];

/// Resolved ids of the reserved tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub bg: u32,
    pub scene: u32,
    pub obj: u32,
    pub rel: u32,
    pub evt: u32,
    pub o: u32,
    pub a: u32,
    pub p: u32,
    pub f: u32,
    pub seg: u32,
    pub end: u32,
    pub sep: u32,
    pub ins: u32,
    pub unk: u32,
}

/// Interned token table with class boundaries.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    word_start: u32,
    grid_start: u32,
    specials: Specials,
}

impl Vocab {
    /// Build the canonical layout from plain word tokens and grid tokens.
    pub fn from_parts(words: &[String], grid_tokens: &[String]) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let word_start = tokens.len() as u32;
        tokens.extend(words.iter().cloned());
        let grid_start = tokens.len() as u32;
        tokens.extend(grid_tokens.iter().cloned());

        let mut index = HashMap::new();
        for (i, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(Error::InvalidVocabulary {
                    reason: "empty token".into(),
                });
            }
            if index.insert(token.clone(), i as u32).is_some() {
                return Err(Error::InvalidVocabulary {
                    reason: format!("duplicate token {token:?}"),
                });
            }
        }
        let id = |s: &str| index[s];
        let specials = Specials {
            bg: id(BG),
            scene: id(SCENE),
            obj: id(OBJ),
            rel: id(REL),
            evt: id(EVT),
            o: id(O),
            a: id(A),
            p: id(P),
            f: id(F),
            seg: id(SEG),
            end: id(END),
            sep: id(SEP),
            ins: id(INS),
            unk: id(UNK),
        };
        Ok(Vocab {
            tokens,
            index,
            word_start,
            grid_start,
            specials,
        })
    }

    pub fn from_vocabularies(v: &Vocabularies) -> Result<Self> {
        Vocab::from_parts(&v.words, &v.grid_tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(self.specials.unk)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_word(&self, id: u32) -> bool {
        id >= self.word_start && id < self.grid_start
    }

    pub fn is_grid_token(&self, id: u32) -> bool {
        id == self.specials.bg || id >= self.grid_start
    }

    pub fn word_ids(&self) -> std::ops::Range<u32> {
        self.word_start..self.grid_start
    }

    /// Non-background grid tokens (the background token 0 is never emitted).
    pub fn grid_ids(&self) -> std::ops::Range<u32> {
        self.grid_start..self.tokens.len() as u32
    }

    /// Encode free text into word ids, folding unknown words to `<UNK>`.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize_words(text)
            .iter()
            .map(|w| self.id_or_unk(w))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&id| self.token(id)).collect()
    }
}

/// Case-fold, strip punctuation (apostrophes stay inside words), and split on
/// whitespace. This is the tokenization used for instruction word counts and
/// banned-term matching as well as for feeding text to the backbone.
pub fn tokenize_words(text: &str) -> Vec<String> {
    let folded: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    folded
        .split_whitespace()
        .map(|w| w.trim_matches('\'').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Dataset sidecar: the full token layout plus the controlled vocabularies used
/// for exact-match chain scoring. Stored as a JSON file next to the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub words: Vec<String>,
    pub grid_tokens: Vec<String>,
    pub objects: Vec<String>,
    pub actions: Vec<String>,
    pub parts: Vec<String>,
    pub affordances: Vec<String>,
    /// Canonical action per object, used by the rule-based grid describer.
    #[serde(default)]
    pub object_actions: std::collections::BTreeMap<String, String>,
}

impl Vocabularies {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path).map_err(|source| Error::UnreadableFile {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::from_parts(
            &["mug".into(), "handle".into(), "drink".into()],
            &["mug:body".into(), "mug:handle".into()],
        )
        .unwrap()
    }

    #[test]
    fn background_is_token_zero() {
        let v = toy_vocab();
        assert_eq!(v.specials().bg, 0);
        assert_eq!(v.token(0), BG);
    }

    #[test]
    fn class_boundaries() {
        let v = toy_vocab();
        let mug = v.id("mug").unwrap();
        let grid = v.id("mug:handle").unwrap();
        assert!(v.is_word(mug));
        assert!(!v.is_grid_token(mug));
        assert!(v.is_grid_token(grid));
        assert!(v.is_grid_token(0));
        assert!(!v.is_word(v.specials().seg));
    }

    #[test]
    fn encode_folds_unknown_words() {
        let v = toy_vocab();
        let ids = v.encode_text("Drink from the MUG!");
        assert_eq!(ids[0], v.id("drink").unwrap());
        assert_eq!(ids[1], v.specials().unk);
        assert_eq!(ids[3], v.id("mug").unwrap());
    }

    #[test]
    fn duplicate_tokens_rejected() {
        let err = Vocab::from_parts(&["mug".into(), "mug".into()], &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidVocabulary { .. }));
    }

    #[test]
    fn tokenize_strips_punctuation_keeps_contractions() {
        assert_eq!(
            tokenize_words("I'd really like tea-time, now."),
            vec!["i'd", "really", "like", "tea", "time", "now"]
        );
        assert_eq!(tokenize_words("I want to drink water.").len(), 5);
    }
}
