//! Closed-vocabulary prompt grammar, lexicon tagging, and noun-token selection.
//!
//! Prompts are realized from a structured scene by a tiny grammar:
//!
//! ```text
//! a <color> <shape> [ and a <color> <shape> | <relation> a <color> <shape> ]
//! ```
//!
//! Every word carries exactly one part-of-speech tag in the lexicon, so tagging
//! is a pure lookup.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Relation, SubjectSpec};

const BUILTIN_LEXICON: &str = include_str!("lexicon.txt");

/// Padding word used for unconditional prompts.
pub const PAD: &str = "[pad]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartOfSpeech {
    Noun,
    Adjective,
    Article,
    Conjunction,
    Preposition,
    Other,
}

impl PartOfSpeech {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Noun" => Self::Noun,
            "Adjective" => Self::Adjective,
            "Article" => Self::Article,
            "Conjunction" => Self::Conjunction,
            "Preposition" => Self::Preposition,
            "Other" => Self::Other,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub vocab_id: usize,
    pub pos: PartOfSpeech,
    pub position: usize,
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{:?}", self.surface, self.pos)
    }
}

#[derive(Debug, Clone)]
struct LexEntry {
    word: String,
    pos: PartOfSpeech,
}

/// Word table: surface form, part of speech, and vocabulary id.
#[derive(Debug, Clone)]
pub struct Lexicon {
    entries: Vec<LexEntry>,
    by_word: HashMap<String, usize>,
}

impl Lexicon {
    /// Parse `word POS vocab_id` lines; `#` starts a comment. Ids must be `0..n` without gaps.
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, LexEntry)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::Lexicon { line: i + 1, reason: reason.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [word, pos, id] = fields[..] else {
                return Err(bad("expected `word POS id`"));
            };
            let pos = PartOfSpeech::parse(pos).ok_or_else(|| bad("unknown part of speech"))?;
            let id: usize = id.parse().map_err(|_| bad("vocab id is not an integer"))?;
            rows.push((id, LexEntry { word: word.to_string(), pos }));
        }
        rows.sort_by_key(|(id, _)| *id);
        let mut by_word = HashMap::new();
        for (expected, (id, entry)) in rows.iter().enumerate() {
            if *id != expected {
                return Err(Error::Lexicon { line: 0, reason: format!("vocab ids must be dense, missing {expected}") });
            }
            if by_word.insert(entry.word.clone(), *id).is_some() {
                return Err(Error::Lexicon { line: 0, reason: format!("duplicate word `{}`", entry.word) });
            }
        }
        Ok(Self { entries: rows.into_iter().map(|(_, e)| e).collect(), by_word })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The lexicon shipped with the crate.
    pub fn builtin() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| Lexicon::parse(BUILTIN_LEXICON).expect("builtin lexicon is valid"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<(usize, PartOfSpeech)> {
        self.by_word.get(word).map(|&id| (id, self.entries[id].pos))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(|e| e.word.as_str())
    }

    pub fn pad_id(&self) -> Option<usize> {
        self.by_word.get(PAD).copied()
    }

    /// Split on whitespace and tag each word.
    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        text.split_whitespace()
            .enumerate()
            .map(|(position, w)| {
                let (vocab_id, pos) = self.lookup(w).ok_or_else(|| Error::UnknownWord(w.to_string()))?;
                Ok(Token { surface: w.to_string(), vocab_id, pos, position })
            })
            .collect()
    }
}

/// Tokenize with the builtin lexicon.
pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    Lexicon::builtin().tokenize(text)
}

/// Ordered token positions selected for attention calibration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounIndexSet {
    indices: Vec<usize>,
}

impl NounIndexSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    /// Every position `0..n`; the unselected variant used by the naive ablation.
    pub fn all(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::NoNounTokens);
        }
        Ok(Self { indices: (0..n).collect() })
    }

    /// Explicit positions; must be non-empty and strictly increasing.
    pub fn from_positions(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::NoNounTokens);
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("token positions must be strictly increasing: {indices:?}")));
        }
        Ok(Self { indices })
    }
}

/// Positions of all noun tokens, in order.
pub fn select_noun_indices(tokens: &[Token]) -> Result<NounIndexSet> {
    select_content_indices(tokens, false)
}

/// Noun positions, plus adjective positions when `include_adjectives`.
pub fn select_content_indices(tokens: &[Token], include_adjectives: bool) -> Result<NounIndexSet> {
    let indices: Vec<usize> = tokens
        .iter()
        .filter(|t| t.pos == PartOfSpeech::Noun || (include_adjectives && t.pos == PartOfSpeech::Adjective))
        .map(|t| t.position)
        .collect();
    if !tokens.iter().any(|t| t.pos == PartOfSpeech::Noun) {
        return Err(Error::NoNounTokens);
    }
    Ok(NounIndexSet { indices })
}

fn subject_phrase(s: &SubjectSpec) -> String {
    format!("a {} {}", s.color.word(), s.shape.word())
}

/// Deterministic text for a scene. A relation is only spoken for two-subject scenes.
pub fn realize_text(scene: &[SubjectSpec], relation: Relation) -> String {
    let mut text = String::new();
    for (i, s) in scene.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            text.push_str(relation.phrase().unwrap_or("and"));
            text.push(' ');
        }
        text.push_str(&subject_phrase(s));
    }
    text
}

/// Structured scene description plus its tagged text realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub scene: Vec<SubjectSpec>,
    pub relation: Relation,
    pub text: String,
    pub tokens: Vec<Token>,
}

impl PromptSpec {
    pub fn new(scene: Vec<SubjectSpec>, relation: Relation) -> Result<Self> {
        Self::with_lexicon(scene, relation, Lexicon::builtin())
    }

    pub fn with_lexicon(scene: Vec<SubjectSpec>, relation: Relation, lexicon: &Lexicon) -> Result<Self> {
        if scene.is_empty() || scene.len() > 2 {
            return Err(Error::InvalidScene(format!("expected 1 or 2 subjects, got {}", scene.len())));
        }
        if scene.len() == 1 && relation != Relation::None {
            return Err(Error::InvalidScene("a relation needs two subjects".into()));
        }
        for (i, a) in scene.iter().enumerate() {
            if scene[i + 1..].iter().any(|b| b.cell == a.cell) {
                return Err(Error::InvalidScene(format!("two subjects share cell {:?}", a.cell)));
            }
        }
        if scene.len() == 2 && !relation.holds(scene[0].cell, scene[1].cell) {
            return Err(Error::InvalidScene(format!("cells do not satisfy {relation:?}")));
        }
        let text = realize_text(&scene, relation);
        let tokens = lexicon.tokenize(&text)?;
        Ok(Self { scene, relation, text, tokens })
    }

    /// Noun positions paired with the subject each one names.
    pub fn subject_noun_positions(&self) -> Result<Vec<usize>> {
        let nouns = select_noun_indices(&self.tokens)?;
        if nouns.count() != self.scene.len() {
            return Err(Error::InvalidScene(format!(
                "{} nouns for {} subjects in `{}`",
                nouns.count(),
                self.scene.len(),
                self.text
            )));
        }
        Ok(nouns.indices().to_vec())
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.vocab_id).collect()
    }
}
