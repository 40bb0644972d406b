//! Symbol tables for graphemes and phonemes, and the polyphone dictionary.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::Lexicon;
use crate::error::{G2pError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    chars: Vec<String>,
    phonemes: Vec<String>,
}

/// Bijective id maps for characters and pinyin syllables. Ids 0 and 1 are
/// reserved for padding and unknown symbols in both tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    chars: Vec<String>,
    phonemes: Vec<String>,
    char_index: HashMap<char, usize>,
    phoneme_index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        Vocabulary {
            chars: vec![PAD_TOKEN.into(), UNK_TOKEN.into()],
            phonemes: vec![PAD_TOKEN.into(), UNK_TOKEN.into()],
            char_index: HashMap::new(),
            phoneme_index: HashMap::new(),
        }
    }

    pub fn add_char(&mut self, c: char) -> usize {
        if let Some(&id) = self.char_index.get(&c) {
            return id;
        }
        self.chars.push(c.to_string());
        self.char_index.insert(c, self.chars.len() - 1);
        self.chars.len() - 1
    }

    pub fn add_phoneme(&mut self, p: &str) -> usize {
        if let Some(&id) = self.phoneme_index.get(p) {
            return id;
        }
        self.phonemes.push(p.to_string());
        self.phoneme_index.insert(p.to_string(), self.phonemes.len() - 1);
        self.phonemes.len() - 1
    }

    pub fn char_id(&self, c: char) -> Option<usize> {
        self.char_index.get(&c).copied()
    }

    /// Id for `c`, falling back to [`UNK`].
    pub fn char_id_or_unk(&self, c: char) -> usize {
        self.char_id(c).unwrap_or(UNK)
    }

    pub fn phoneme_id(&self, p: &str) -> Option<usize> {
        self.phoneme_index.get(p).copied()
    }

    pub fn char_symbol(&self, id: usize) -> &str {
        &self.chars[id]
    }

    pub fn phoneme(&self, id: usize) -> &str {
        &self.phonemes[id]
    }

    pub fn num_chars(&self) -> usize {
        self.chars.len()
    }

    pub fn num_phonemes(&self) -> usize {
        self.phonemes.len()
    }
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = G2pError;

    fn try_from(repr: VocabularyRepr) -> Result<Self> {
        let reserved = |list: &[String]| list.len() >= 2 && list[PAD] == PAD_TOKEN && list[UNK] == UNK_TOKEN;
        if !reserved(&repr.chars) || !reserved(&repr.phonemes) {
            return Err(G2pError::Data("vocabulary is missing reserved pad/unk entries".into()));
        }
        let mut vocab = Vocabulary::new();
        for s in &repr.chars[2..] {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) if vocab.char_id(c).is_none() => {
                    vocab.add_char(c);
                }
                _ => return Err(G2pError::Data(format!("bad or duplicate vocabulary character `{s}`"))),
            }
        }
        for p in &repr.phonemes[2..] {
            if vocab.phoneme_id(p).is_some() {
                return Err(G2pError::Data(format!("duplicate phoneme `{p}`")));
            }
            vocab.add_phoneme(p);
        }
        Ok(vocab)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            chars: v.chars,
            phonemes: v.phonemes,
        }
    }
}

/// Candidate phoneme ids per character. A character is a polyphone when it
/// has two or more candidates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolyphoneDictionary {
    entries: BTreeMap<char, Vec<usize>>,
}

impl PolyphoneDictionary {
    /// Resolves a lexicon against `vocab`, registering any new phonemes.
    pub fn from_lexicon(lexicon: &Lexicon, vocab: &mut Vocabulary) -> Self {
        let entries = lexicon
            .iter()
            .map(|(c, cands)| (*c, cands.iter().map(|p| vocab.add_phoneme(p)).collect()))
            .collect();
        PolyphoneDictionary { entries }
    }

    /// Resolves a lexicon against a fixed vocabulary; unknown phonemes are dropped.
    pub fn from_lexicon_fixed(lexicon: &Lexicon, vocab: &Vocabulary) -> Self {
        let entries = lexicon
            .iter()
            .filter_map(|(c, cands)| {
                let ids: Vec<usize> = cands.iter().filter_map(|p| vocab.phoneme_id(p)).collect();
                (!ids.is_empty()).then_some((*c, ids))
            })
            .collect();
        PolyphoneDictionary { entries }
    }

    pub fn insert(&mut self, c: char, candidates: Vec<usize>) {
        assert!(!candidates.is_empty(), "dictionary entries need a candidate");
        self.entries.insert(c, candidates);
    }

    pub fn candidates(&self, c: char) -> Option<&[usize]> {
        self.entries.get(&c).map(Vec::as_slice)
    }

    pub fn is_polyphone(&self, c: char) -> bool {
        self.candidates(c).is_some_and(|cands| cands.len() >= 2)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&char, &Vec<usize>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks that every candidate id exists in `vocab`.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for (c, cands) in &self.entries {
            if let Some(&bad) = cands.iter().find(|&&id| id >= vocab.num_phonemes() || id < 2) {
                return Err(G2pError::Data(format!("dictionary entry {c} has invalid phoneme id {bad}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_roundtrip() {
        let mut v = Vocabulary::new();
        let a = v.add_char('为');
        assert_eq!(a, 2);
        assert_eq!(v.add_char('为'), 2);
        assert_eq!(v.char_id_or_unk('x'), UNK);
        v.add_phoneme("wei4");
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_duplicate_symbols() {
        let json = r#"{"chars":["<pad>","<unk>","a","a"],"phonemes":["<pad>","<unk>"]}"#;
        assert!(serde_json::from_str::<Vocabulary>(json).is_err());
    }

    #[test]
    fn polyphone_status() {
        let mut lex = Lexicon::default();
        lex.add('为', "wei4");
        lex.add('为', "wei2");
        lex.add('人', "ren2");
        let mut v = Vocabulary::new();
        let d = PolyphoneDictionary::from_lexicon(&lex, &mut v);
        assert!(d.is_polyphone('为'));
        assert!(!d.is_polyphone('人'));
        assert_eq!(d.candidates('为').unwrap().len(), 2);
        d.validate(&v).unwrap();
    }
}
