//! Loading `<sentence>\t<pinyin pinyin ...>` corpora into aligned samples.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::cedict::{is_syllable, Lexicon};
use crate::error::{G2pError, Result};
use crate::vocab::{PolyphoneDictionary, Vocabulary, UNK};

/// One aligned sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub text: String,
    pub char_ids: Vec<usize>,
    pub phoneme_ids: Vec<usize>,
    /// Ascending positions whose character is a dictionary polyphone.
    pub polyphone_positions: Vec<usize>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.char_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.char_ids.is_empty()
    }

    pub fn chars(&self) -> Vec<char> {
        self.text.chars().collect()
    }

    /// Gold phoneme ids at the polyphone positions.
    pub fn polyphone_targets(&self) -> Vec<usize> {
        self.polyphone_positions.iter().map(|&p| self.phoneme_ids[p]).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub kept: usize,
    /// Lines whose character and syllable counts differ.
    pub dropped_mismatch: usize,
    /// Lines without a tab or with tokens that are not tone-numbered syllables.
    pub dropped_malformed: usize,
    /// 1-based numbers of every dropped line.
    pub dropped_lines: Vec<usize>,
}

pub enum VocabMode<'a> {
    /// Build the vocabulary and dictionary from this corpus (and lexicon).
    Build,
    /// Map onto existing tables; unseen symbols become UNK.
    Fixed {
        vocab: &'a Vocabulary,
        dict: &'a PolyphoneDictionary,
    },
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
    pub dict: PolyphoneDictionary,
    pub report: LoadReport,
}

struct RawLine {
    text: String,
    syllables: Vec<String>,
}

fn parse_lines(text: &str, report: &mut LoadReport) -> Vec<RawLine> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((sentence, pinyin)) = line.split_once('\t') else {
            report.dropped_malformed += 1;
            report.dropped_lines.push(i + 1);
            continue;
        };
        let sentence = sentence.trim();
        let syllables: Vec<String> = pinyin.split_whitespace().map(str::to_string).collect();
        if pinyin.contains('\t') || !syllables.iter().all(|s| is_syllable(s)) {
            report.dropped_malformed += 1;
            report.dropped_lines.push(i + 1);
            continue;
        }
        if sentence.chars().count() != syllables.len() || syllables.is_empty() {
            report.dropped_mismatch += 1;
            report.dropped_lines.push(i + 1);
            continue;
        }
        out.push(RawLine {
            text: sentence.to_string(),
            syllables,
        });
    }
    out
}

/// Loads corpus text. Without a lexicon in build mode, each character's
/// candidates are the pronunciations observed in the corpus.
pub fn load_corpus_str(text: &str, lexicon: Option<&Lexicon>, mode: VocabMode<'_>) -> Result<Corpus> {
    let mut report = LoadReport::default();
    let lines = parse_lines(text, &mut report);
    if lines.is_empty() {
        return Err(G2pError::Data("corpus contains no usable lines".into()));
    }
    report.kept = lines.len();

    let (vocab, dict) = match mode {
        VocabMode::Build => {
            let mut vocab = Vocabulary::new();
            let derived;
            let lexicon = match lexicon {
                Some(l) => l,
                None => {
                    let mut l = Lexicon::default();
                    for line in &lines {
                        for (c, s) in line.text.chars().zip(&line.syllables) {
                            l.add(c, s);
                        }
                    }
                    derived = l;
                    &derived
                }
            };
            for line in &lines {
                for (c, s) in line.text.chars().zip(&line.syllables) {
                    vocab.add_char(c);
                    vocab.add_phoneme(s);
                }
            }
            let dict = PolyphoneDictionary::from_lexicon(lexicon, &mut vocab);
            (vocab, dict)
        }
        VocabMode::Fixed { vocab, dict } => (vocab.clone(), dict.clone()),
    };

    let samples = lines
        .iter()
        .map(|line| {
            let chars: Vec<char> = line.text.chars().collect();
            Sample {
                text: line.text.clone(),
                char_ids: chars.iter().map(|&c| vocab.char_id_or_unk(c)).collect(),
                phoneme_ids: line.syllables.iter().map(|s| vocab.phoneme_id(s).unwrap_or(UNK)).collect(),
                polyphone_positions: chars
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| dict.is_polyphone(c))
                    .map(|(i, _)| i)
                    .collect(),
            }
        })
        .collect();

    info!(
        "loaded corpus: kept {}, dropped {} length-mismatched, {} malformed",
        report.kept, report.dropped_mismatch, report.dropped_malformed
    );
    Ok(Corpus {
        samples,
        vocab,
        dict,
        report,
    })
}

pub fn load_corpus(path: impl AsRef<Path>, lexicon: Option<&Lexicon>, mode: VocabMode<'_>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| G2pError::io(path, e))?;
    load_corpus_str(&text, lexicon, mode)
}
