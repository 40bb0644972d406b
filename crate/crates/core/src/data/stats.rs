//! Word-length histograms over pre-segmented text and polyphone shares.

use std::collections::HashSet;

use serde::Serialize;

use super::cedict::Lexicon;
use crate::error::{G2pError, Result};

pub const BUCKETS: [&str; 4] = ["1", "2", "3", ">3"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WordLengthStats {
    pub words: [usize; 4],
    /// Words containing at least one polyphone, by the same buckets.
    pub polyphonic_words: [usize; 4],
}

fn bucket(len: usize) -> usize {
    len.clamp(1, 4) - 1
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

impl WordLengthStats {
    pub fn total_words(&self) -> usize {
        self.words.iter().sum()
    }

    pub fn total_polyphonic(&self) -> usize {
        self.polyphonic_words.iter().sum()
    }

    pub fn pct_words(&self) -> [f64; 4] {
        self.words.map(|w| pct(w, self.total_words()))
    }

    /// All zeros when no word is polyphonic.
    pub fn pct_poly(&self) -> [f64; 4] {
        self.polyphonic_words.map(|w| pct(w, self.total_polyphonic()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,words,polyphonic_words,pct_words,pct_poly\n");
        let (pw, pp) = (self.pct_words(), self.pct_poly());
        for i in 0..4 {
            out.push_str(&format!(
                "{},{},{},{:.2},{:.2}\n",
                BUCKETS[i], self.words[i], self.polyphonic_words[i], pw[i], pp[i]
            ));
        }
        out
    }
}

/// Counts whitespace-separated words by character length.
pub fn word_length_stats(text: &str, lexicon: &Lexicon) -> Result<WordLengthStats> {
    let mut stats = WordLengthStats {
        words: [0; 4],
        polyphonic_words: [0; 4],
    };
    for word in text.split_whitespace() {
        let b = bucket(word.chars().count());
        stats.words[b] += 1;
        if word.chars().any(|c| lexicon.is_polyphone(c)) {
            stats.polyphonic_words[b] += 1;
        }
    }
    if stats.total_words() == 0 {
        return Err(G2pError::Data("no words to count".into()));
    }
    Ok(stats)
}

/// Polyphone share counted over distinct characters and over running tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PolyphoneShare {
    pub types: usize,
    pub polyphone_types: usize,
    pub tokens: usize,
    pub polyphone_tokens: usize,
}

impl PolyphoneShare {
    pub fn type_pct(&self) -> f64 {
        pct(self.polyphone_types, self.types)
    }

    pub fn token_pct(&self) -> f64 {
        pct(self.polyphone_tokens, self.tokens)
    }
}

/// Whitespace is ignored; every other character counts.
pub fn polyphone_share(text: &str, lexicon: &Lexicon) -> PolyphoneShare {
    let mut seen = HashSet::new();
    let mut share = PolyphoneShare {
        types: 0,
        polyphone_types: 0,
        tokens: 0,
        polyphone_tokens: 0,
    };
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        let poly = lexicon.is_polyphone(c);
        share.tokens += 1;
        share.polyphone_tokens += poly as usize;
        if seen.insert(c) {
            share.types += 1;
            share.polyphone_types += poly as usize;
        }
    }
    share
}
