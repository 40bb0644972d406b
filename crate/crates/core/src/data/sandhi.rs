//! Synthetic tone-sandhi corpus with a deterministic labeling oracle.
//!
//! Sentences are drawn uniformly from a 40-character inventory with fixed
//! base pronunciations. Two rules then rewrite tones in one left-to-right
//! pass, each looking at the *base* tone of the following syllable:
//!
//! * a tone-3 syllable before another tone-3 syllable becomes tone 2, so a
//!   run `3 3 3` comes out as `2 2 3`;
//! * the `一` analog reads tone 2 before a tone-4 syllable and tone 4 otherwise.
//!
//! The correct reading of every affected character depends only on its right
//! neighbour, which a pointwise classifier cannot see.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cedict::{tone_of, Lexicon};

/// The character whose reading depends on a following tone 4.
pub const YI_ANALOG: char = '一';

/// Characters and their base pronunciations.
pub const SANDHI_INVENTORY: [(char, &str); 40] = [
    // tone 3, subject to third-tone sandhi
    ('首', "shou3"),
    ('有', "you3"),
    ('两', "liang3"),
    ('我', "wo3"),
    ('种', "zhong3"),
    ('找', "zhao3"),
    ('里', "li3"),
    ('所', "suo3"),
    ('长', "zhang3"),
    ('请', "qing3"),
    ('处', "chu3"),
    ('好', "hao3"),
    ('小', "xiao3"),
    ('水', "shui3"),
    ('马', "ma3"),
    ('老', "lao3"),
    ('买', "mai3"),
    ('写', "xie3"),
    ('走', "zou3"),
    ('想', "xiang3"),
    (YI_ANALOG, "yi4"),
    // tone 4
    ('度', "du4"),
    ('视', "shi4"),
    ('面', "mian4"),
    ('到', "dao4"),
    ('问', "wen4"),
    ('个', "ge4"),
    ('在', "zai4"),
    ('这', "zhe4"),
    ('大', "da4"),
    // tone 1
    ('高', "gao1"),
    ('方', "fang1"),
    ('天', "tian1"),
    ('心', "xin1"),
    ('书', "shu1"),
    // tone 2; 埋 shares mai2 with the sandhi form of 买
    ('人', "ren2"),
    ('来', "lai2"),
    ('年', "nian2"),
    ('埋', "mai2"),
    // neutral
    ('的', "de5"),
];

const MIN_LEN: usize = 5;
const MAX_LEN: usize = 15;

fn base_of(c: char) -> Option<&'static str> {
    SANDHI_INVENTORY.iter().find(|(ch, _)| *ch == c).map(|(_, p)| *p)
}

fn with_tone(syllable: &str, tone: u8) -> String {
    format!("{}{}", &syllable[..syllable.len() - 1], tone)
}

/// Applies both rules to a sentence over the inventory. Returns `None` if a
/// character is outside the inventory.
pub fn apply_sandhi(chars: &[char]) -> Option<Vec<String>> {
    let base: Vec<&str> = chars.iter().map(|&c| base_of(c)).collect::<Option<_>>()?;
    let next_tone = |i: usize| base.get(i + 1).and_then(|s| tone_of(s));
    Some(
        chars
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if c == YI_ANALOG {
                    with_tone(base[i], if next_tone(i) == Some(4) { 2 } else { 4 })
                } else if tone_of(base[i]) == Some(3) && next_tone(i) == Some(3) {
                    with_tone(base[i], 2)
                } else {
                    base[i].to_string()
                }
            })
            .collect(),
    )
}

/// Lexicon of the inventory, listing the sandhi form of every affected
/// character as a second candidate.
pub fn sandhi_lexicon() -> Lexicon {
    let mut lex = Lexicon::default();
    for (c, base) in SANDHI_INVENTORY {
        lex.add(c, base);
        if c == YI_ANALOG || tone_of(base) == Some(3) {
            lex.add(c, &with_tone(base, 2));
        }
    }
    lex
}

#[derive(Clone, Debug, PartialEq)]
pub struct SandhiCorpus {
    /// Corpus file content, one `sentence\tsyllables` line per sentence.
    pub text: String,
    pub sentences: Vec<Vec<char>>,
    pub labels: Vec<Vec<String>>,
    pub lexicon: Lexicon,
    /// Best accuracy any classifier that sees only the character can reach on
    /// the polyphone positions of this corpus.
    pub pointwise_bayes_rate: f64,
}

pub fn gen_sandhi_corpus(n_sentences: usize, seed: u64) -> SandhiCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(n_sentences);
    let mut labels = Vec::with_capacity(n_sentences);
    let mut text = String::new();
    for _ in 0..n_sentences {
        let len = rng.gen_range(MIN_LEN..=MAX_LEN);
        let chars: Vec<char> = (0..len)
            .map(|_| SANDHI_INVENTORY[rng.gen_range(0..SANDHI_INVENTORY.len())].0)
            .collect();
        let gold = apply_sandhi(&chars).expect("inventory characters");
        text.extend(chars.iter());
        text.push('\t');
        text.push_str(&gold.join(" "));
        text.push('\n');
        sentences.push(chars);
        labels.push(gold);
    }
    let lexicon = sandhi_lexicon();
    let pointwise_bayes_rate = pointwise_bayes_rate(&sentences, &labels, &lexicon);
    SandhiCorpus {
        text,
        sentences,
        labels,
        lexicon,
        pointwise_bayes_rate,
    }
}

/// Accuracy of predicting, for each polyphone, its most frequent reading in
/// these sentences. Returns a fraction; 1.0 when there are no polyphones.
pub fn pointwise_bayes_rate(sentences: &[Vec<char>], labels: &[Vec<String>], lexicon: &Lexicon) -> f64 {
    let mut counts: HashMap<char, HashMap<&str, usize>> = HashMap::new();
    let mut total = 0usize;
    for (chars, gold) in sentences.iter().zip(labels) {
        for (&c, p) in chars.iter().zip(gold) {
            if lexicon.is_polyphone(c) {
                *counts.entry(c).or_default().entry(p.as_str()).or_default() += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return 1.0;
    }
    let best: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    best as f64 / total as f64
}
