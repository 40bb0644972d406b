//! Data ingestion: lexicons, corpora, splits, the synthetic tone-sandhi
//! corpus, and word-length statistics.

mod cedict;
mod corpus;
mod databaker;
mod sandhi;
mod split;
mod stats;

pub use cedict::{is_syllable, parse_cedict, tone_of, CedictParse, Lexicon};
pub use corpus::{load_corpus, load_corpus_str, Corpus, LoadReport, Sample, VocabMode};
pub use databaker::{convert_databaker, DatabakerReport};
pub use sandhi::{
    apply_sandhi, gen_sandhi_corpus, pointwise_bayes_rate, sandhi_lexicon, SandhiCorpus, SANDHI_INVENTORY, YI_ANALOG,
};
pub use split::{split_corpus, Split};
pub use stats::{polyphone_share, word_length_stats, PolyphoneShare, WordLengthStats};
