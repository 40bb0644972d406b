//! CC-CEDICT parsing and the per-character lexicon it yields.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{G2pError, Result};

/// Candidate pinyin syllables per character, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<char, Vec<String>>,
}

impl Lexicon {
    /// Adds a candidate unless already present.
    pub fn add(&mut self, c: char, syllable: &str) {
        let cands = self.entries.entry(c).or_default();
        if !cands.iter().any(|s| s == syllable) {
            cands.push(syllable.to_string());
        }
    }

    pub fn get(&self, c: char) -> Option<&[String]> {
        self.entries.get(&c).map(Vec::as_slice)
    }

    pub fn is_polyphone(&self, c: char) -> bool {
        self.get(c).is_some_and(|cands| cands.len() >= 2)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&char, &Vec<String>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `char<TAB>pinyin,pinyin,...` lines sorted by character.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (c, cands) in &self.entries {
            out.push(*c);
            out.push('\t');
            out.push_str(&cands.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || G2pError::Data(format!("lexicon line {}: `{line}`", lineno + 1));
            let (ch, cands) = line.split_once('\t').ok_or_else(bad)?;
            let mut it = ch.chars();
            let c = match (it.next(), it.next()) {
                (Some(c), None) => c,
                _ => return Err(bad()),
            };
            for syl in cands.split(',') {
                if !is_syllable(syl) {
                    return Err(bad());
                }
                lex.add(c, syl);
            }
        }
        Ok(lex)
    }
}

/// Latin letters followed by a single tone digit 1-5 (5 is the neutral tone).
pub fn is_syllable(s: &str) -> bool {
    let bytes = s.as_bytes();
    match bytes.split_last() {
        Some((&tone, body)) => {
            (b'1'..=b'5').contains(&tone) && !body.is_empty() && body.iter().all(u8::is_ascii_lowercase)
        }
        None => false,
    }
}

/// Tone digit of a syllable such as `wei4`.
pub fn tone_of(syllable: &str) -> Option<u8> {
    syllable
        .as_bytes()
        .last()
        .filter(|b| (b'1'..=b'5').contains(b))
        .map(|b| b - b'0')
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CedictParse {
    pub lexicon: Lexicon,
    /// Lines that did not follow `TRAD SIMP [pin yin] /gloss/`.
    pub skipped: usize,
}

/// Parses CC-CEDICT text into a single-character lexicon keyed by the
/// simplified form. Multi-character entries are ignored; malformed lines are
/// counted and skipped.
pub fn parse_cedict(text: &str) -> CedictParse {
    let mut out = CedictParse::default();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match parse_line(line) {
            Some(Some((c, syl))) => out.lexicon.add(c, &syl),
            Some(None) => {}
            None => out.skipped += 1,
        }
    }
    if out.skipped > 0 {
        warn!("skipped {} malformed CEDICT lines", out.skipped);
    }
    out
}

/// `None` for malformed lines, `Some(None)` for well-formed entries that are
/// not single characters.
fn parse_line(line: &str) -> Option<Option<(char, String)>> {
    let (_trad, rest) = line.split_once(' ')?;
    let (simp, rest) = rest.split_once(' ')?;
    let rest = rest.strip_prefix('[')?;
    let (pinyin, gloss) = rest.split_once(']')?;
    if !gloss.trim_start().starts_with('/') {
        return None;
    }
    let mut chars = simp.chars();
    let c = match (chars.next(), chars.next()) {
        (Some(c), None) => c,
        (Some(_), Some(_)) => return Some(None),
        _ => return None,
    };
    let syl = pinyin.trim().to_lowercase().replace("u:", "v");
    if !is_syllable(&syl) {
        return None;
    }
    Some(Some((c, syl)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_produce_nothing() {
        let p = parse_cedict("# CC-CEDICT\n#! version=1\n");
        assert!(p.lexicon.is_empty());
        assert_eq!(p.skipped, 0);
    }

    #[test]
    fn duplicate_entries_merge_in_order() {
        let text = "為 为 [wei4] /because of/for/\n為 为 [wei2] /as (in the capacity of)/to act as/\n";
        let p = parse_cedict(text);
        assert_eq!(p.lexicon.get('为').unwrap(), &["wei4", "wei2"]);
        assert!(p.lexicon.is_polyphone('为'));
    }

    #[test]
    fn multi_character_entries_are_excluded() {
        let p = parse_cedict("首長 首长 [shou3 zhang3] /senior official/\n");
        assert!(p.lexicon.is_empty());
        assert_eq!(p.skipped, 0);
    }

    #[test]
    fn normalisation_and_malformed_lines() {
        let text = "\
女 女 [Nu:3] /female/
這是壞的
X X [xyz] /not a syllable/
綠 绿 [lu:4] /green/
";
        let p = parse_cedict(text);
        assert_eq!(p.lexicon.get('女').unwrap(), &["nv3"]);
        assert_eq!(p.lexicon.get('绿').unwrap(), &["lv4"]);
        assert_eq!(p.skipped, 2);
    }

    #[test]
    fn tsv_roundtrip() {
        let text = "為 为 [wei4] /because/\n為 为 [wei2] /as/\n人 人 [ren2] /person/\n";
        let lex = parse_cedict(text).lexicon;
        let tsv = lex.to_tsv();
        // sorted by code point: 为 U+4E3A before 人 U+4EBA
        assert_eq!(tsv, "为\twei4,wei2\n人\tren2\n");
        assert_eq!(Lexicon::parse_tsv(&tsv).unwrap(), lex);
        assert!(Lexicon::parse_tsv("ab\tx1\n").is_err());
    }

    #[test]
    fn syllable_grammar() {
        assert!(is_syllable("de5"));
        assert!(is_syllable("lve4"));
        assert!(!is_syllable("wei"));
        assert!(!is_syllable("wei6"));
        assert!(!is_syllable("4"));
        assert_eq!(tone_of("shou3"), Some(3));
    }
}
