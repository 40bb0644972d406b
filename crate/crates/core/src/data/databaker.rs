//! Converter for the DataBaker prosody-labeling transcript.
//!
//! The source alternates two lines per utterance:
//!
//! ```text
//! 000001<TAB>卡尔普#1陪外孙#1玩滑梯#4。
//! <TAB>ka2 er2 pu3 pei2 wai4 sun1 wan2 hua2 ti1
//! ```
//!
//! Prosody marks (`#1`..`#4`) and every non-Han character are stripped, and the
//! pinyin is lowercased. Utterances whose character and syllable counts then
//! differ, or whose pinyin is not tone-numbered, are skipped and reported by
//! id rather than repaired.

use serde::Serialize;

use super::cedict::is_syllable;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DatabakerReport {
    pub converted: usize,
    /// Ids of utterances left out, with a reason.
    pub skipped: Vec<(String, String)>,
}

fn is_han(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF)
}

fn strip_marks(text: &str) -> String {
    let mut out = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '#' {
            while chars.peek().is_some_and(char::is_ascii_digit) {
                chars.next();
            }
        } else if is_han(c) {
            out.push(c);
        }
    }
    out
}

/// Returns corpus text in `sentence\tsyllables` form plus a report.
pub fn convert_databaker(source: &str) -> (String, DatabakerReport) {
    let mut report = DatabakerReport::default();
    let mut out = String::new();
    let mut lines = source.lines().map(|l| l.trim_start_matches('\u{feff}')).filter(|l| !l.trim().is_empty());
    while let Some(head) = lines.next() {
        let (id, text) = match head.split_once('\t').or_else(|| head.split_once(' ')) {
            Some((id, text)) if !head.starts_with(char::is_whitespace) => (id.trim().to_string(), text),
            _ => {
                report.skipped.push((head.trim().to_string(), "expected an id line".into()));
                continue;
            }
        };
        let Some(pinyin) = lines.next() else {
            report.skipped.push((id, "missing pinyin line".into()));
            break;
        };
        let sentence = strip_marks(text);
        let syllables: Vec<String> = pinyin.split_whitespace().map(str::to_lowercase).collect();
        if let Some(bad) = syllables.iter().find(|s| !is_syllable(s)) {
            report.skipped.push((id, format!("syllable `{bad}` has no tone digit")));
            continue;
        }
        let n = sentence.chars().count();
        if n != syllables.len() || n == 0 {
            report.skipped.push((id, format!("{n} characters vs {} syllables", syllables.len())));
            continue;
        }
        out.push_str(&sentence);
        out.push('\t');
        out.push_str(&syllables.join(" "));
        out.push('\n');
        report.converted += 1;
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_and_reports() {
        let src = "000001\t卡尔普#1陪外孙#1玩滑梯#4。\n\tka2 er2 pu3 pei2 wai4 sun1 wan2 hua2 ti1\n\
                   000002\t宝马#1配挂#1跛骡鞍#3，\n\tbao2 ma3 pei4 gua4 bo3\n\
                   000003\t你好#4！\n\tNI2 hao3\n";
        let (out, report) = convert_databaker(src);
        assert_eq!(out, "卡尔普陪外孙玩滑梯\tka2 er2 pu3 pei2 wai4 sun1 wan2 hua2 ti1\n你好\tni2 hao3\n");
        assert_eq!(report.converted, 2);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "000002");
    }

    #[test]
    fn erhua_without_tone_is_reported() {
        let (out, report) = convert_databaker("000009\t一点儿#4\n\tyi4 dianr\n");
        assert!(out.is_empty());
        assert_eq!(report.skipped[0].0, "000009");
    }
}
