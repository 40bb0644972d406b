//! Attention heat-map export and side-by-side model comparisons.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::Sample;
use crate::error::{G2pError, Result};
use crate::model::G2pModel;
use crate::sequence::LmKind;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::UNK;

/// Raw attention maps `[layer][head]`, each `T x T`, for a character sequence.
pub fn attention_maps<S: Scalar>(model: &G2pModel<S>, char_ids: &[usize]) -> Result<Vec<Vec<Tensor<f64>>>> {
    if model.config.lm.kind != LmKind::Transformer || model.config.lm.num_layers == 0 {
        return Err(G2pError::Unsupported(format!(
            "attention export needs a Transformer with at least one layer, model has {} with {} layers",
            model.config.lm.kind, model.config.lm.num_layers
        )));
    }
    let mut g = Graph::new();
    let f = model.forward(&mut g, char_ids, &[])?;
    Ok(f.attention
        .iter()
        .map(|layer| layer.iter().map(|&v| g.value(v).cast()).collect())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionExport {
    pub labels: Vec<char>,
    /// Mean over all layers and heads.
    pub matrix: Vec<Vec<f64>>,
    pub target: usize,
}

impl AttentionExport {
    pub fn target_row(&self) -> &[f64] {
        &self.matrix[self.target]
    }

    /// Query characters down the side, key characters across the top.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query");
        for c in &self.labels {
            out.push(',');
            out.push(*c);
        }
        out.push('\n');
        for (c, row) in self.labels.iter().zip(&self.matrix) {
            out.push(*c);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Two-line CSV with the target position's attention distribution.
    pub fn target_csv(&self) -> String {
        let mut out = String::from("position,char");
        for c in &self.labels {
            out.push(',');
            out.push(*c);
        }
        out.push_str(&format!("\n{},{}", self.target, self.labels[self.target]));
        for v in self.target_row() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
        out
    }
}

/// Averages every layer's and head's attention map for `sentence`.
pub fn export_attention<S: Scalar>(model: &G2pModel<S>, sentence: &str, target: usize) -> Result<AttentionExport> {
    let labels: Vec<char> = sentence.chars().collect();
    if target >= labels.len() {
        return Err(G2pError::Index {
            what: "target position",
            index: target,
            size: labels.len(),
        });
    }
    let ids: Vec<usize> = labels.iter().map(|&c| model.vocab.char_id(c).unwrap_or(UNK)).collect();
    let maps = attention_maps(model, &ids)?;
    let t = labels.len();
    let mut matrix = vec![vec![0.0; t]; t];
    let count = maps.iter().map(Vec::len).sum::<usize>() as f64;
    for m in maps.iter().flatten() {
        for (i, row) in matrix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += m.at(&[i, j]);
            }
        }
    }
    for v in matrix.iter_mut().flatten() {
        *v /= count;
    }
    Ok(AttentionExport { labels, matrix, target })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseEntry {
    pub sentence: String,
    pub position: usize,
    pub character: char,
    pub gold: String,
    pub pred_a: String,
    pub pred_b: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CaseStudy {
    pub entries: Vec<CaseEntry>,
    pub a_right_b_wrong: usize,
    pub b_right_a_wrong: usize,
    pub both_wrong: usize,
}

impl CaseStudy {
    /// One block per disagreement: sentence, gold, and both predictions.
    pub fn to_text(&self, name_a: &str, name_b: &str) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\n  position {} ({}): gold {} | pred {} ({name_a}) / {} ({name_b})\n",
                e.sentence, e.position, e.character, e.gold, e.pred_a, e.pred_b
            ));
        }
        out.push_str(&format!(
            "disagreements: {}, {name_a} right: {}, {name_b} right: {}, both wrong: {}\n",
            self.entries.len(),
            self.a_right_b_wrong,
            self.b_right_a_wrong,
            self.both_wrong
        ));
        out
    }
}

/// Every polyphone position where the two models' restricted predictions
/// differ. Both models must share vocabulary and dictionary.
pub fn case_study_dump<S: Scalar, T: Scalar>(
    a: &G2pModel<S>,
    b: &G2pModel<T>,
    samples: &[Sample],
) -> Result<CaseStudy> {
    if a.vocab != b.vocab || a.dict != b.dict {
        return Err(G2pError::Data("case study models use different vocabularies".into()));
    }
    let mut study = CaseStudy::default();
    for s in samples.iter().filter(|s| !s.polyphone_positions.is_empty()) {
        let pa = a.predict_sample(s, true)?;
        let pb = b.predict_sample(s, true)?;
        let chars = s.chars();
        for ((&pos, gold), (x, y)) in s.polyphone_positions.iter().zip(s.polyphone_targets()).zip(pa.into_iter().zip(pb)) {
            if x == y {
                continue;
            }
            match (x == gold, y == gold) {
                (true, false) => study.a_right_b_wrong += 1,
                (false, true) => study.b_right_a_wrong += 1,
                _ => study.both_wrong += 1,
            }
            study.entries.push(CaseEntry {
                sentence: s.text.clone(),
                position: pos,
                character: chars[pos],
                gold: a.vocab.phoneme(gold).to_string(),
                pred_a: a.vocab.phoneme(x).to_string(),
                pred_b: a.vocab.phoneme(y).to_string(),
            });
        }
    }
    Ok(study)
}
