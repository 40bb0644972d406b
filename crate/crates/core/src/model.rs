//! The full G2P network: embedding, reinforcer, language model, and a single
//! classifier over the whole phoneme inventory, evaluated at polyphone
//! positions only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::Sample;
use crate::error::{G2pError, Result};
use crate::gradcheck::{grad_check_with, GradCheckReport};
use crate::params::{Component, ParamId, ParamStore};
use crate::reinforcer::{ReinforcerConfig, ReinforcerParams};
use crate::sequence::{add_positional, LanguageModel, LmConfig};
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{PolyphoneDictionary, Vocabulary, UNK};

/// Printed for characters the dictionary cannot resolve.
pub const UNKNOWN_SYLLABLE: &str = "?";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_chars: usize,
    pub num_phonemes: usize,
    pub reinforcer: ReinforcerConfig,
    pub lm: LmConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(G2pError::Config("embed_dim must be positive".into()));
        }
        if self.num_chars < 2 || self.num_phonemes < 2 {
            return Err(G2pError::Config("vocabularies must hold the reserved ids".into()));
        }
        self.reinforcer.validate()?;
        self.lm.validate(self.embed_dim)
    }
}

/// Parameter handles for the non-LM parts of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelIds {
    pub embedding: ParamId,
    pub positional: Option<ParamId>,
    pub reinforcer: ReinforcerParams,
    pub lm: LanguageModel,
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct G2pModel<S: Scalar = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
    pub ids: ModelIds,
    pub vocab: Vocabulary,
    pub dict: PolyphoneDictionary,
}

/// Nodes produced by one forward pass.
pub struct Forward {
    /// `K x V_phoneme`
    pub logits: Var,
    /// LM output, `T x D`.
    pub hidden: Var,
    /// Transformer attention maps as `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

/// Row lookup into the embedding table.
pub fn embed<S: Scalar>(g: &mut Graph<S>, table: Var, char_ids: &[usize]) -> Result<Var> {
    g.gather_rows(table, char_ids)
}

/// Selects the rows at ascending `positions`.
pub fn gather_polyphones<S: Scalar>(g: &mut Graph<S>, e_lm: Var, positions: &[usize]) -> Result<Var> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(G2pError::Data(format!("polyphone positions not ascending: {positions:?}")));
    }
    g.gather_rows(e_lm, positions)
}

pub fn classify<S: Scalar>(g: &mut Graph<S>, e_poly: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(e_poly, weight)?;
    g.add_row(y, bias)
}

/// Argmax per row. With `restrict`, only the dictionary candidates of the
/// row's character compete. Ties go to the lowest phoneme id.
pub fn predict<S: Scalar>(
    logits: &Tensor<S>,
    chars: &[char],
    dict: &PolyphoneDictionary,
    restrict: bool,
) -> Result<Vec<usize>> {
    let (k, v) = logits.dims2()?;
    if chars.len() != k {
        return Err(G2pError::shape("predict", logits.shape(), &[chars.len()]));
    }
    let argmax = |row: &[S], ids: &mut dyn Iterator<Item = usize>| {
        let mut best: Option<(usize, f64)> = None;
        for id in ids {
            let x = row[id].to_f64();
            match best {
                Some((b, bx)) if x < bx || (x == bx && id > b) => {}
                _ => best = Some((id, x)),
            }
        }
        best.map(|(id, _)| id)
    };
    (0..k)
        .map(|r| {
            let row = logits.row(r);
            if restrict {
                let cands = dict
                    .candidates(chars[r])
                    .ok_or_else(|| G2pError::Data(format!("character {} is not in the dictionary", chars[r])))?;
                if let Some(&bad) = cands.iter().find(|&&c| c >= v) {
                    return Err(G2pError::Index {
                        what: "phoneme",
                        index: bad,
                        size: v,
                    });
                }
                Ok(argmax(row, &mut cands.iter().copied()).expect("non-empty candidates"))
            } else {
                argmax(row, &mut (0..v)).ok_or_else(|| G2pError::Data("empty phoneme inventory".into()))
            }
        })
        .collect()
}

impl<S: Scalar> G2pModel<S> {
    /// Builds a freshly initialised model. Parameters are drawn from a
    /// ChaCha8 stream seeded with `seed` in registration order.
    pub fn new(
        embed_dim: usize,
        reinforcer: ReinforcerConfig,
        lm: LmConfig,
        vocab: Vocabulary,
        dict: PolyphoneDictionary,
        seed: u64,
    ) -> Result<Self> {
        let config = ModelConfig {
            embed_dim,
            num_chars: vocab.num_chars(),
            num_phonemes: vocab.num_phonemes(),
            reinforcer,
            lm,
        };
        Self::from_config(config, vocab, dict, seed)
    }

    pub fn from_config(config: ModelConfig, vocab: Vocabulary, dict: PolyphoneDictionary, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.num_chars != vocab.num_chars() || config.num_phonemes != vocab.num_phonemes() {
            return Err(G2pError::Config("model config and vocabulary sizes disagree".into()));
        }
        dict.validate(&vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let embedding = store.add_uniform("embedding", Component::Embedding, &[config.num_chars, d], 1.0, &mut rng);
        let reinforcer = ReinforcerParams::init(config.reinforcer, d, &mut store, &mut rng)?;
        let positional = config.lm.uses_positional().then(|| {
            store.add_uniform(
                "lm.positional",
                Component::Lm,
                &[config.lm.max_seq_len, d],
                0.1,
                &mut rng,
            )
        });
        let lm = LanguageModel::init(config.lm, d, &mut store, &mut rng)?;
        let bound = (1.0 / d as f64).sqrt();
        let classifier_weight = store.add_uniform(
            "classifier.weight",
            Component::Classifier,
            &[d, config.num_phonemes],
            bound,
            &mut rng,
        );
        let classifier_bias = store.add_uniform(
            "classifier.bias",
            Component::Classifier,
            &[config.num_phonemes],
            bound,
            &mut rng,
        );
        Ok(G2pModel {
            config,
            store,
            ids: ModelIds {
                embedding,
                positional,
                reinforcer,
                lm,
                classifier_weight,
                classifier_bias,
            },
            vocab,
            dict,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<T: Scalar>(&self) -> G2pModel<T> {
        G2pModel {
            config: self.config,
            store: self.store.cast(),
            ids: self.ids.clone(),
            vocab: self.vocab.clone(),
            dict: self.dict.clone(),
        }
    }

    /// embed → reinforcer → positions (Transformer) → LM → gather → classify.
    pub fn forward(&self, g: &mut Graph<S>, char_ids: &[usize], positions: &[usize]) -> Result<Forward> {
        let t = char_ids.len();
        if t > self.config.lm.max_seq_len {
            return Err(G2pError::Length {
                len: t,
                max: self.config.lm.max_seq_len,
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= t) {
            return Err(G2pError::Index {
                what: "polyphone position",
                index: p,
                size: t,
            });
        }
        let table = g.param(&self.store, self.ids.embedding);
        let e = embed(g, table, char_ids)?;
        let mut x = self.ids.reinforcer.forward(g, &self.store, e)?;
        if let Some(pos) = self.ids.positional {
            let pos = g.param(&self.store, pos);
            x = add_positional(g, x, pos)?;
        }
        let out = self.ids.lm.encode(g, &self.store, x, None)?;
        let poly = gather_polyphones(g, out.hidden, positions)?;
        let w = g.param(&self.store, self.ids.classifier_weight);
        let b = g.param(&self.store, self.ids.classifier_bias);
        let logits = classify(g, poly, w, b)?;
        Ok(Forward {
            logits,
            hidden: out.hidden,
            attention: out.attention,
        })
    }

    /// Logits at the polyphone positions of a sample.
    pub fn logits(&self, sample: &Sample) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, &sample.char_ids, &sample.polyphone_positions)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean label-smoothed cross-entropy over every polyphone position in
    /// `batch`. `None` when the batch has no polyphones.
    pub fn batch_loss(&self, g: &mut Graph<S>, batch: &[&Sample], epsilon: f64) -> Result<Option<Var>> {
        let mut parts = Vec::new();
        let mut targets = Vec::new();
        for s in batch {
            if s.polyphone_positions.is_empty() {
                continue;
            }
            let f = self.forward(g, &s.char_ids, &s.polyphone_positions)?;
            parts.push(f.logits);
            targets.extend(s.polyphone_targets());
        }
        if parts.is_empty() {
            return Ok(None);
        }
        let logits = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };
        g.cross_entropy(logits, &targets, epsilon).map(Some)
    }

    /// Predicted phoneme ids at the sample's polyphone positions.
    pub fn predict_sample(&self, sample: &Sample, restrict: bool) -> Result<Vec<usize>> {
        let logits = self.logits(sample)?;
        let chars = sample.chars();
        let at: Vec<char> = sample.polyphone_positions.iter().map(|&p| chars[p]).collect();
        predict(&logits, &at, &self.dict, restrict)
    }

    /// Pinyin for every character of `text`. Single-reading characters come
    /// straight from the dictionary; polyphones are predicted with candidate
    /// restriction; characters missing from the dictionary give `"?"`.
    /// Text longer than the model's window is processed in consecutive chunks.
    pub fn convert(&self, text: &str) -> Result<Vec<String>> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::with_capacity(chars.len());
        for chunk in chars.chunks(self.config.lm.max_seq_len.max(1)) {
            let positions: Vec<usize> = chunk
                .iter()
                .enumerate()
                .filter(|(_, &c)| self.dict.is_polyphone(c))
                .map(|(i, _)| i)
                .collect();
            let predicted = if positions.is_empty() {
                Vec::new()
            } else {
                let ids: Vec<usize> = chunk.iter().map(|&c| self.vocab.char_id(c).unwrap_or(UNK)).collect();
                let mut g = Graph::new();
                let f = self.forward(&mut g, &ids, &positions)?;
                let at: Vec<char> = positions.iter().map(|&p| chunk[p]).collect();
                predict(g.value(f.logits), &at, &self.dict, true)?
            };
            let mut next = predicted.into_iter();
            for &c in chunk {
                let syllable = match self.dict.candidates(c) {
                    Some(cands) if cands.len() >= 2 => self.vocab.phoneme(next.next().expect("one per polyphone")),
                    Some(cands) => self.vocab.phoneme(cands[0]),
                    None => UNKNOWN_SYLLABLE,
                };
                out.push(syllable.to_string());
            }
        }
        Ok(out)
    }

    /// Re-draws every parameter uniformly in `±bound`; used by tests that
    /// need non-degenerate weights everywhere.
    pub fn randomize(&mut self, bound: f64, rng: &mut impl Rng) {
        for p in self.store.iter_mut() {
            for x in p.value.data_mut() {
                *x = S::from_f64(rng.gen_range(-bound..=bound));
            }
        }
    }
}

impl G2pModel<f64> {
    /// Central-difference check of the batch loss gradient with respect to
    /// every parameter, frozen or not.
    pub fn grad_check(&self, batch: &[&Sample], epsilon: f64, h: f64) -> Result<GradCheckReport> {
        let mut g = Graph::new();
        let loss = self
            .batch_loss(&mut g, batch, epsilon)?
            .ok_or_else(|| G2pError::Data("gradient check needs a polyphone position".into()))?;
        let grads = g.backward(loss)?;
        let params: Vec<Tensor<f64>> = self.store.iter().map(|(_, p)| p.value.clone()).collect();
        let analytic: Vec<Tensor<f64>> = self
            .store
            .iter()
            .map(|(id, p)| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        let mut probe = self.clone();
        grad_check_with(
            |ps| {
                for (p, v) in probe.store.iter_mut().zip(ps) {
                    p.value.data_mut().copy_from_slice(v.data());
                }
                let mut g = Graph::new();
                let loss = probe.batch_loss(&mut g, batch, epsilon)?.expect("positions checked above");
                Ok(g.value(loss).data()[0])
            },
            &params,
            &analytic,
            h,
        )
    }
}
