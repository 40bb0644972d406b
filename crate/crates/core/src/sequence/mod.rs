//! Language-model stage: Transformer encoder or MLP-Mixer stack over the
//! reinforced character representations.

mod mixer;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{G2pError, Result};
use crate::params::{Component, ParamId, ParamStore};
use crate::tensor::Scalar;

pub use mixer::MixerLayer;
pub use transformer::TransformerLayer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmKind {
    Identity,
    Transformer,
    Mixer,
}

impl fmt::Display for LmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LmKind::Identity => "identity",
            LmKind::Transformer => "transformer",
            LmKind::Mixer => "mixer",
        })
    }
}

impl FromStr for LmKind {
    type Err = G2pError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(LmKind::Identity),
            "transformer" => Ok(LmKind::Transformer),
            "mixer" => Ok(LmKind::Mixer),
            other => Err(G2pError::Config(format!("unknown language model `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub kind: LmKind,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden width of the Transformer FFN and the Mixer channel MLP.
    pub ffn_dim: usize,
    /// Hidden width of the Mixer token MLP.
    pub token_ffn_dim: usize,
    /// Longest supported sentence; the Mixer always runs on this many rows.
    pub max_seq_len: usize,
    /// Learned absolute positions, Transformer only.
    pub positional: bool,
}

impl LmConfig {
    pub fn new(kind: LmKind, num_layers: usize, embed_dim: usize, max_seq_len: usize) -> Self {
        LmConfig {
            kind,
            num_layers: if kind == LmKind::Identity { 0 } else { num_layers },
            num_heads: 4,
            ffn_dim: 4 * embed_dim,
            token_ffn_dim: max_seq_len,
            max_seq_len,
            positional: kind == LmKind::Transformer,
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.kind == LmKind::Transformer && (self.num_heads == 0 || !embed_dim.is_multiple_of(self.num_heads)) {
            return Err(G2pError::Config(format!(
                "embed_dim {embed_dim} not divisible by {} heads",
                self.num_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(G2pError::Config("max_seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_positional(&self) -> bool {
        self.kind == LmKind::Transformer && self.positional
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LmParams {
    Identity,
    Transformer(Vec<TransformerLayer>),
    Mixer(Vec<MixerLayer>),
}

/// Output of [`LanguageModel::encode`].
pub struct LmOutput {
    pub hidden: Var,
    /// Attention probabilities as `[layer][head]` nodes of shape `T x T`
    /// (Transformer only).
    pub attention: Vec<Vec<Var>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub embed_dim: usize,
    pub params: LmParams,
}

impl LanguageModel {
    pub fn init<S: Scalar>(
        config: LmConfig,
        embed_dim: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(embed_dim)?;
        let params = match config.kind {
            LmKind::Identity => LmParams::Identity,
            LmKind::Transformer => LmParams::Transformer(
                (0..config.num_layers)
                    .map(|l| TransformerLayer::init(l, &config, embed_dim, store, rng))
                    .collect(),
            ),
            LmKind::Mixer => LmParams::Mixer(
                (0..config.num_layers)
                    .map(|l| MixerLayer::init(l, &config, embed_dim, store, rng))
                    .collect(),
            ),
        };
        Ok(LanguageModel {
            config,
            embed_dim,
            params,
        })
    }

    /// Runs the stack on `x` (`T x D`). `key_mask[t] == false` hides key `t`
    /// from Transformer attention; the Mixer ignores the mask.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        key_mask: Option<&[bool]>,
    ) -> Result<LmOutput> {
        let (t, _) = g.value(x).dims2()?;
        if t > self.config.max_seq_len {
            return Err(G2pError::Length {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        match &self.params {
            LmParams::Identity => Ok(LmOutput {
                hidden: x,
                attention: Vec::new(),
            }),
            LmParams::Transformer(layers) => transformer::encode(g, store, layers, self.config.num_heads, x, key_mask),
            LmParams::Mixer(layers) => mixer::encode(g, store, layers, self.config.max_seq_len, x),
        }
    }
}

/// Adds rows `0..T` of the learned position table to `x`.
pub fn add_positional<S: Scalar>(g: &mut Graph<S>, x: Var, pos_table: Var) -> Result<Var> {
    let (t, _) = g.value(x).dims2()?;
    let (max, _) = g.value(pos_table).dims2()?;
    if t > max {
        return Err(G2pError::Length { len: t, max });
    }
    let rows = g.slice_rows(pos_table, 0, t)?;
    g.add(x, rows)
}

pub(crate) fn linear<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

/// Registers a `fan_in x fan_out` weight and its bias, uniform in `±sqrt(1/fan_in)`.
pub(crate) fn add_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> (ParamId, ParamId) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let w = store.add_uniform(format!("{prefix}.weight"), Component::Lm, &[fan_in, fan_out], bound, rng);
    let b = store.add_uniform(format!("{prefix}.bias"), Component::Lm, &[fan_out], bound, rng);
    (w, b)
}

pub(crate) fn add_norm<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) -> (ParamId, ParamId) {
    use crate::tensor::Tensor;
    let gain = store.add(format!("{prefix}.gain"), Component::Lm, Tensor::full(&[dim], S::ONE));
    let bias = store.add(format!("{prefix}.bias"), Component::Lm, Tensor::zeros(&[dim]));
    (gain, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(kind: LmKind, layers: usize, seed: u64) -> (LanguageModel, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfg = LmConfig::new(kind, layers, 8, 10);
        cfg.num_heads = 2;
        let lm = LanguageModel::init(cfg, 8, &mut store, &mut rng).unwrap();
        (lm, store)
    }

    #[test]
    fn zero_layers_is_identity() {
        for kind in [LmKind::Transformer, LmKind::Mixer, LmKind::Identity] {
            let (lm, store) = build(kind, 0, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x0 = random(&[4, 8], &mut rng);
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let out = lm.encode(&mut g, &store, x, None).unwrap();
            assert_eq!(g.value(out.hidden), &x0);
            assert!(out.attention.is_empty());
        }
    }

    #[test]
    fn length_preserved_for_layer_sweep() {
        for kind in [LmKind::Transformer, LmKind::Mixer] {
            for layers in [1, 2, 4, 8] {
                let (lm, store) = build(kind, layers, 3);
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                let mut g = Graph::new();
                let x = g.leaf(random(&[7, 8], &mut rng));
                let out = lm.encode(&mut g, &store, x, None).unwrap();
                assert_eq!(g.shape(out.hidden), &[7, 8]);
            }
        }
    }

    #[test]
    fn too_long_input_is_length_error() {
        let (lm, store) = build(LmKind::Mixer, 1, 5);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[11, 8]));
        assert!(matches!(lm.encode(&mut g, &store, x, None), Err(G2pError::Length { .. })));
    }

    #[test]
    fn positional_zero_table_and_gradient_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = random(&[3, 4], &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone());
        let table = g.leaf(Tensor::zeros(&[6, 4]));
        let y = add_positional(&mut g, x, table).unwrap();
        assert_eq!(g.value(y), &x0);

        let table2 = g.leaf(random(&[6, 4], &mut rng));
        let y2 = add_positional(&mut g, x, table2).unwrap();
        let s = g.sum(y2);
        let grads = g.backward(s).unwrap();
        let gt = grads.get(table2).unwrap();
        assert!(gt.data()[..12].iter().all(|&v| v == 1.0));
        assert!(gt.data()[12..].iter().all(|&v| v == 0.0));

        let long = g.leaf(Tensor::zeros(&[7, 4]));
        assert!(add_positional(&mut g, long, table).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = LmConfig::new(LmKind::Transformer, 1, 6, 10);
        cfg.num_heads = 4;
        assert!(cfg.validate(6).is_err());
    }
}
