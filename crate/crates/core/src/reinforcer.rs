//! Neighbourhood reinforcers: map character embeddings `T x D` to contextual
//! representations `T x D` by mixing each position with its neighbours.
//!
//! Two variants are provided:
//!
//! * **Conv**: a bare 1-D convolution with kernel `k`, padding `(k-1)/2`,
//!   stride 1. No activation and no residual.
//! * **SSO** (shift and stack): zero-filled copies of the sequence shifted by
//!   `-s..=s` are concatenated along the channel axis (block order `-s` first)
//!   and projected back to `D`, followed by GELU and a residual connection:
//!   `out = gelu(stack(E) W + b) + E`.
//!
//! Before the activation both are the same family of linear maps; see
//! [`sso_weight_as_conv_kernel`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{shift_rows_tensor, Graph, Var};
use crate::error::{G2pError, Result};
use crate::params::{Component, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReinforcerKind {
    None,
    Conv,
    Sso,
}

impl fmt::Display for ReinforcerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReinforcerKind::None => "none",
            ReinforcerKind::Conv => "conv",
            ReinforcerKind::Sso => "sso",
        })
    }
}

impl FromStr for ReinforcerKind {
    type Err = G2pError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ReinforcerKind::None),
            "conv" => Ok(ReinforcerKind::Conv),
            "sso" => Ok(ReinforcerKind::Sso),
            other => Err(G2pError::Config(format!("unknown reinforcer `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReinforcerConfig {
    pub kind: ReinforcerKind,
    /// Convolution kernel width (odd).
    pub kernel_size: usize,
    /// SSO shift size `s`; the window is `2s + 1`.
    pub shift_size: usize,
    pub bias: bool,
}

impl Default for ReinforcerConfig {
    fn default() -> Self {
        ReinforcerConfig {
            kind: ReinforcerKind::None,
            kernel_size: 3,
            shift_size: 1,
            bias: true,
        }
    }
}

impl ReinforcerConfig {
    pub fn new(kind: ReinforcerKind) -> Self {
        ReinforcerConfig {
            kind,
            ..Self::default()
        }
    }

    pub fn window(&self) -> usize {
        2 * self.shift_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == ReinforcerKind::Conv && self.kernel_size.is_multiple_of(2) {
            return Err(G2pError::Config(format!(
                "conv kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars for embedding width `embed_dim`.
    pub fn param_count(&self, embed_dim: usize) -> usize {
        let bias = if self.bias { embed_dim } else { 0 };
        match self.kind {
            ReinforcerKind::None => 0,
            ReinforcerKind::Conv => self.kernel_size * embed_dim * embed_dim + bias,
            ReinforcerKind::Sso => self.window() * embed_dim * embed_dim + bias,
        }
    }
}

/// Parameter handles of an initialised reinforcer.
#[derive(Clone, Debug, PartialEq)]
pub struct ReinforcerParams {
    pub config: ReinforcerConfig,
    pub weight: Option<ParamId>,
    pub bias: Option<ParamId>,
}

impl ReinforcerParams {
    /// Registers weights initialised uniformly in `±sqrt(1 / fan_in)`.
    pub fn init<S: Scalar>(
        config: ReinforcerConfig,
        embed_dim: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = embed_dim;
        let (shape, fan_in) = match config.kind {
            ReinforcerKind::None => {
                return Ok(ReinforcerParams {
                    config,
                    weight: None,
                    bias: None,
                })
            }
            ReinforcerKind::Conv => (vec![d, d, config.kernel_size], d * config.kernel_size),
            ReinforcerKind::Sso => (vec![config.window() * d, d], config.window() * d),
        };
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = store.add_uniform("reinforcer.weight", Component::Reinforcer, &shape, bound, rng);
        let bias = config
            .bias
            .then(|| store.add_uniform("reinforcer.bias", Component::Reinforcer, &[d], bound, rng));
        Ok(ReinforcerParams {
            config,
            weight: Some(weight),
            bias,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, e_emb: Var) -> Result<Var> {
        let Some(weight) = self.weight else {
            return Ok(e_emb);
        };
        let w = g.param(store, weight);
        let b = self.bias.map(|b| g.param(store, b));
        match self.config.kind {
            ReinforcerKind::None => Ok(e_emb),
            ReinforcerKind::Conv => conv_reinforce(g, e_emb, w, b),
            ReinforcerKind::Sso => sso_reinforce(g, e_emb, w, b, self.config.shift_size),
        }
    }
}

/// `out[t] = e[t - k]` when `0 <= t - k < T`, zero otherwise.
pub fn shift_sequence<S: Scalar>(e: &Tensor<S>, k: isize) -> Result<Tensor<S>> {
    shift_rows_tensor(e, k)
}

/// Length-preserving convolution: `w` is `D x D x k`, padding `(k - 1) / 2`.
pub fn conv_reinforce<S: Scalar>(g: &mut Graph<S>, e_emb: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let k = match g.shape(w) {
        &[_, _, k] if k % 2 == 1 => k,
        other => return Err(G2pError::shape("conv_reinforce", g.shape(e_emb), other)),
    };
    g.conv1d(e_emb, w, bias, (k - 1) / 2, 1)
}

/// Concatenation of the shifted copies for `k = -s, ..., s`: `T x (2s+1)D`.
pub fn sso_stack<S: Scalar>(g: &mut Graph<S>, e_emb: Var, shift: usize) -> Result<Var> {
    let s = shift as isize;
    let parts = (-s..=s)
        .map(|k| if k == 0 { Ok(e_emb) } else { g.shift_rows(e_emb, k) })
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&parts)
}

/// `stack(E) W + b`, the linear part of the shift-and-stack reinforcer.
pub fn sso_pre_activation<S: Scalar>(
    g: &mut Graph<S>,
    e_emb: Var,
    w_bar: Var,
    bias: Option<Var>,
    shift: usize,
) -> Result<Var> {
    let (_, d) = g.value(e_emb).dims2()?;
    let window = 2 * shift + 1;
    if g.shape(w_bar) != [window * d, d] {
        return Err(G2pError::shape("sso_reinforce", &[window * d, d], g.shape(w_bar)));
    }
    let stacked = sso_stack(g, e_emb, shift)?;
    let proj = g.matmul(stacked, w_bar)?;
    match bias {
        Some(b) => g.add_row(proj, b),
        None => Ok(proj),
    }
}

/// `gelu(stack(E) W + b) + E`.
pub fn sso_reinforce<S: Scalar>(
    g: &mut Graph<S>,
    e_emb: Var,
    w_bar: Var,
    bias: Option<Var>,
    shift: usize,
) -> Result<Var> {
    let pre = sso_pre_activation(g, e_emb, w_bar, bias, shift)?;
    let act = g.gelu(pre);
    g.add(act, e_emb)
}

/// Rearranges an SSO projection `(2s+1)D x D` into the `D x D x (2s+1)`
/// convolution kernel computing the same pre-activation with padding `s`.
///
/// Block `b` of the stack holds the copy shifted by `b - s`, which a
/// cross-correlation reads at tap `2s - b`.
pub fn sso_weight_as_conv_kernel<S: Scalar>(w_bar: &Tensor<S>, shift: usize) -> Result<Tensor<S>> {
    let (rows, d) = w_bar.dims2()?;
    let window = 2 * shift + 1;
    if rows != window * d {
        return Err(G2pError::shape("sso_weight_as_conv_kernel", &[window * d, d], w_bar.shape()));
    }
    let mut kernel = Tensor::zeros(&[d, d, window]);
    for b in 0..window {
        let tap = 2 * shift - b;
        for i in 0..d {
            for o in 0..d {
                kernel.set(&[o, i, tap], w_bar.at(&[b * d + i, o]));
            }
        }
    }
    Ok(kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv1d, gelu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn column(values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[values.len(), 1], values).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shift_examples() {
        let e = column(&[1.0, 2.0, 3.0]);
        assert_eq!(shift_sequence(&e, 0).unwrap(), e);
        assert_eq!(shift_sequence(&e, -1).unwrap().data(), &[2.0, 3.0, 0.0]);
        assert_eq!(shift_sequence(&e, 1).unwrap().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(shift_sequence(&e, 3).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(shift_sequence(&e, -7).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(column(&[1.0, 2.0, 3.0]));
        let w = g.leaf(Tensor::full(&[1, 1, 3], 1.0));
        let y = conv_reinforce(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = random(&[4, 3], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3]);
        for d in 0..3 {
            k.set(&[d, d, 1], 1.0);
        }
        let x = g.leaf(e.clone());
        let w = g.leaf(k);
        let y = conv_reinforce(&mut g, x, w, None).unwrap();
        assert_eq!(g.value(y), &e);
    }

    #[test]
    fn conv_random_case_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, d) = (7, 4);
        let e = random(&[t, d], &mut rng);
        let w = random(&[d, d, 3], &mut rng);
        let mut g = Graph::<f64>::new();
        let (x, wv) = (g.leaf(e.clone()), g.leaf(w.clone()));
        let y = conv_reinforce(&mut g, x, wv, None).unwrap();
        for to in 0..t {
            for o in 0..d {
                let mut acc = 0.0;
                for j in 0..3 {
                    let src = to as i64 + j as i64 - 1;
                    if !(0..t as i64).contains(&src) {
                        continue;
                    }
                    for i in 0..d {
                        acc += w.at(&[o, i, j]) * e.at(&[src as usize, i]);
                    }
                }
                assert!((g.value(y).at(&[to, o]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stack_rows_for_three_tokens() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(column(&[1.0, 2.0, 3.0]));
        let s = sso_stack(&mut g, x, 1).unwrap();
        assert_eq!(
            g.value(s).data(),
            &[2.0, 1.0, 0.0, 3.0, 2.0, 1.0, 0.0, 3.0, 2.0]
        );
    }

    #[test]
    fn center_block_selector_gives_gelu_plus_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let e = random(&[5, d], &mut rng);
        let mut w_bar = Tensor::zeros(&[3 * d, d]);
        for i in 0..d {
            w_bar.set(&[d + i, i], 1.0);
        }
        let mut g = Graph::<f64>::new();
        let (x, w) = (g.leaf(e.clone()), g.leaf(w_bar));
        let y = sso_reinforce(&mut g, x, w, None, 1).unwrap();
        let expected = gelu(&e);
        for (i, v) in g.value(y).data().iter().enumerate() {
            assert!((v - (expected.data()[i] + e.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random(&[4, 2], &mut rng);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(e.clone());
        let w = g.leaf(Tensor::zeros(&[6, 2]));
        let y = sso_reinforce(&mut g, x, w, None, 1).unwrap();
        assert_eq!(g.value(y), &e);
    }

    #[test]
    fn sso_matches_reshaped_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for shift in [1usize, 2] {
            let (t, d) = (6, 3);
            let e = random(&[t, d], &mut rng);
            let w_bar = random(&[(2 * shift + 1) * d, d], &mut rng);
            let mut g = Graph::<f64>::new();
            let (x, w) = (g.leaf(e.clone()), g.leaf(w_bar.clone()));
            let pre = sso_pre_activation(&mut g, x, w, None, shift).unwrap();
            let kernel = sso_weight_as_conv_kernel(&w_bar, shift).unwrap();
            let conv = conv1d(&e, &kernel, None, shift, 1).unwrap();
            assert!(g.value(pre).max_abs_diff(&conv) < 1e-12);
        }
    }

    #[test]
    fn sso_rejects_bad_projection_shape() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3, 2]));
        let w = g.leaf(Tensor::zeros(&[4, 2]));
        assert!(sso_reinforce(&mut g, x, w, None, 1).is_err());
    }

    #[test]
    fn parameter_counts() {
        let conv = ReinforcerConfig::new(ReinforcerKind::Conv);
        let sso = ReinforcerConfig::new(ReinforcerKind::Sso);
        assert_eq!(conv.param_count(256), 3 * 256 * 256 + 256);
        assert_eq!(sso.param_count(256), conv.param_count(256));
        assert_eq!(ReinforcerConfig::new(ReinforcerKind::None).param_count(256), 0);

        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ReinforcerParams::init(sso, 16, &mut store, &mut rng).unwrap();
        assert_eq!(store.num_scalars(), sso.param_count(16));
    }

    #[test]
    fn even_kernel_rejected() {
        let cfg = ReinforcerConfig {
            kernel_size: 4,
            ..ReinforcerConfig::new(ReinforcerKind::Conv)
        };
        assert!(cfg.validate().is_err());
    }
}
