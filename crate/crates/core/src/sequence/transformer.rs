//! Post-norm Transformer encoder layers.

use rand::Rng;

use super::{add_linear, add_norm, linear, LmConfig, LmOutput};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Component, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerLayer {
    pub query: (ParamId, ParamId),
    /// No bias: it would shift every score in a row equally, which softmax
    /// cancels, so its gradient is identically zero.
    pub key: ParamId,
    pub value: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub norm1: (ParamId, ParamId),
    pub ffn_in: (ParamId, ParamId),
    pub ffn_out: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
}

impl TransformerLayer {
    pub fn init<S: Scalar>(
        index: usize,
        cfg: &LmConfig,
        d: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Self {
        let p = |name: &str| format!("lm.layer{index}.{name}");
        TransformerLayer {
            query: add_linear(store, &p("query"), d, d, rng),
            key: {
                let bound = (1.0 / d as f64).sqrt();
                store.add_uniform(p("key.weight"), Component::Lm, &[d, d], bound, rng)
            },
            value: add_linear(store, &p("value"), d, d, rng),
            output: add_linear(store, &p("output"), d, d, rng),
            norm1: add_norm(store, &p("norm1"), d),
            ffn_in: add_linear(store, &p("ffn_in"), d, cfg.ffn_dim, rng),
            ffn_out: add_linear(store, &p("ffn_out"), cfg.ffn_dim, d, rng),
            norm2: add_norm(store, &p("norm2"), d),
        }
    }

    /// One layer: `x = LN(x + MHA(x)); x = LN(x + FFN(x))`. Returns the new
    /// hidden state and the per-head attention maps.
    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        heads: usize,
        x: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let (_, d) = g.value(x).dims2()?;
        let dh = d / heads;
        let q = linear(g, store, x, self.query.0, self.query.1)?;
        let kw = g.param(store, self.key);
        let k = g.matmul(x, kw)?;
        let v = linear(g, store, x, self.value.0, self.value.1)?;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());

        let mut maps = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = g.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = g.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m)?;
            }
            let attn = g.softmax_rows(scores)?;
            outs.push(g.matmul(attn, vh)?);
            maps.push(attn);
        }
        let concat = g.concat_cols(&outs)?;
        let attn_out = linear(g, store, concat, self.output.0, self.output.1)?;
        let res = g.add(x, attn_out)?;
        let (g1, b1) = (g.param(store, self.norm1.0), g.param(store, self.norm1.1));
        let x = g.layer_norm(res, g1, b1)?;

        let hidden = linear(g, store, x, self.ffn_in.0, self.ffn_in.1)?;
        let hidden = g.gelu(hidden);
        let ffn = linear(g, store, hidden, self.ffn_out.0, self.ffn_out.1)?;
        let res = g.add(x, ffn)?;
        let (g2, b2) = (g.param(store, self.norm2.0), g.param(store, self.norm2.1));
        Ok((g.layer_norm(res, g2, b2)?, maps))
    }
}

pub(super) fn encode<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    layers: &[TransformerLayer],
    heads: usize,
    x: Var,
    key_mask: Option<&[bool]>,
) -> Result<LmOutput> {
    let (t, _) = g.value(x).dims2()?;
    let mask = match key_mask {
        Some(valid) if valid.iter().any(|v| !v) => {
            let mut m = Tensor::zeros(&[t, t]);
            for row in 0..t {
                for (col, &ok) in valid.iter().enumerate().take(t) {
                    if !ok {
                        m.set(&[row, col], S::from_f64(f64::NEG_INFINITY));
                    }
                }
            }
            Some(g.leaf(m))
        }
        _ => None,
    };
    let mut hidden = x;
    let mut attention = Vec::with_capacity(layers.len());
    for layer in layers {
        let (h, maps) = layer.forward(g, store, heads, hidden, mask)?;
        hidden = h;
        attention.push(maps);
    }
    Ok(LmOutput { hidden, attention })
}
