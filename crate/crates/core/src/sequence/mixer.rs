//! Pre-norm MLP-Mixer layers over a fixed, zero-padded token grid.

use rand::Rng;

use super::{add_linear, add_norm, linear, LmConfig, LmOutput};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct MixerLayer {
    pub norm1: (ParamId, ParamId),
    /// `L_max x token_ffn_dim`
    pub token_in: (ParamId, ParamId),
    /// `token_ffn_dim x L_max`
    pub token_out: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    pub channel_in: (ParamId, ParamId),
    pub channel_out: (ParamId, ParamId),
}

impl MixerLayer {
    pub fn init<S: Scalar>(
        index: usize,
        cfg: &LmConfig,
        d: usize,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Self {
        let p = |name: &str| format!("lm.layer{index}.{name}");
        let l = cfg.max_seq_len;
        MixerLayer {
            norm1: add_norm(store, &p("norm1"), d),
            token_in: add_linear(store, &p("token_in"), l, cfg.token_ffn_dim, rng),
            token_out: add_linear(store, &p("token_out"), cfg.token_ffn_dim, l, rng),
            norm2: add_norm(store, &p("norm2"), d),
            channel_in: add_linear(store, &p("channel_in"), d, cfg.ffn_dim, rng),
            channel_out: add_linear(store, &p("channel_out"), cfg.ffn_dim, d, rng),
        }
    }

    /// `x += T(MLP_tok(T(LN(x))))`, then `x += MLP_ch(LN(x))`.
    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let (n1g, n1b) = (g.param(store, self.norm1.0), g.param(store, self.norm1.1));
        let y = g.layer_norm(x, n1g, n1b)?;
        let yt = g.transpose(y)?;
        let h = linear(g, store, yt, self.token_in.0, self.token_in.1)?;
        let h = g.gelu(h);
        let z = linear(g, store, h, self.token_out.0, self.token_out.1)?;
        let z = g.transpose(z)?;
        let x = g.add(x, z)?;

        let (n2g, n2b) = (g.param(store, self.norm2.0), g.param(store, self.norm2.1));
        let y = g.layer_norm(x, n2g, n2b)?;
        let h = linear(g, store, y, self.channel_in.0, self.channel_in.1)?;
        let h = g.gelu(h);
        let z = linear(g, store, h, self.channel_out.0, self.channel_out.1)?;
        g.add(x, z)
    }
}

/// Pads `x` with zero rows to `max_len`, runs the stack, and slices the
/// original rows back out. Padding rows take part in token mixing.
pub(super) fn encode<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    layers: &[MixerLayer],
    max_len: usize,
    x: Var,
) -> Result<LmOutput> {
    if layers.is_empty() {
        return Ok(LmOutput {
            hidden: x,
            attention: Vec::new(),
        });
    }
    let (t, _) = g.value(x).dims2()?;
    let mut h = g.pad_rows(x, max_len)?;
    for layer in layers {
        h = layer.forward(g, store, h)?;
    }
    let hidden = g.slice_rows(h, 0, t)?;
    Ok(LmOutput {
        hidden,
        attention: Vec::new(),
    })
}
