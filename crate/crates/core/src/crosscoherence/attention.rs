//! Multi-head scaled dot-product cross-attention with key masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, Error, Result};
use crate::nn::{init_layer_norm, init_linear, Graph, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub use_residual_norm: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            use_residual_norm: true,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(invalid!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model,
                self.heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Query, key, value and output projections under `{prefix}.{q,k,v,o}`,
/// plus `{prefix}.norm` when the residual path is enabled.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    rng: &mut impl Rng,
) {
    for part in ["q", "k", "v", "o"] {
        init_linear(
            store,
            &format!("{prefix}.{part}"),
            cfg.d_model,
            cfg.d_model,
            rng,
        );
    }
    if cfg.use_residual_norm {
        init_layer_norm(store, &format!("{prefix}.norm"), cfg.d_model);
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// One Lq×Lkv weight matrix per head.
    pub weights: Vec<Var>,
}

/// Attention of `queries` (Lq×d) over `keys_values` (Lkv×d).
///
/// Masked key positions (false) are excluded before the softmax and get
/// exactly zero weight. With the residual path enabled the result is
/// `LayerNorm(queries + attended)`.
pub fn cross_attention_with_weights(
    graph: &mut Graph<'_>,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    mask: Option<&[bool]>,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    cfg.validate()?;
    let lkv = graph.tape.value(keys_values).nrows();
    for (what, v) in [("queries", queries), ("keys", keys_values)] {
        let width = graph.tape.value(v).ncols();
        if width != cfg.d_model {
            return Err(Error::Shape(format!(
                "{prefix}: {what} have width {width}, expected {}",
                cfg.d_model
            )));
        }
    }
    if let Some(m) = mask {
        if m.len() != lkv {
            return Err(Error::Shape(format!(
                "{prefix}: mask has {} entries for {lkv} keys",
                m.len()
            )));
        }
        if !m.iter().any(|&x| x) {
            return Err(invalid!("{prefix}: every key position is masked"));
        }
    }
    let q = graph.linear(&format!("{prefix}.q"), queries)?;
    let k = graph.linear(&format!("{prefix}.k"), keys_values)?;
    let v = graph.linear(&format!("{prefix}.v"), keys_values)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                graph.tape.slice_cols(q, lo, hi),
                graph.tape.slice_cols(k, lo, hi),
                graph.tape.slice_cols(v, lo, hi),
            )
        };
        let kt = graph.tape.transpose(kh);
        let scores = graph.tape.matmul(qh, kt);
        let scores = graph.tape.scale(scores, scale);
        let a = graph.tape.softmax_rows(scores, mask);
        weights.push(a);
        heads.push(graph.tape.matmul(a, vh));
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        graph.tape.concat_cols(&heads)
    };
    let mut out = graph.linear(&format!("{prefix}.o"), joined)?;
    if cfg.use_residual_norm {
        let sum = graph.tape.add(queries, out);
        let gamma = graph.p(&format!("{prefix}.norm.gamma"))?;
        let beta = graph.p(&format!("{prefix}.norm.beta"))?;
        out = graph.tape.layer_norm(sum, gamma, beta, LAYER_NORM_EPS);
    }
    Ok(AttentionOutput {
        output: out,
        weights,
    })
}

pub fn cross_attention(
    graph: &mut Graph<'_>,
    prefix: &str,
    queries: Var,
    keys_values: Var,
    mask: Option<&[bool]>,
    cfg: &AttentionConfig,
) -> Result<Var> {
    Ok(cross_attention_with_weights(graph, prefix, queries, keys_values, mask, cfg)?.output)
}
