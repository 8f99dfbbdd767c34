//! Perceiver-style attention: cross-attention from learned queries, a
//! grouped-query self-attention tower over the latent array, and the output
//! cross-attention used by the decoder. All blocks are pre-norm.

use std::sync::Arc;

use biocast_autograd::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{dropout, ForwardCtx, LayerNorm, Linear, Mlp, ParamBuilder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub kv_groups: usize,
    /// Self-attention layers after the encoder cross-attention.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_groups == 0 || self.dim == 0 {
            return Err(CoreError::Config("attention dims must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(CoreError::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        if self.heads % self.kv_groups != 0 {
            return Err(CoreError::Config(format!("{} heads not divisible by {} kv groups", self.heads, self.kv_groups)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Latent array together with its 3D factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub grid: [usize; 3],
}

impl LatentState {
    pub fn new(z: Tensor, grid: [usize; 3]) -> Result<Self> {
        let n: usize = grid.iter().product();
        if z.shape().len() != 2 || z.shape()[0] != n {
            return Err(CoreError::ShapeMismatch(format!("latent {:?} does not factor as {grid:?}", z.shape())));
        }
        if !z.all_finite() {
            return Err(CoreError::InvalidValue("non-finite latent".into()));
        }
        Ok(Self { z, grid })
    }
}

/// Multi-head attention whose keys and values are shared across groups of
/// `heads / kv_groups` query heads.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub kv_groups: usize,
    pub head_dim: usize,
    pub dropout: f64,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let dk = cfg.head_dim();
        let kv = cfg.kv_groups * dk;
        Ok(Self {
            q: Linear::new(pb, &format!("{name}.q"), cfg.dim, cfg.dim, true)?,
            k: Linear::new(pb, &format!("{name}.k"), cfg.dim, kv, true)?,
            v: Linear::new(pb, &format!("{name}.v"), cfg.dim, kv, true)?,
            o: Linear::new(pb, &format!("{name}.o"), cfg.dim, cfg.dim, true)?,
            heads: cfg.heads,
            kv_groups: cfg.kv_groups,
            head_dim: dk,
            dropout: cfg.dropout,
        })
    }

    /// `(N, heads * dk)` -> `(heads, N, dk)`.
    fn split_heads(g: &mut Graph, x: Var, heads: usize, dk: usize) -> Result<Var> {
        let n = g.shape(x)[0];
        let x = g.reshape(x, &[n, heads, dk])?;
        Ok(g.permute(x, &[1, 0, 2])?)
    }

    /// Repeats each kv group for the query heads it serves.
    fn expand_groups(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.kv_groups == self.heads {
            return Ok(x);
        }
        let n = g.shape(x)[1];
        let dk = self.head_dim;
        let per = self.heads / self.kv_groups;
        let mut idx = Vec::with_capacity(self.heads * n * dk);
        for h in 0..self.heads {
            let grp = h / per;
            idx.extend((0..n * dk).map(|k| (grp * n * dk + k) as u32));
        }
        let idx: Arc<[u32]> = idx.into();
        Ok(g.gather(x, idx, &[self.heads, n, dk])?)
    }

    /// Attention of `xq: (Nq, D)` over `xkv: (Nk, D)`; also returns the
    /// softmax weights `(heads, Nq, Nk)`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        xq: Var,
        xkv: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Var)> {
        let nq = g.shape(xq)[0];
        if g.shape(xkv)[0] == 0 {
            return Err(CoreError::Empty("attention context has no rows".into()));
        }
        let dk = self.head_dim;
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let q = Self::split_heads(g, q, self.heads, dk)?;
        let k = Self::split_heads(g, k, self.kv_groups, dk)?;
        let v = Self::split_heads(g, v, self.kv_groups, dk)?;
        let k = self.expand_groups(g, k)?;
        let v = self.expand_groups(g, v)?;
        let s = g.bmm(q, k, true)?;
        let s = g.scale(s, 1.0 / (dk as f64).sqrt());
        let w = g.softmax(s);
        let wd = dropout(g, w, self.dropout, ctx)?;
        let out = g.bmm(wd, v, false)?;
        let out = g.permute(out, &[1, 0, 2])?;
        let out = g.reshape(out, &[nq, self.heads * dk])?;
        Ok((self.o.forward(g, store, out)?, w))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xq: Var, xkv: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, xq, xkv, ctx)?.0)
    }
}

/// `q + Attn(LN(q), LN(ctx))`, optionally followed by `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: Attention,
    pub mlp: Option<(LayerNorm, Mlp)>,
}

impl CrossAttentionBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &AttentionConfig, with_mlp: bool) -> Result<Self> {
        let mlp = if with_mlp {
            Some((
                LayerNorm::new(pb, &format!("{name}.ln_mlp"), cfg.dim)?,
                Mlp::new(pb, &format!("{name}.mlp"), cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.dropout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln_q: LayerNorm::new(pb, &format!("{name}.ln_q"), cfg.dim)?,
            ln_kv: LayerNorm::new(pb, &format!("{name}.ln_kv"), cfg.dim)?,
            attn: Attention::new(pb, &format!("{name}.attn"), cfg)?,
            mlp,
        })
    }

    pub fn cross_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let qn = self.ln_q.forward(g, store, queries)?;
        let cn = self.ln_kv.forward(g, store, context)?;
        let a = self.attn.forward(g, store, qn, cn, ctx)?;
        let mut x = g.add(queries, a)?;
        if let Some((ln, mlp)) = &self.mlp {
            let h = ln.forward(g, store, x)?;
            let h = mlp.forward(g, store, h, ctx)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }
}

/// Pre-norm self-attention + MLP layer.
#[derive(Clone, Debug)]
pub struct SelfAttentionLayer {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttentionLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), cfg.dim)?,
            attn: Attention::new(pb, &format!("{name}.attn"), cfg)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), cfg.dim)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), cfg.dim, cfg.dim * cfg.mlp_ratio, cfg.dropout)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.ln1.forward(g, store, x)?;
        let h = self.attn.forward(g, store, h, h, ctx)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h, ctx)?;
        Ok(g.add(x, h)?)
    }
}

/// Depth-many self-attention layers; depth 0 is the identity.
pub fn self_attention_tower(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[SelfAttentionLayer],
    mut z: Var,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    for l in layers {
        z = l.forward(g, store, z, ctx)?;
    }
    Ok(z)
}

/// Tokens to a fixed-size latent: cross-attention from the latent queries,
/// then the self-attention tower.
#[derive(Clone, Debug)]
pub struct PerceiverEncoder {
    pub cross: CrossAttentionBlock,
    pub tower: Vec<SelfAttentionLayer>,
}

impl PerceiverEncoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let cross = CrossAttentionBlock::new(pb, &format!("{name}.cross"), cfg, true)?;
        let tower =
            (0..cfg.depth).map(|i| SelfAttentionLayer::new(pb, &format!("{name}.self{i}"), cfg)).collect::<Result<_>>()?;
        Ok(Self { cross, tower })
    }

    /// `tokens: (N_total, D)`, `latent_queries: (N_l, D)` -> `(N_l, D)`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        latent_queries: Var,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if g.shape(tokens)[0] == 0 {
            return Err(CoreError::Empty("no tokens to encode".into()));
        }
        let z = self.cross.cross_attention(g, store, latent_queries, tokens, ctx)?;
        self_attention_tower(g, store, &self.tower, z, ctx)
    }
}

/// Output queries attend once to the backbone latent.
#[derive(Clone, Debug)]
pub struct PerceiverDecoder {
    pub cross: CrossAttentionBlock,
}

impl PerceiverDecoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        Ok(Self { cross: CrossAttentionBlock::new(pb, &format!("{name}.cross"), cfg, true)? })
    }

    /// `z: (N_l, D)`, `queries: (N_q, D)` -> `(N_q, D)`.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var, queries: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        if g.shape(queries)[0] == 0 {
            return Err(CoreError::Empty("no output queries".into()));
        }
        self.cross.cross_attention(g, store, queries, z, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(heads: usize, groups: usize) -> AttentionConfig {
        AttentionConfig { dim: 8, heads, kv_groups: groups, depth: 2, mlp_ratio: 2, dropout: 0.0 }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(3, 1).validate().is_err());
        assert!(cfg(4, 3).validate().is_err());
        assert!(cfg(4, 2).validate().is_ok());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut pb = ParamBuilder::new(3);
        let a = Attention::new(&mut pb, "a", &cfg(4, 2)).unwrap();
        let store = pb.into_store();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[5, 8], |i| (i as f64 * 0.37).sin()));
        let (_, w) = a.forward_with_weights(&mut g, &store, x, x, &mut ForwardCtx::eval()).unwrap();
        for row in g.value(w).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_rejected() {
        let mut pb = ParamBuilder::new(3);
        let blk = CrossAttentionBlock::new(&mut pb, "c", &cfg(2, 2), false).unwrap();
        let store = pb.into_store();
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 8]));
        let c = g.constant(Tensor::zeros(&[0, 8]));
        assert!(blk.cross_attention(&mut g, &store, q, c, &mut ForwardCtx::eval()).is_err());
    }
}
