//! 3D shifted-window transformer arranged as a U-Net over the latent grid.

mod window;

use std::sync::Arc;

use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{dropout, residual, ForwardCtx, LayerNorm, Linear, Mlp, ParamBuilder};

pub use window::{
    bias_table_len, cyclic_shift, relative_position_index, window_partition, window_reverse, WindowPlan,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwinConfig {
    pub encoder_depths: Vec<usize>,
    pub encoder_num_heads: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub decoder_num_heads: Vec<usize>,
    pub window: [usize; 3],
    pub mlp_ratio: usize,
    pub qkv_bias: bool,
    pub drop_rate: f64,
    pub attn_drop_rate: f64,
    pub drop_path_rate: f64,
}

impl SwinConfig {
    fn symmetric(depths: &[usize], heads: &[usize], window: [usize; 3]) -> Self {
        Self {
            encoder_depths: depths.to_vec(),
            encoder_num_heads: heads.to_vec(),
            decoder_depths: depths.iter().rev().copied().collect(),
            decoder_num_heads: heads.iter().rev().copied().collect(),
            window,
            mlp_ratio: 4,
            qkv_bias: true,
            drop_rate: 0.0,
            attn_drop_rate: 0.0,
            drop_path_rate: 0.1,
        }
    }

    pub fn medium() -> Self {
        Self::symmetric(&[2, 2], &[8, 16], [1, 1, 1])
    }

    pub fn large() -> Self {
        Self::symmetric(&[2, 2, 2], &[8, 16, 32], [1, 4, 5])
    }

    /// Medium layout with heads scaled for a narrow embedding.
    pub fn desk() -> Self {
        Self::symmetric(&[2, 2], &[2, 4], [1, 1, 1])
    }

    pub fn stages(&self) -> usize {
        self.encoder_depths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 {
            return Err(CoreError::Config("swin needs at least one stage".into()));
        }
        if self.encoder_num_heads.len() != s || self.decoder_depths.len() != s || self.decoder_num_heads.len() != s {
            return Err(CoreError::Config("swin stage lists differ in length".into()));
        }
        let rev_d: Vec<usize> = self.encoder_depths.iter().rev().copied().collect();
        let rev_h: Vec<usize> = self.encoder_num_heads.iter().rev().copied().collect();
        if self.decoder_depths != rev_d || self.decoder_num_heads != rev_h {
            return Err(CoreError::Config("decoder lists must mirror the encoder lists".into()));
        }
        if self.window.contains(&0) || self.mlp_ratio == 0 {
            return Err(CoreError::Config("window and mlp ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Window attention with a learned relative-position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub attn_drop: f64,
    pub proj_drop: f64,
    plan: WindowPlan,
    bias_idx: Arc<[u32]>,
    part_idx: Arc<[u32]>,
    rev_idx: Arc<[u32]>,
    mask: Option<Tensor>,
}

impl WindowAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, plan: WindowPlan, cfg: &SwinConfig) -> Result<Self> {
        if dim % heads != 0 {
            return Err(CoreError::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        let table_len = bias_table_len(plan.window);
        let bias_table = pb.zeros(&format!("{name}.rel_bias"), &[table_len, heads])?;
        let n = plan.win_len();
        let rel = relative_position_index(plan.window);
        let mut bias_idx = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            bias_idx.extend(rel.iter().map(|&r| (r * heads + h) as u32));
        }
        let mask = plan.attention_mask().map(|m| {
            let nw = plan.n_windows();
            // Broadcast over heads: (nW, heads, n, n).
            let mut full = Vec::with_capacity(nw * heads * n * n);
            for w in 0..nw {
                for _ in 0..heads {
                    full.extend_from_slice(&m[w * n * n..(w + 1) * n * n]);
                }
            }
            Tensor::new(vec![nw, heads, n, n], full).expect("sized")
        });
        Ok(Self {
            qkv: Linear::new(pb, &format!("{name}.qkv"), dim, 3 * dim, cfg.qkv_bias)?,
            proj: Linear::new(pb, &format!("{name}.proj"), dim, dim, true)?,
            bias_table,
            heads,
            dim,
            attn_drop: cfg.attn_drop_rate,
            proj_drop: cfg.drop_rate,
            part_idx: plan.partition_index(dim),
            rev_idx: plan.reverse_index(dim),
            plan,
            bias_idx: bias_idx.into(),
            mask,
        })
    }

    pub fn plan(&self) -> &WindowPlan {
        &self.plan
    }

    /// Bias table expanded to `(heads, n, n)`; exposed for inspection.
    pub fn bias(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let n = self.plan.win_len();
        let t = g.param(store, self.bias_table);
        Ok(g.gather(t, self.bias_idx.clone(), &[self.heads, n, n])?)
    }

    /// Attention over windows `(nW, n, C)`; returns output and softmax weights `(nW, heads, n, n)`.
    pub fn w_msa(&self, g: &mut Graph, store: &ParamStore, windows: Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let nw = self.plan.n_windows();
        let n = self.plan.win_len();
        let (h, c) = (self.heads, self.dim);
        let dk = c / h;
        let qkv = self.qkv.forward(g, store, windows)?;
        let qkv = g.reshape(qkv, &[nw, n, 3, h, dk])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let chunk = nw * h * n * dk;
        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let idx: Arc<[u32]> = (i * chunk..(i + 1) * chunk).map(|k| k as u32).collect::<Vec<_>>().into();
            parts.push(g.gather(qkv, idx, &[nw * h, n, dk])?);
        }
        let s = g.bmm(parts[0], parts[1], true)?;
        let s = g.scale(s, 1.0 / (dk as f64).sqrt());
        let s = g.reshape(s, &[nw, h, n, n])?;
        let bias = self.bias(g, store)?;
        let mut s = g.add_bcast(s, bias)?;
        if let Some(m) = &self.mask {
            let m = g.constant(m.clone());
            s = g.add(s, m)?;
        }
        let w = g.softmax(s);
        let wd = dropout(g, w, self.attn_drop, ctx)?;
        let wd = g.reshape(wd, &[nw * h, n, n])?;
        let out = g.bmm(wd, parts[2], false)?;
        let out = g.reshape(out, &[nw, h, n, dk])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[nw, n, c])?;
        let out = self.proj.forward(g, store, out)?;
        Ok((dropout(g, out, self.proj_drop, ctx)?, w))
    }

    /// `(N, C)` grid tokens through pad, shift, partition, attention and back.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<(Var, Var)> {
        let nw = self.plan.n_windows();
        let n = self.plan.win_len();
        let wins = g.gather(x, self.part_idx.clone(), &[nw, n, self.dim])?;
        let (out, w) = self.w_msa(g, store, wins, ctx)?;
        let tokens: usize = self.plan.grid.iter().product();
        Ok((g.gather(out, self.rev_idx.clone(), &[tokens, self.dim])?, w))
    }
}

/// Pre-norm window attention and GELU MLP, each on a stochastic-depth residual.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub drop_path: f64,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        grid: [usize; 3],
        dim: usize,
        heads: usize,
        shifted: bool,
        drop_path: f64,
        cfg: &SwinConfig,
    ) -> Result<Self> {
        let plan = WindowPlan::new(grid, cfg.window, shifted)?;
        Ok(Self {
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), dim)?,
            attn: WindowAttention::new(pb, &format!("{name}.attn"), dim, heads, plan, cfg)?,
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, dim * cfg.mlp_ratio, cfg.drop_rate)?,
            drop_path,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.norm1.forward(g, store, x)?;
        let (h, _) = self.attn.forward(g, store, h, ctx)?;
        let x = residual(g, x, h, self.drop_path, ctx)?;
        let h = self.norm2.forward(g, store, x)?;
        let h = self.mlp.forward(g, store, h, ctx)?;
        residual(g, x, h, self.drop_path, ctx)
    }
}

/// Consecutive blocks at one resolution, alternating plain and shifted windows.
#[derive(Clone, Debug)]
pub struct SwinStage {
    pub grid: [usize; 3],
    pub dim: usize,
    pub blocks: Vec<SwinBlock>,
}

impl SwinStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        grid: [usize; 3],
        dim: usize,
        depth: usize,
        heads: usize,
        drop_paths: &[f64],
        cfg: &SwinConfig,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| SwinBlock::new(pb, &format!("{name}.block{i}"), grid, dim, heads, i % 2 == 1, drop_paths[i], cfg))
            .collect::<Result<_>>()?;
        Ok(Self { grid, dim, blocks })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, store, x, ctx)?;
        }
        Ok(x)
    }
}

fn merge_index(grid: [usize; 3], c: usize) -> Vec<u32> {
    let [d, h, w] = grid;
    let (d2, h2, w2) = (d / 2, h / 2, w / 2);
    let mut idx = Vec::with_capacity(d * h * w * c);
    for a in 0..d2 {
        for b in 0..h2 {
            for e in 0..w2 {
                for o in 0..8 {
                    let (dz, dy, dx) = (o / 4, (o / 2) % 2, o % 2);
                    let src = ((2 * a + dz) * h + 2 * b + dy) * w + 2 * e + dx;
                    idx.extend((0..c).map(|k| (src * c + k) as u32));
                }
            }
        }
    }
    idx
}

/// 2x2x2 neighbourhoods to `8C`, layer norm, then a bias-free map to `2C`.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub grid: [usize; 3],
    pub dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
    idx: Arc<[u32]>,
}

impl PatchMerge {
    pub fn new(pb: &mut ParamBuilder, name: &str, grid: [usize; 3], dim: usize) -> Result<Self> {
        if grid.iter().any(|&g| g % 2 != 0) {
            return Err(CoreError::ShapeMismatch(format!("{name}: cannot merge odd grid {grid:?}")));
        }
        Ok(Self {
            grid,
            dim,
            norm: LayerNorm::new(pb, &format!("{name}.norm"), 8 * dim)?,
            reduction: Linear::new(pb, &format!("{name}.reduction"), 8 * dim, 2 * dim, false)?,
            idx: merge_index(grid, dim).into(),
        })
    }

    pub fn out_grid(&self) -> [usize; 3] {
        self.grid.map(|g| g / 2)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n: usize = self.out_grid().iter().product();
        let x = g.gather(x, self.idx.clone(), &[n, 8 * self.dim])?;
        let x = self.norm.forward(g, store, x)?;
        self.reduction.forward(g, store, x)
    }
}

/// Bias-free map `C -> 4C`, redistributed over 2x2x2 children as `C/2`, then layer norm.
#[derive(Clone, Debug)]
pub struct PatchSplit {
    pub grid: [usize; 3],
    pub dim: usize,
    pub expand: Linear,
    pub norm: LayerNorm,
    idx: Arc<[u32]>,
}

impl PatchSplit {
    pub fn new(pb: &mut ParamBuilder, name: &str, grid: [usize; 3], dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(CoreError::ShapeMismatch(format!("{name}: cannot split odd width {dim}")));
        }
        let half = dim / 2;
        let [d, h, w] = grid;
        let (dd, hh, ww) = (2 * d, 2 * h, 2 * w);
        let mut idx = vec![0u32; dd * hh * ww * half];
        for a in 0..d {
            for b in 0..h {
                for e in 0..w {
                    let src = (a * h + b) * w + e;
                    for o in 0..8 {
                        let (dz, dy, dx) = (o / 4, (o / 2) % 2, o % 2);
                        let dst = ((2 * a + dz) * hh + 2 * b + dy) * ww + 2 * e + dx;
                        for k in 0..half {
                            idx[dst * half + k] = (src * 4 * dim + o * half + k) as u32;
                        }
                    }
                }
            }
        }
        Ok(Self {
            grid,
            dim,
            expand: Linear::new(pb, &format!("{name}.expand"), dim, 4 * dim, false)?,
            norm: LayerNorm::new(pb, &format!("{name}.norm"), half)?,
            idx: idx.into(),
        })
    }

    pub fn out_grid(&self) -> [usize; 3] {
        self.grid.map(|g| g * 2)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let x = self.expand.forward(g, store, x)?;
        let n: usize = self.out_grid().iter().product();
        let x = g.gather(x, self.idx.clone(), &[n, self.dim / 2])?;
        self.norm.forward(g, store, x)
    }
}

/// U-Net: encoder stages with merges, decoder stages with splits; skips are
/// added, except at the highest resolution where they are concatenated and
/// projected back to the embedding width.
#[derive(Clone, Debug)]
pub struct SwinBackbone {
    pub grid: [usize; 3],
    pub dim: usize,
    pub encoder: Vec<SwinStage>,
    pub merges: Vec<PatchMerge>,
    pub splits: Vec<PatchSplit>,
    pub decoder: Vec<SwinStage>,
    pub skip_proj: Option<Linear>,
}

impl SwinBackbone {
    pub fn new(pb: &mut ParamBuilder, name: &str, grid: [usize; 3], dim: usize, cfg: &SwinConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stages();
        let total: usize = cfg.encoder_depths.iter().chain(&cfg.decoder_depths).sum();
        let rates: Vec<f64> = (0..total)
            .map(|i| if total > 1 { cfg.drop_path_rate * i as f64 / (total - 1) as f64 } else { 0.0 })
            .collect();
        let mut used = 0;
        let mut take = |n: usize| {
            let r = rates[used..used + n].to_vec();
            used += n;
            r
        };

        let mut grids = vec![grid];
        for i in 1..s {
            let prev = grids[i - 1];
            if prev.iter().any(|&g| g % 2 != 0) {
                return Err(CoreError::ShapeMismatch(format!(
                    "backbone stage {i}: latent grid {prev:?} cannot be halved (need every dim divisible by {})",
                    1 << (s - 1)
                )));
            }
            grids.push(prev.map(|g| g / 2));
        }
        let dims: Vec<usize> = (0..s).map(|i| dim << i).collect();

        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for i in 0..s {
            let rates = take(cfg.encoder_depths[i]);
            encoder.push(SwinStage::new(
                pb,
                &format!("{name}.enc{i}"),
                grids[i],
                dims[i],
                cfg.encoder_depths[i],
                cfg.encoder_num_heads[i],
                &rates,
                cfg,
            )?);
            if i + 1 < s {
                merges.push(PatchMerge::new(pb, &format!("{name}.merge{i}"), grids[i], dims[i])?);
            }
        }
        let mut decoder = Vec::new();
        let mut splits = Vec::new();
        for j in 0..s {
            let level = s - 1 - j;
            if j > 0 {
                splits.push(PatchSplit::new(pb, &format!("{name}.split{j}"), grids[level + 1], dims[level + 1])?);
            }
            let rates = take(cfg.decoder_depths[j]);
            decoder.push(SwinStage::new(
                pb,
                &format!("{name}.dec{j}"),
                grids[level],
                dims[level],
                cfg.decoder_depths[j],
                cfg.decoder_num_heads[j],
                &rates,
                cfg,
            )?);
        }
        let skip_proj = if s > 1 { Some(Linear::new(pb, &format!("{name}.skip_proj"), 2 * dim, dim, false)?) } else { None };
        Ok(Self { grid, dim, encoder, merges, splits, decoder, skip_proj })
    }

    /// `(N_l, D) -> (N_l, D)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let n: usize = self.grid.iter().product();
        if g.shape(z) != [n, self.dim] {
            return Err(CoreError::ShapeMismatch(format!(
                "backbone expects ({n}, {}), got {:?}",
                self.dim,
                g.shape(z)
            )));
        }
        let s = self.encoder.len();
        let mut skips = Vec::with_capacity(s);
        let mut x = z;
        for i in 0..s {
            x = self.encoder[i].forward(g, store, x, ctx)?;
            if i + 1 < s {
                skips.push(x);
                x = self.merges[i].forward(g, store, x)?;
            }
        }
        for j in 0..s {
            if j > 0 {
                x = self.splits[j - 1].forward(g, store, x)?;
                let skip = skips[s - 1 - j];
                if j == s - 1 {
                    let cat = g.concat(&[x, skip], 1)?;
                    x = self.skip_proj.as_ref().expect("multi-stage").forward(g, store, cat)?;
                } else {
                    x = g.add(x, skip)?;
                }
            }
            x = self.decoder[j].forward(g, store, x, ctx)?;
        }
        Ok(x)
    }

    /// Every attention projection, in construction order.
    pub fn attention_linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut out = Vec::new();
        for stage in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for b in &mut stage.blocks {
                out.push(&mut b.attn.qkv);
                out.push(&mut b.attn.proj);
            }
        }
        out
    }
}
