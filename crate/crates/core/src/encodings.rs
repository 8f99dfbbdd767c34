//! Patchification and the additive token embeddings fed to the encoder:
//! group-specific patch projections, Fourier positional features, variable,
//! level and species embeddings, and sinusoidal absolute/lead time.
//!
//! Token order is channel-major (schema channel order), then timestep, then
//! patch in row-major order. Both input timesteps are tokenized, so a batch
//! yields `C * N_p * 2` tokens.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var, GATHER_ZERO};

use crate::data_model::{Batch, GridSpec, GroupName, LevelKey, Month, Schema};
use crate::error::{CoreError, Result};
use crate::nn::{Linear, ParamBuilder, INIT_STD};

/// Patch tiling of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub p: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    /// With `pad` unset the grid must divide evenly; otherwise the south and
    /// east edges are zero-padded up to a multiple of `p`.
    pub fn new(height: usize, width: usize, p: usize, pad: bool) -> Result<Self> {
        if p == 0 {
            return Err(CoreError::Config("patch size must be positive".into()));
        }
        if !pad && (height % p != 0 || width % p != 0) {
            return Err(CoreError::ShapeMismatch(format!(
                "grid {height}x{width} is not divisible by patch size {p}"
            )));
        }
        Ok(Self { height, width, p, rows: height.div_ceil(p), cols: width.div_ceil(p) })
    }

    pub fn for_grid(grid: &GridSpec, p: usize) -> Result<Self> {
        Self::new(grid.height, grid.width, p, false)
    }

    pub fn patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Flat cell index (`h * W + w`) for every `(patch, offset)` pair, in
    /// `(N_p, p*p)` order; padded positions are `None`.
    pub fn cell_indices(&self) -> Vec<Option<usize>> {
        let p = self.p;
        let mut out = Vec::with_capacity(self.patches() * p * p);
        for pr in 0..self.rows {
            for pc in 0..self.cols {
                for i in 0..p {
                    for j in 0..p {
                        let (h, w) = (pr * p + i, pc * p + j);
                        out.push((h < self.height && w < self.width).then_some(h * self.width + w));
                    }
                }
            }
        }
        out
    }

    /// Normalized patch-centroid coordinates in `[-1, 1]`; `y` grows northward.
    pub fn centroid(&self, pr: usize, pc: usize) -> (f64, f64) {
        let x = 2.0 * (pc as f64 + 0.5) / self.cols as f64 - 1.0;
        let y = 1.0 - 2.0 * (pr as f64 + 0.5) / self.rows as f64;
        (x, y)
    }
}

/// Patch contents of a batch: `data[((c * 2 + t) * N_p + patch) * p² + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub grid: PatchGrid,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Patches {
    pub fn patch(&self, channel: usize, t: usize, patch: usize) -> &[f64] {
        let pp = self.grid.p * self.grid.p;
        let start = ((channel * 2 + t) * self.grid.patches() + patch) * pp;
        &self.data[start..start + pp]
    }
}

pub fn patchify(batch: &Batch, p: usize) -> Result<Patches> {
    let pg = PatchGrid::for_grid(batch.grid(), p)?;
    let cells = pg.cell_indices();
    let mut data = Vec::with_capacity(batch.channel_count() * 2 * cells.len());
    for ch in batch.schema().channels() {
        let arr = &batch.groups()[ch.group_pos];
        for t in 0..2 {
            let plane = arr.slice(ndarray::s![t, ch.group_channel, .., ..]);
            let flat: Vec<f32> = plane.iter().copied().collect();
            data.extend(cells.iter().map(|c| c.map_or(0.0, |k| flat[k] as f64)));
        }
    }
    Ok(Patches { grid: pg, channels: batch.channel_count(), data })
}

/// Linearly spaced frequencies from 1 to `max_freq` inclusive.
pub fn fourier_frequencies(n_f: usize, max_freq: f64) -> Vec<f64> {
    match n_f {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..n_f).map(|k| 1.0 + (max_freq - 1.0) * k as f64 / (n_f - 1) as f64).collect(),
    }
}

/// Raw width of [`fourier_encode`]: `2 * (2 * n_f + 1)`.
pub fn fourier_width(n_f: usize) -> usize {
    2 * (2 * n_f + 1)
}

/// Per coordinate `[sin(s_0 pi v), cos(s_0 pi v), ..., v]`, x block then y block.
pub fn fourier_encode(x: f64, y: f64, n_f: usize, max_freq: f64) -> Result<Vec<f64>> {
    for v in [x, y] {
        if !(-1.0..=1.0).contains(&v) {
            return Err(CoreError::InvalidValue(format!("coordinate {v} outside [-1, 1]")));
        }
    }
    let freqs = fourier_frequencies(n_f, max_freq);
    let mut out = Vec::with_capacity(fourier_width(n_f));
    for v in [x, y] {
        for &s in &freqs {
            out.push((s * PI * v).sin());
            out.push((s * PI * v).cos());
        }
        out.push(v);
    }
    Ok(out)
}

/// `[sin(tau / 10000^(2i/d)), cos(...)]` interleaved, `i < d/2`.
pub fn sinusoidal_time_encode(tau: f64, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(CoreError::Config(format!("time encoding width {d} must be even")));
    }
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let arg = tau / 10000f64.powf(2.0 * i as f64 / d as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Same scheme as absolute time; lead times are whole months.
pub fn lead_time_encode(delta_t: i64, d: usize) -> Result<Vec<f64>> {
    if delta_t < 0 {
        return Err(CoreError::InvalidValue(format!("negative lead time {delta_t}")));
    }
    sinusoidal_time_encode(delta_t as f64, d)
}

/// Absolute time coordinate: months since 2000-01.
pub fn month_tau(m: Month) -> f64 {
    m.index() as f64
}

/// Where a token came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenProvenance {
    pub channel: usize,
    pub group: GroupName,
    pub variable: String,
    pub level: Option<LevelKey>,
    pub patch_row: usize,
    pub patch_col: usize,
    pub timestep: usize,
}

/// Row of each embedding table feeding each token, plus patch gathers.
#[derive(Clone, Debug)]
pub struct TokenLayout {
    pub patch_grid: PatchGrid,
    pub provenance: Vec<TokenProvenance>,
    pub var_rows: Vec<Option<usize>>,
    pub pressure_rows: Vec<Option<usize>>,
    pub species_rows: Vec<Option<usize>>,
    pub pos_rows: Vec<Option<usize>>,
    pub time_rows: Vec<Option<usize>>,
    /// Per schema group: flat indices into the `(2, C, H*W)` input for the
    /// `(tokens_g, p*p)` patch matrix.
    pub group_gather: Vec<(usize, Arc<[u32]>)>,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Lookup tables shared by encoder tokens and decoder queries.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingIndex {
    pub variables: BTreeMap<(GroupName, String), usize>,
    pub pressure: BTreeMap<u32, usize>,
    pub species: BTreeMap<u64, usize>,
}

impl EmbeddingIndex {
    pub fn for_schema(schema: &Schema) -> Self {
        let mut idx = Self::default();
        for g in schema.groups() {
            for v in &g.variables {
                let n = idx.variables.len();
                idx.variables.insert((g.group, v.clone()), n);
            }
        }
        for (k, p) in schema.pressure_levels().into_iter().enumerate() {
            idx.pressure.insert(p, k);
        }
        for (k, s) in schema.species_ids().into_iter().enumerate() {
            idx.species.insert(s, k);
        }
        idx
    }

    pub fn variable_row(&self, group: GroupName, var: &str) -> Result<usize> {
        self.variables
            .get(&(group, var.to_string()))
            .copied()
            .ok_or_else(|| CoreError::UnknownVariable(format!("{group}/{var}")))
    }

    /// Rows in the pressure and species tables for a channel level.
    pub fn level_rows(&self, level: Option<LevelKey>) -> Result<(Option<usize>, Option<usize>)> {
        match level {
            None => Ok((None, None)),
            Some(LevelKey::Pressure(p)) => {
                let r = self.pressure.get(&p).ok_or_else(|| CoreError::UnknownVariable(format!("level {p}hPa")))?;
                Ok((Some(*r), None))
            }
            Some(LevelKey::Species(s)) => {
                let r = self.species.get(&s).ok_or_else(|| CoreError::UnknownVariable(format!("species {s}")))?;
                Ok((None, Some(*r)))
            }
        }
    }
}

/// Parameters of the token embedding.
#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub dim: usize,
    pub patch_size: usize,
    pub n_f: usize,
    pub max_freq: f64,
    pub index: EmbeddingIndex,
    /// One projection per schema group, in schema order.
    pub group_proj: Vec<(GroupName, Linear)>,
    pub fourier: Linear,
    pub var_embed: ParamId,
    pub pressure_embed: Option<ParamId>,
    pub species_embed: Option<ParamId>,
    pub time_proj: Linear,
    pub lead_proj: Linear,
}

impl EmbeddingTables {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        schema: &Schema,
        dim: usize,
        patch_size: usize,
        n_f: usize,
        max_freq: f64,
    ) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(CoreError::Config(format!("embedding width {dim} must be even")));
        }
        let index = EmbeddingIndex::for_schema(schema);
        let pp = patch_size * patch_size;
        let mut group_proj = Vec::new();
        for g in schema.groups() {
            group_proj.push((g.group, Linear::new(pb, &format!("{name}.proj.{}", g.group), pp, dim, true)?));
        }
        let fourier = Linear::new(pb, &format!("{name}.fourier"), fourier_width(n_f), dim, true)?;
        let var_embed = pb.normal(&format!("{name}.variable"), &[index.variables.len(), dim], INIT_STD)?;
        let pressure_embed = if index.pressure.is_empty() {
            None
        } else {
            Some(pb.normal(&format!("{name}.pressure"), &[index.pressure.len(), dim], INIT_STD)?)
        };
        let species_embed = if index.species.is_empty() {
            None
        } else {
            Some(pb.normal(&format!("{name}.species"), &[index.species.len(), dim], INIT_STD)?)
        };
        let time_proj = Linear::new(pb, &format!("{name}.time"), dim, dim, true)?;
        let lead_proj = Linear::new(pb, &format!("{name}.lead"), dim, dim, true)?;
        Ok(Self {
            dim,
            patch_size,
            n_f,
            max_freq,
            index,
            group_proj,
            fourier,
            var_embed,
            pressure_embed,
            species_embed,
            time_proj,
            lead_proj,
        })
    }

    pub fn layout(&self, schema: &Schema, grid: &GridSpec) -> Result<TokenLayout> {
        let pg = PatchGrid::for_grid(grid, self.patch_size)?;
        let np = pg.patches();
        let cells = pg.cell_indices();
        let hw = grid.cells();
        let c_total = schema.channel_count();
        let channels = schema.channels();
        let mut layout = TokenLayout {
            patch_grid: pg,
            provenance: Vec::with_capacity(c_total * np * 2),
            var_rows: Vec::new(),
            pressure_rows: Vec::new(),
            species_rows: Vec::new(),
            pos_rows: Vec::new(),
            time_rows: Vec::new(),
            group_gather: Vec::new(),
        };
        let mut gathers: Vec<Vec<u32>> = vec![Vec::new(); schema.groups().len()];
        for (ci, ch) in channels.iter().enumerate() {
            if !self.group_proj.iter().any(|(g, _)| *g == ch.group) {
                return Err(CoreError::UnknownVariable(format!("group {}", ch.group)));
            }
            let var = self.index.variable_row(ch.group, &ch.variable)?;
            let (pr, sr) = self.index.level_rows(ch.level)?;
            for t in 0..2 {
                for patch in 0..np {
                    layout.provenance.push(TokenProvenance {
                        channel: ci,
                        group: ch.group,
                        variable: ch.variable.clone(),
                        level: ch.level,
                        patch_row: patch / pg.cols,
                        patch_col: patch % pg.cols,
                        timestep: t,
                    });
                    layout.var_rows.push(Some(var));
                    layout.pressure_rows.push(pr);
                    layout.species_rows.push(sr);
                    layout.pos_rows.push(Some(patch));
                    layout.time_rows.push(Some(t));
                    let base = (t * c_total + ci) * hw;
                    let pp = pg.p * pg.p;
                    gathers[ch.group_pos]
                        .extend(cells[patch * pp..(patch + 1) * pp].iter().map(|c| c.map_or(GATHER_ZERO, |k| (base + k) as u32)));
                }
            }
        }
        layout.group_gather = gathers.into_iter().enumerate().map(|(k, v)| (k, v.into())).collect();
        Ok(layout)
    }

    /// Raw Fourier features of every patch centroid, `(N_p, 2(2N_f+1))`.
    pub fn patch_fourier(&self, pg: &PatchGrid) -> Result<Tensor> {
        let mut data = Vec::with_capacity(pg.patches() * fourier_width(self.n_f));
        for pr in 0..pg.rows {
            for pc in 0..pg.cols {
                let (x, y) = pg.centroid(pr, pc);
                data.extend(fourier_encode(x, y, self.n_f, self.max_freq)?);
            }
        }
        Ok(Tensor::new(vec![pg.patches(), fourier_width(self.n_f)], data)?)
    }

    /// Projected sinusoidal time rows for the two input months, `(2, D)`.
    pub fn time_rows(&self, g: &mut Graph, store: &ParamStore, months: [Month; 2]) -> Result<Var> {
        let mut raw = sinusoidal_time_encode(month_tau(months[0]), self.dim)?;
        raw.extend(sinusoidal_time_encode(month_tau(months[1]), self.dim)?);
        let raw = g.constant(Tensor::new(vec![2, self.dim], raw)?);
        self.time_proj.forward(g, store, raw)
    }

    /// Projected lead-time row, `(D,)`.
    pub fn lead_row(&self, g: &mut Graph, store: &ParamStore, lead: u32) -> Result<Var> {
        let raw = g.constant(Tensor::new(vec![1, self.dim], lead_time_encode(lead as i64, self.dim)?)?);
        let y = self.lead_proj.forward(g, store, raw)?;
        Ok(g.reshape(y, &[self.dim])?)
    }

    /// Token embeddings `(N_total, D)` for an input `(2, C, H*W)`.
    pub fn embed_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layout: &TokenLayout,
        x: Var,
        months: [Month; 2],
        lead: u32,
    ) -> Result<Var> {
        let pp = self.patch_size * self.patch_size;
        let mut parts = Vec::new();
        for (gpos, idx) in &layout.group_gather {
            let n = idx.len() / pp;
            let patches = g.gather(x, idx.clone(), &[n, pp])?;
            parts.push(self.group_proj[*gpos].1.forward(g, store, patches)?);
        }
        let mut tok = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? };

        let raw = g.constant(self.patch_fourier(&layout.patch_grid)?);
        let pos = self.fourier.forward(g, store, raw)?;
        let pos = g.gather_rows(pos, &layout.pos_rows)?;
        tok = g.add(tok, pos)?;

        let vt = g.param(store, self.var_embed);
        let v = g.gather_rows(vt, &layout.var_rows)?;
        tok = g.add(tok, v)?;
        if let Some(p) = self.pressure_embed {
            let pt = g.param(store, p);
            let e = g.gather_rows(pt, &layout.pressure_rows)?;
            tok = g.add(tok, e)?;
        }
        if let Some(s) = self.species_embed {
            let st = g.param(store, s);
            let e = g.gather_rows(st, &layout.species_rows)?;
            tok = g.add(tok, e)?;
        }

        let times = self.time_rows(g, store, months)?;
        let te = g.gather_rows(times, &layout.time_rows)?;
        tok = g.add(tok, te)?;
        let lead = self.lead_row(g, store, lead)?;
        Ok(g.add_bcast(tok, lead)?)
    }
}

/// Stacks the two slices of a batch into a `(2, C, H*W)` tensor.
pub fn batch_rows(batch: &Batch) -> Tensor {
    let mut data = batch.slice(0).to_rows();
    data.extend(batch.slice(1).to_rows());
    Tensor::new(vec![2, batch.channel_count(), batch.grid().cells()], data).expect("sized")
}
