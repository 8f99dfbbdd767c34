//! Output queries (one per output channel map) and the per-group heads that
//! turn decoded embeddings back into gridded fields.

use std::sync::Arc;

use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::data_model::{GridSpec, GroupName, LevelKey, Month, Schema};
use crate::encodings::{fourier_width, EmbeddingIndex, EmbeddingTables, PatchGrid};
use crate::error::{CoreError, Result};
use crate::nn::{LayerNorm, Linear, ParamBuilder, INIT_STD};

/// What one output query asks for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuerySpec {
    pub channel: usize,
    pub group: GroupName,
    pub variable: String,
    pub level: Option<LevelKey>,
    pub lead_time: u32,
    /// Grid rows and columns covered by the map.
    pub coverage: (usize, usize),
}

/// One spec per schema channel, in channel order.
pub fn query_specs(schema: &Schema, grid: &GridSpec, lead_time: u32) -> Vec<QuerySpec> {
    schema
        .channels()
        .into_iter()
        .enumerate()
        .map(|(i, ch)| QuerySpec {
            channel: i,
            group: ch.group,
            variable: ch.variable,
            level: ch.level,
            lead_time,
            coverage: (grid.height, grid.width),
        })
        .collect()
}

/// Linear resampling matrix `(n_out, n_in)` with half-pixel alignment: output
/// `i` samples input coordinate `(i + 0.5) * n_in / n_out - 0.5`, clamped to
/// the valid range.
pub fn interpolation_matrix(n_out: usize, n_in: usize) -> Tensor {
    let mut m = vec![0.0; n_out * n_in];
    let ratio = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let lam = src - i0 as f64;
        m[i * n_in + i0] += 1.0 - lam;
        m[i * n_in + i1] += lam;
    }
    Tensor::new(vec![n_out, n_in], m).expect("sized")
}

/// Learned components of the decoder queries.
#[derive(Clone, Debug)]
pub struct QueryTables {
    pub dim: usize,
    pub index: EmbeddingIndex,
    pub var_embed: ParamId,
    pub pressure_embed: Option<ParamId>,
    pub species_embed: Option<ParamId>,
    pub fourier: Linear,
    pub lead_proj: Linear,
    pub time_proj: Option<Linear>,
}

impl QueryTables {
    pub fn new(pb: &mut ParamBuilder, name: &str, schema: &Schema, dim: usize, n_f: usize, abs_time: bool) -> Result<Self> {
        let index = EmbeddingIndex::for_schema(schema);
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
        let time_proj = if abs_time { Some(Linear::new(pb, &format!("{name}.time"), dim, dim, true)?) } else { None };
        Ok(Self {
            dim,
            index,
            var_embed,
            pressure_embed,
            species_embed,
            fourier: Linear::new(pb, &format!("{name}.fourier"), fourier_width(n_f), dim, true)?,
            lead_proj: Linear::new(pb, &format!("{name}.lead"), dim, dim, true)?,
            time_proj,
        })
    }
}

/// Query matrix `(N_q, D)`: variable + interpolated spatial Fourier + lead
/// time + level or species embedding (+ absolute time when enabled).
///
/// `encoder` supplies the raw patch Fourier features and the sinusoidal
/// encodings; `target` is the month being predicted.
pub fn build_queries(
    g: &mut Graph,
    store: &ParamStore,
    tables: &QueryTables,
    encoder: &EmbeddingTables,
    specs: &[QuerySpec],
    pg: &PatchGrid,
    target: Month,
) -> Result<Var> {
    let nq = specs.len();
    if nq == 0 {
        return Err(CoreError::Empty("no output queries".into()));
    }
    let mut var_rows = Vec::with_capacity(nq);
    let mut pres_rows = Vec::with_capacity(nq);
    let mut spec_rows = Vec::with_capacity(nq);
    for s in specs {
        var_rows.push(Some(tables.index.variable_row(s.group, &s.variable)?));
        let (p, sp) = tables.index.level_rows(s.level)?;
        pres_rows.push(p);
        spec_rows.push(sp);
    }
    let vt = g.param(store, tables.var_embed);
    let mut q = g.gather_rows(vt, &var_rows)?;
    if let Some(id) = tables.pressure_embed {
        let t = g.param(store, id);
        let e = g.gather_rows(t, &pres_rows)?;
        q = g.add(q, e)?;
    }
    if let Some(id) = tables.species_embed {
        let t = g.param(store, id);
        let e = g.gather_rows(t, &spec_rows)?;
        q = g.add(q, e)?;
    }

    let raw = g.constant(encoder.patch_fourier(pg)?);
    let pos = tables.fourier.forward(g, store, raw)?;
    let interp = g.constant(interpolation_matrix(nq, pg.patches()));
    let pos = g.matmul(interp, pos)?;
    q = g.add(q, pos)?;

    let lead = specs[0].lead_time;
    if specs.iter().any(|s| s.lead_time != lead) {
        return Err(CoreError::Config("queries in one call must share a lead time".into()));
    }
    let raw = crate::encodings::lead_time_encode(lead as i64, tables.dim)?;
    let raw = g.constant(Tensor::new(vec![1, tables.dim], raw)?);
    let l = tables.lead_proj.forward(g, store, raw)?;
    let l = g.reshape(l, &[tables.dim])?;
    q = g.add_bcast(q, l)?;

    if let Some(tp) = &tables.time_proj {
        let raw = crate::encodings::sinusoidal_time_encode(crate::encodings::month_tau(target), tables.dim)?;
        let raw = g.constant(Tensor::new(vec![1, tables.dim], raw)?);
        let t = tp.forward(g, store, raw)?;
        let t = g.reshape(t, &[tables.dim])?;
        q = g.add_bcast(q, t)?;
    }
    Ok(q)
}

/// Layer norm and linear map `D -> H*W` per variable group.
#[derive(Clone, Debug)]
pub struct OutputHeads {
    pub cells: usize,
    pub heads: Vec<(GroupName, LayerNorm, Linear)>,
    /// Channel range of each group within the decoded rows.
    ranges: Vec<(usize, usize)>,
    dim: usize,
}

impl OutputHeads {
    pub fn new(pb: &mut ParamBuilder, name: &str, schema: &Schema, grid: &GridSpec, dim: usize) -> Result<Self> {
        let cells = grid.cells();
        let mut heads = Vec::new();
        let mut ranges = Vec::new();
        let mut start = 0;
        for grp in schema.groups() {
            let n = grp.channel_count();
            let base = format!("{name}.{}", grp.group);
            heads.push((
                grp.group,
                LayerNorm::new(pb, &format!("{base}.norm"), dim)?,
                Linear::new(pb, &format!("{base}.proj"), dim, cells, true)?,
            ));
            ranges.push((start, n));
            start += n;
        }
        Ok(Self { cells, heads, ranges, dim })
    }

    pub fn channels(&self) -> usize {
        self.ranges.iter().map(|r| r.1).sum()
    }

    /// `decoded: (C, D)` -> `(C, H*W)` maps in normalized space.
    pub fn project_outputs(&self, g: &mut Graph, store: &ParamStore, decoded: Var) -> Result<Var> {
        let c = self.channels();
        if g.shape(decoded) != [c, self.dim] {
            return Err(CoreError::ShapeMismatch(format!(
                "decoded rows {:?} do not match {c} query specs of width {}",
                g.shape(decoded),
                self.dim
            )));
        }
        let mut parts = Vec::with_capacity(self.heads.len());
        for ((_, ln, lin), &(start, n)) in self.heads.iter().zip(&self.ranges) {
            let idx: Arc<[u32]> = ((start * self.dim) as u32..((start + n) * self.dim) as u32).collect::<Vec<_>>().into();
            let rows = if self.heads.len() == 1 { decoded } else { g.gather(decoded, idx, &[n, self.dim])? };
            let h = ln.forward(g, store, rows)?;
            parts.push(lin.forward(g, store, h)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(g.concat(&parts, 0)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_rows_are_convex() {
        for (o, i) in [(7, 28), (113, 2800), (5, 3), (3, 3), (1, 4)] {
            let m = interpolation_matrix(o, i);
            for r in 0..o {
                let row = &m.data()[r * i..(r + 1) * i];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        // Same size: identity.
        let m = interpolation_matrix(3, 3);
        assert_eq!(m.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        // n_in = 4, n_out = 2: sources at 0.5 and 2.5.
        let m = interpolation_matrix(2, 4);
        assert_eq!(m.data(), &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn spec_counts() {
        assert_eq!(query_specs(&Schema::full(), &GridSpec::mini(), 1).len(), 113);
        assert_eq!(query_specs(&Schema::desk(), &GridSpec::desk(), 1).len(), 7);
    }
}
