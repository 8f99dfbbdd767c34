//! The simulator: normalize, embed, encode to a latent grid, step the latent
//! with the Swin backbone, decode with per-channel queries, add the predicted
//! increment and denormalize. Also the autoregressive rollout and checkpoints.

use std::path::Path;

use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::batch_builder::container::{ContainerError, ContainerReader, ContainerWriter};
use crate::data_model::{Batch, GridSpec, Month, NormStats, Schema, StateSlice};
use crate::decoder_heads::{build_queries, query_specs, OutputHeads, QuerySpec, QueryTables};
use crate::encodings::{fourier_encode, fourier_width, EmbeddingTables, PatchGrid, TokenLayout};
use crate::error::{CoreError, Result};
use crate::metrics;
use crate::nn::{ForwardCtx, ParamBuilder, INIT_STD};
use crate::perceiver::{AttentionConfig, PerceiverDecoder, PerceiverEncoder};
use crate::seed::{derive_seed, Stream};
use crate::swin::{SwinBackbone, SwinConfig};
use crate::training::{inject_adapters, AdapterConfig, AdapterState};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const TRAJECTORY_KIND: &str = "trajectory";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema: Schema,
    pub grid: GridSpec,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub kv_groups: usize,
    /// Self-attention layers in the encoder tower.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// `(N_ld, N_lh, N_lw)`; the latent array has their product rows.
    pub latent_grid: [usize; 3],
    pub n_f: usize,
    pub max_freq: f64,
    pub swin: SwinConfig,
    /// Months between input and predicted state.
    pub lead_time: u32,
    /// Channel labels (`group/variable[/level]`) copied through unchanged.
    pub static_channels: Vec<String>,
    /// Adds an absolute-time term to the decoder queries.
    pub decoder_abs_time: bool,
}

impl ModelConfig {
    fn preset_scale(patch_size: usize, heads: usize, embed_dim: usize, depth: usize, swin: SwinConfig, latent: [usize; 3]) -> Self {
        Self {
            schema: Schema::full(),
            grid: GridSpec::full(),
            patch_size,
            embed_dim,
            heads,
            kv_groups: 4,
            depth,
            mlp_ratio: 4,
            dropout: 0.0,
            latent_grid: latent,
            n_f: 64,
            max_freq: 224.0,
            swin,
            lead_time: 1,
            static_channels: vec!["surface/lsm".into()],
            decoder_abs_time: false,
        }
    }

    /// "Small": p=4, 12 heads, width 384, depth 6, Medium backbone.
    pub fn small() -> Self {
        Self::preset_scale(4, 12, 384, 6, SwinConfig::medium(), [2, 10, 14])
    }

    /// "Medium": p=2, 16 heads, width 512, depth 10, Large backbone.
    pub fn medium() -> Self {
        Self::preset_scale(2, 16, 512, 10, SwinConfig::large(), [4, 16, 20])
    }

    /// 16x28 grid, seven channels, width 64, 32 latents.
    pub fn desk() -> Self {
        Self {
            schema: Schema::desk(),
            grid: GridSpec::desk(),
            patch_size: 4,
            embed_dim: 64,
            heads: 4,
            kv_groups: 2,
            depth: 1,
            mlp_ratio: 4,
            dropout: 0.0,
            latent_grid: [2, 4, 4],
            n_f: 8,
            max_freq: 8.0,
            swin: SwinConfig::desk(),
            lead_time: 1,
            static_channels: vec!["surface/lsm".into()],
            decoder_abs_time: false,
        }
    }

    /// All published groups on an 8x14 grid.
    pub fn mini() -> Self {
        Self {
            schema: Schema::full(),
            grid: GridSpec::mini(),
            patch_size: 2,
            embed_dim: 32,
            latent_grid: [2, 2, 4],
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "medium" => Ok(Self::medium()),
            "desk" => Ok(Self::desk()),
            "mini" => Ok(Self::mini()),
            other => Err(CoreError::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn n_latent(&self) -> usize {
        self.latent_grid.iter().product()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.embed_dim,
            heads: self.heads,
            kv_groups: self.kv_groups,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.attention().validate()?;
        self.swin.validate()?;
        if self.latent_grid.contains(&0) {
            return Err(CoreError::Config("latent grid dims must be positive".into()));
        }
        if self.embed_dim % 2 != 0 {
            return Err(CoreError::Config("embedding width must be even".into()));
        }
        PatchGrid::for_grid(&self.grid, self.patch_size)?;
        Ok(())
    }
}

/// Predicted states of an autoregressive rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutTrajectory {
    pub steps: Vec<StateSlice>,
    /// Per-channel MAE against truth, when truth was supplied.
    pub diagnostics: Vec<Option<Vec<(String, f64)>>>,
}

impl RolloutTrajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timestamps(&self) -> Vec<Month> {
        self.steps.iter().map(|s| s.timestamp).collect()
    }

    /// One `f32` array `step_<k>/<group>` of shape `(C_g, H, W)` per step and
    /// group, `k` counting from 1.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let first = self.steps.first().ok_or_else(|| CoreError::Empty("empty trajectory".into()))?;
        let mut w = ContainerWriter::new(TRAJECTORY_KIND);
        for (k, s) in self.steps.iter().enumerate() {
            first.check_compatible(s)?;
            for (g, arr) in s.schema.groups().iter().zip(&s.groups) {
                w.push_f32(&format!("step_{}/{}", k + 1, g.group), arr.shape(), arr.iter());
            }
        }
        let meta = TrajectoryMeta {
            grid: first.grid.clone(),
            schema: first.schema.clone(),
            timestamps: self.timestamps(),
            diagnostics: self.diagnostics.clone(),
        };
        Ok(w.finish(serde_json::to_value(meta)?).to_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let r = ContainerReader::from_bytes(bytes, TRAJECTORY_KIND)?;
        let meta: TrajectoryMeta = serde_json::from_value(r.meta().clone())
            .map_err(|e| ContainerError::Header(format!("trajectory metadata: {e}")))?;
        meta.grid.validate()?;
        if meta.diagnostics.len() != meta.timestamps.len() {
            return Err(ContainerError::Header("diagnostics and timestamps differ in length".into()).into());
        }
        let mut steps = Vec::with_capacity(meta.timestamps.len());
        for (k, &t) in meta.timestamps.iter().enumerate() {
            let mut slice = StateSlice::zeros(meta.grid.clone(), meta.schema.clone(), t);
            for (g, arr) in meta.schema.groups().iter().zip(slice.groups.iter_mut()) {
                let name = format!("step_{}/{}", k + 1, g.group);
                let (shape, data) = r.f32_array(&name)?;
                if shape != arr.shape() {
                    return Err(ContainerError::ShapeMismatch(format!("`{name}` has shape {shape:?}")).into());
                }
                arr.as_slice_mut().expect("standard layout").copy_from_slice(&data);
            }
            steps.push(slice);
        }
        if r.header().arrays.len() != steps.len() * meta.schema.groups().len() {
            return Err(ContainerError::ShapeMismatch("container holds arrays the schema does not name".into()).into());
        }
        Ok(Self { steps, diagnostics: meta.diagnostics })
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryMeta {
    grid: GridSpec,
    schema: Schema,
    timestamps: Vec<Month>,
    diagnostics: Vec<Option<Vec<(String, f64)>>>,
}

/// Per-channel centre/scale for a schema.
pub fn channel_stats(schema: &Schema, stats: &NormStats) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = stats.for_schema(schema)?;
    Ok((s.iter().map(|x| x.centre).collect(), s.iter().map(|x| x.scale).collect()))
}

/// `(C, H*W)` normalized rows of one slice, computed in `f64`.
pub fn normalized_rows(slice: &StateSlice, centre: &[f64], scale: &[f64]) -> Vec<f64> {
    let hw = slice.grid.cells();
    let mut rows = slice.to_rows();
    for (k, v) in rows.iter_mut().enumerate() {
        let c = k / hw;
        *v = (*v - centre[c]) / scale[c];
    }
    rows
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbeddingTables,
    pub latent: ParamId,
    pub encoder: PerceiverEncoder,
    pub backbone: SwinBackbone,
    pub queries: QueryTables,
    pub decoder: PerceiverDecoder,
    pub heads: OutputHeads,
    pub adapters: Option<AdapterState>,
    layout: TokenLayout,
    specs: Vec<QuerySpec>,
    latent_raw: Tensor,
    dynamic: Vec<bool>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(derive_seed(seed, Stream::Init, 0));
        let d = config.embed_dim;
        let embed = EmbeddingTables::new(&mut pb, "embed", &config.schema, d, config.patch_size, config.n_f, config.max_freq)?;
        let latent = pb.normal("latent.queries", &[config.n_latent(), d], INIT_STD)?;
        let att = config.attention();
        let encoder = PerceiverEncoder::new(&mut pb, "encoder", &att)?;
        let backbone = SwinBackbone::new(&mut pb, "backbone", config.latent_grid, d, &config.swin)?;
        let queries = QueryTables::new(&mut pb, "queries", &config.schema, d, config.n_f, config.decoder_abs_time)?;
        let decoder = PerceiverDecoder::new(&mut pb, "decoder", &att)?;
        let heads = OutputHeads::new(&mut pb, "heads", &config.schema, &config.grid, d)?;
        let layout = embed.layout(&config.schema, &config.grid)?;
        let specs = query_specs(&config.schema, &config.grid, config.lead_time);
        let [ld, lh, lw] = config.latent_grid;
        let mut raw = Vec::with_capacity(config.n_latent() * fourier_width(config.n_f));
        for _ in 0..ld {
            for h in 0..lh {
                for w in 0..lw {
                    let x = 2.0 * (w as f64 + 0.5) / lw as f64 - 1.0;
                    let y = 1.0 - 2.0 * (h as f64 + 0.5) / lh as f64;
                    raw.extend(fourier_encode(x, y, config.n_f, config.max_freq)?);
                }
            }
        }
        let latent_raw = Tensor::new(vec![config.n_latent(), fourier_width(config.n_f)], raw)?;
        let labels: Vec<String> = config.schema.channels().iter().map(|c| c.label()).collect();
        let dynamic = labels.iter().map(|l| !config.static_channels.contains(l)).collect();
        Ok(Self {
            store: pb.into_store(),
            config,
            embed,
            latent,
            encoder,
            backbone,
            queries,
            decoder,
            heads,
            adapters: None,
            layout,
            specs,
            latent_raw,
            dynamic,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.config.schema
    }

    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn query_specs(&self) -> &[QuerySpec] {
        &self.specs
    }

    /// Whether each channel is forecast (`false` for static masks).
    pub fn dynamic_channels(&self) -> &[bool] {
        &self.dynamic
    }

    /// Latent queries `(N_l, D)`: learned rows plus the projected Fourier
    /// features of each latent cell's horizontal position.
    pub fn latent_queries(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let q = g.param(store, self.latent);
        let raw = g.constant(self.latent_raw.clone());
        let pos = self.embed.fourier.forward(g, store, raw)?;
        Ok(g.add(q, pos)?)
    }

    /// Encoder latent `(N_l, D)` for a normalized input `(2, C, H*W)`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, months: [Month; 2], ctx: &mut ForwardCtx) -> Result<Var> {
        let want = [2, self.config.schema.channel_count(), self.config.grid.cells()];
        if g.shape(x) != want {
            return Err(CoreError::ShapeMismatch(format!("model input {:?}, expected {want:?}", g.shape(x))));
        }
        let tokens = self.embed.embed_tokens(g, store, &self.layout, x, months, self.config.lead_time)?;
        let lq = self.latent_queries(g, store)?;
        self.encoder.encode(g, store, tokens, lq, ctx)
    }

    /// Backbone step from the two input states to the next latent.
    pub fn simulate_latent(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        months: [Month; 2],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let z = self.encode(g, store, x, months, ctx)?;
        self.backbone.forward(g, store, z, ctx)
    }

    /// Decoded outputs `(C, H*W)` for a latent, before any masking.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var, target: Month, ctx: &mut ForwardCtx) -> Result<Var> {
        let pg = self.layout.patch_grid;
        let q = build_queries(g, store, &self.queries, &self.embed, &self.specs, &pg, target)?;
        let y = self.decoder.decode(g, store, z, q, ctx)?;
        self.heads.project_outputs(g, store, y)
    }

    /// Normalized increment `(C, H*W)`; static channels are zero.
    pub fn increment(&self, g: &mut Graph, store: &ParamStore, x: Var, months: [Month; 2], ctx: &mut ForwardCtx) -> Result<Var> {
        let z = self.simulate_latent(g, store, x, months, ctx)?;
        let target = months[1].plus(self.config.lead_time as i64);
        let d = self.decode(g, store, z, target, ctx)?;
        if self.dynamic.iter().all(|&b| b) {
            return Ok(d);
        }
        let hw = self.config.grid.cells();
        let mask = Tensor::from_fn(g.shape(d), |k| if self.dynamic[k / hw] { 1.0 } else { 0.0 });
        let m = g.constant(mask);
        Ok(g.mul(d, m)?)
    }

    fn check_slices(&self, prev: &StateSlice, curr: &StateSlice) -> Result<()> {
        prev.check_compatible(curr)?;
        if curr.schema != self.config.schema {
            return Err(CoreError::SchemaMismatch("input schema differs from the model schema".into()));
        }
        if curr.grid != self.config.grid {
            return Err(CoreError::SchemaMismatch("input grid differs from the model grid".into()));
        }
        Ok(())
    }

    /// Normalized `(2, C, H*W)` input for a pair of slices.
    pub fn input_tensor(&self, prev: &StateSlice, curr: &StateSlice, stats: &NormStats) -> Result<Tensor> {
        self.check_slices(prev, curr)?;
        let (centre, scale) = channel_stats(&self.config.schema, stats)?;
        let mut data = normalized_rows(prev, &centre, &scale);
        data.extend(normalized_rows(curr, &centre, &scale));
        Ok(Tensor::new(vec![2, self.config.schema.channel_count(), self.config.grid.cells()], data)?)
    }

    /// One eval-mode prediction of the state `lead_time` months after `curr`.
    pub fn forward(&self, prev: &StateSlice, curr: &StateSlice, stats: &NormStats) -> Result<StateSlice> {
        let x = self.input_tensor(prev, curr, stats)?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::eval();
        let d = self.increment(&mut g, &self.store, xv, [prev.timestamp, curr.timestamp], &mut ctx)?;
        let inc = g.value(d);
        if !inc.all_finite() {
            return Err(CoreError::NonFinite { step: 0, detail: "prediction contains non-finite values".into() });
        }
        let (_, scale) = channel_stats(&self.config.schema, stats)?;
        let hw = self.config.grid.cells();
        // x_t + scale * increment: identical to adding in normalized space and
        // denormalizing, without a round trip through the centre.
        let rows: Vec<f64> =
            curr.to_rows().iter().zip(inc.data()).enumerate().map(|(k, (&x, &dx))| x + scale[k / hw] * dx).collect();
        StateSlice::from_rows(
            self.config.grid.clone(),
            self.config.schema.clone(),
            curr.timestamp.plus(self.config.lead_time as i64),
            &rows,
        )
    }

    /// Prediction for the step after a batch's second slice.
    pub fn forward_batch(&self, batch: &Batch, stats: &NormStats) -> Result<StateSlice> {
        self.forward(&batch.slice(0), &batch.slice(1), stats)
    }

    /// `K` autoregressive steps, each fed the two most recent states.
    pub fn rollout(&self, prev: &StateSlice, curr: &StateSlice, k: usize, stats: &NormStats) -> Result<RolloutTrajectory> {
        self.rollout_inner(prev, curr, k, stats, None)
    }

    /// As [`Model::rollout`], recording per-channel MAE against `truth[k]`.
    pub fn rollout_with_truth(
        &self,
        prev: &StateSlice,
        curr: &StateSlice,
        truth: &[StateSlice],
        stats: &NormStats,
    ) -> Result<RolloutTrajectory> {
        self.rollout_inner(prev, curr, truth.len(), stats, Some(truth))
    }

    fn rollout_inner(
        &self,
        prev: &StateSlice,
        curr: &StateSlice,
        k: usize,
        stats: &NormStats,
        truth: Option<&[StateSlice]>,
    ) -> Result<RolloutTrajectory> {
        if k == 0 {
            return Err(CoreError::InvalidValue("rollout needs at least one step".into()));
        }
        let labels: Vec<String> = self.config.schema.channels().iter().map(|c| c.label()).collect();
        let mut a = prev.clone();
        let mut b = curr.clone();
        let mut steps = Vec::with_capacity(k);
        let mut diagnostics = Vec::with_capacity(k);
        for i in 0..k {
            let next = self.forward(&a, &b, stats)?;
            diagnostics.push(match truth {
                Some(t) => {
                    let per = metrics::mae_per_channel(&next, &t[i])?;
                    Some(labels.iter().cloned().zip(per).collect())
                }
                None => None,
            });
            steps.push(next.clone());
            a = std::mem::replace(&mut b, next);
        }
        Ok(RolloutTrajectory { steps, diagnostics })
    }

    /// Serialized parameters, config and adapter layout.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut w = ContainerWriter::new(CHECKPOINT_KIND);
        let mut frozen = Vec::new();
        for (_, p) in self.store.iter() {
            w.push_f64(&p.name, p.value.shape(), p.value.data());
            if !p.trainable {
                frozen.push(p.name.clone());
            }
        }
        let meta = CheckpointMeta {
            model: self.config.clone(),
            adapter: self.adapters.as_ref().map(|a| a.config.clone()),
            frozen,
        };
        w.finish(serde_json::to_value(meta).expect("meta serializes")).to_bytes()
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let r = ContainerReader::from_bytes(bytes, CHECKPOINT_KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(r.meta().clone())
            .map_err(|e| ContainerError::Header(format!("checkpoint metadata: {e}")))?;
        let mut model = Model::new(meta.model, 0)?;
        if let Some(cfg) = meta.adapter {
            inject_adapters(&mut model, cfg)?;
        }
        if r.header().arrays.len() != model.store.len() {
            return Err(ContainerError::ShapeMismatch(format!(
                "checkpoint holds {} arrays, model has {} parameters",
                r.header().arrays.len(),
                model.store.len()
            ))
            .into());
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.get(id).name.clone();
            let (shape, data) = r.f64_array(&name)?;
            let p = model.store.get_mut(id);
            if shape != p.value.shape() {
                return Err(ContainerError::ShapeMismatch(format!(
                    "`{name}` has shape {shape:?}, model expects {:?}",
                    p.value.shape()
                ))
                .into());
            }
            p.value = Tensor::new(shape, data)?;
            p.trainable = !meta.frozen.contains(&name);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(&bytes).map_err(|e| match e {
            CoreError::Container(c) => CoreError::Source { path: path.display().to_string(), detail: c.to_string() },
            other => other,
        })
    }

    /// Sets every output-head weight and bias to zero, so the model predicts
    /// a zero increment.
    pub fn zero_heads(&mut self) {
        for (_, _, lin) in &self.heads.heads {
            for id in std::iter::once(lin.w).chain(lin.b) {
                let p = self.store.get_mut(id);
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    adapter: Option<AdapterConfig>,
    frozen: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::desk(), ModelConfig::mini(), ModelConfig::small(), ModelConfig::medium()] {
            c.validate().unwrap();
        }
        let s = ModelConfig::small();
        assert_eq!((s.patch_size, s.heads, s.embed_dim, s.depth), (4, 12, 384, 6));
        assert_eq!(s.swin.encoder_depths, SwinConfig::medium().encoder_depths);
        let m = ModelConfig::medium();
        assert_eq!((m.patch_size, m.heads, m.embed_dim, m.depth), (2, 16, 512, 10));
        assert_eq!(m.swin, SwinConfig::large());
    }

    #[test]
    fn desk_latent_count() {
        assert_eq!(ModelConfig::desk().n_latent(), 32);
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(ModelConfig::preset("huge"), Err(CoreError::Config(_))));
    }
}
