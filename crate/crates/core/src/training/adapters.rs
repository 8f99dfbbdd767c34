use biocast_autograd::{ParamId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::nn::{Linear, VeraSite};
use crate::seed::{derive_seed, Stream};

/// VeRA adapter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Name suffixes of backbone projections to adapt.
    pub targets: Vec<String>,
    /// Keep the output heads trainable alongside the adapters.
    pub train_heads: bool,
    /// Initial value of every per-rank scaling entry.
    pub d_init: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 8, targets: vec!["attn.qkv".into(), "attn.proj".into()], train_heads: true, d_init: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdapterState {
    pub config: AdapterConfig,
    pub shared_a: ParamId,
    pub shared_b: ParamId,
    /// Adapted projection names.
    pub sites: Vec<String>,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Freezes the model and attaches one adapter site to each targeted backbone
/// projection. Sites share frozen random matrices `A (max_in, r)` and
/// `B (r, max_out)`; each site trains a scaling `d (r)` and `b (d_out)`.
/// With `b = 0` the adapted forward pass equals the base one.
pub fn inject_adapters(model: &mut Model, cfg: AdapterConfig) -> Result<()> {
    if model.adapters.is_some() {
        return Err(CoreError::Config("model already carries adapters".into()));
    }
    if cfg.rank == 0 {
        return Err(CoreError::Config("adapter rank must be positive".into()));
    }
    if cfg.targets.is_empty() {
        return Err(CoreError::Config("no adapter targets".into()));
    }
    let matches = |l: &Linear| cfg.targets.iter().any(|t| l.name.ends_with(t.as_str()));
    for t in &cfg.targets {
        let hit = model.backbone.attention_linears_mut().into_iter().any(|l| l.name.ends_with(t.as_str()));
        if !hit {
            return Err(CoreError::Config(format!("adapter target `{t}` matches no backbone projection")));
        }
    }
    let (mut max_in, mut max_out) = (0, 0);
    for l in model.backbone.attention_linears_mut() {
        if matches(l) {
            max_in = max_in.max(l.d_in);
            max_out = max_out.max(l.d_out);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Adapters, 0));
    let r = cfg.rank;
    let store = &mut model.store;
    store.freeze_all();
    let shared_a = store.insert("adapter.shared_a", uniform_tensor(&mut rng, &[max_in, r], max_in), false)?;
    let shared_b = store.insert("adapter.shared_b", uniform_tensor(&mut rng, &[r, max_out], r), false)?;

    let mut sites = Vec::new();
    for l in model.backbone.attention_linears_mut() {
        if !matches(l) {
            continue;
        }
        let d = store.insert(format!("{}.vera_d", l.name), Tensor::full(&[r], cfg.d_init), true)?;
        let b = store.insert(format!("{}.vera_b", l.name), Tensor::zeros(&[l.d_out]), true)?;
        l.adapter = Some(VeraSite::new(d, b, (shared_a, [max_in, r]), (shared_b, [r, max_out]), l.d_in, l.d_out));
        sites.push(l.name.clone());
    }
    if cfg.train_heads {
        for (_, ln, lin) in &model.heads.heads {
            for id in [ln.gamma, ln.beta, lin.w].into_iter().chain(lin.b) {
                store.set_trainable(id, true);
            }
        }
    }
    model.adapters = Some(AdapterState { config: cfg, shared_a, shared_b, sites });
    Ok(())
}
