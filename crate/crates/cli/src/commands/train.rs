//! `train` and `finetune`.

use std::path::{Path, PathBuf};

use biocast_core::data_model::NormStats;
use biocast_core::model::Model;
use biocast_core::seed::{derive_seed, Stream};
use biocast_core::training::{inject_adapters, Trainer, Window};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::Ctx;
use crate::data::{consecutive_runs, ensure_dir, load_batches, states_by_month, stats_or_compute};
use crate::error::{CliError, Result};

pub const TRAIN_CHECKPOINT: &str = "model.ckpt";
pub const FINETUNE_CHECKPOINT: &str = "finetuned.ckpt";

fn windows(ctx: &Ctx, model: &Model, k: usize) -> Result<(Vec<Window>, NormStats)> {
    let cfg = &ctx.loaded.config;
    let dir = ctx.loaded.resolve(&cfg.paths.batches);
    let batches = load_batches(&dir)?;
    let (stats, computed) = stats_or_compute(&ctx.loaded.resolve(&cfg.paths.stats), &batches)?;
    if computed {
        ctx.log.warn("stats", json!({ "message": "stats file absent; computed from the training batches" }));
    }
    let runs = consecutive_runs(&states_by_month(&batches), k + 2);
    if runs.is_empty() {
        return Err(CliError::Data(format!("{} holds no run of {} consecutive months", dir.display(), k + 2)));
    }
    let windows = runs.iter().map(|r| Window::from_slices(model, r, &stats)).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((windows, stats))
}

/// Runs `steps` updates, visiting windows in a fresh seeded order each pass.
fn fit(ctx: &Ctx, model: &mut Model, steps: u64, k: usize, out: &Path, tag: &str) -> Result<()> {
    let cfg = &ctx.loaded.config;
    let (windows, _) = windows(ctx, model, k)?;
    let weights = cfg.weights(model.schema())?;
    let mut trainer = Trainer::new(model, cfg.optim.clone(), weights, cfg.seed)?;
    ctx.log.info(
        "fit",
        json!({
            "tag": tag,
            "windows": windows.len(),
            "rollout_k": k,
            "steps": steps,
            "parameters": model.store.numel(),
            "trainable": model.store.trainable_numel(),
        }),
    );
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0;
    for step in 0..steps {
        if order.is_empty() {
            order = (0..windows.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Shuffle, epoch)));
            order.reverse();
            epoch += 1;
        }
        let w = order.pop().expect("refilled");
        let r = trainer.train_step(model, &windows[w], k)?;
        ctx.log.info(
            "step",
            json!({ "tag": tag, "step": r.step, "window": w, "lr": r.lr, "loss": r.loss, "grad_norm": r.grad_norm, "groups": r.groups }),
        );
        let every = cfg.train.checkpoint_every;
        if every > 0 && (step + 1) % every == 0 && step + 1 < steps {
            let p = out.join(format!("{tag}_step_{}.ckpt", step + 1));
            model.save(&p)?;
            ctx.log.info("checkpoint", json!({ "path": p }));
        }
    }
    Ok(())
}

fn prepare_out(ctx: &Ctx, out: Option<PathBuf>, tag: &str) -> Result<PathBuf> {
    let out = out.unwrap_or_else(|| ctx.loaded.resolve(&ctx.loaded.config.paths.output));
    ensure_dir(&out)?;
    std::fs::write(out.join(format!("{tag}.config.toml")), ctx.loaded.config.to_toml())?;
    ctx.log.tee(&out.join(format!("{tag}.log.jsonl")))?;
    ctx.log.info("config", json!({ "resolved": ctx.loaded.config.to_toml() }));
    Ok(out)
}

pub fn train(ctx: &Ctx, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = &ctx.loaded.config;
    let out = prepare_out(ctx, out, "train")?;
    let mut model = Model::new(cfg.model_config()?, cfg.seed)?;
    fit(ctx, &mut model, cfg.train.steps, cfg.train.rollout_k, &out, "train")?;
    let p = out.join(TRAIN_CHECKPOINT);
    model.save(&p)?;
    ctx.log.info("checkpoint", json!({ "path": p, "final": true }));
    Ok(p)
}

pub fn finetune(ctx: &Ctx, base: &Path, out: Option<PathBuf>) -> Result<PathBuf> {
    let cfg = &ctx.loaded.config;
    let mut model = Model::load(base)?;
    let out = prepare_out(ctx, out, "finetune")?;
    match &cfg.finetune.adapter {
        Some(a) => {
            inject_adapters(&mut model, a.clone()).map_err(|e| CliError::Config(e.to_string()))?;
            ctx.log.info("adapters", json!({ "sites": model.adapters.as_ref().map_or(0, |s| s.sites.len()) }));
        }
        None => ctx.log.info("adapters", json!({ "sites": 0, "message": "full fine-tune" })),
    }
    fit(ctx, &mut model, cfg.finetune.steps, cfg.finetune.rollout_k, &out, "finetune")?;
    let p = out.join(FINETUNE_CHECKPOINT);
    model.save(&p)?;
    ctx.log.info("checkpoint", json!({ "path": p, "final": true }));
    Ok(p)
}
