//! `gradcheck`: central finite differences against the tape's gradients.
//!
//! Two component suites run on small randomized blocks; the loss suites run
//! on the configured model, fed from the batch directory when it holds four
//! consecutive months and from seeded noise otherwise.

use std::path::PathBuf;

use biocast_autograd::gradcheck::{central_difference, compare};
use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use biocast_core::data_model::{compute_norm_stats, Batch, StateSlice};
use biocast_core::model::Model;
use biocast_core::nn::{ForwardCtx, ParamBuilder};
use biocast_core::perceiver::{AttentionConfig, CrossAttentionBlock};
use biocast_core::seed::{derive_seed, Stream};
use biocast_core::swin::{SwinConfig, SwinStage};
use biocast_core::training::{coefficient_tensor, ft_loss, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::Ctx;
use crate::data::{consecutive_runs, load_batches, states_by_month, stats_or_compute};
use crate::error::{CliError, Result};

pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-5;

#[derive(Debug, Serialize)]
pub struct Suite {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub tolerance: f64,
    pub data: String,
    pub suites: Vec<Suite>,
    pub pass: bool,
}

fn rng(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Init, k))
}

fn noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
}

fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store.iter().filter(|(_, p)| p.trainable).flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i))).collect()
}

fn one_per_param(store: &ParamStore, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, rng.gen_range(0..p.value.len()))).collect()
}

/// `sum(y * r)` with a fixed random `r`.
fn probe(g: &mut Graph, y: Var, r: &Tensor) -> Var {
    let r = g.constant(r.clone());
    let p = g.mul(y, r).expect("probe shape");
    g.sum(p)
}

/// Worst relative error over the given parameter coordinates and every
/// coordinate of `leaves`.
fn check<F>(store: &ParamStore, coords: &[(ParamId, usize)], leaves: &[Tensor], f: F) -> (f64, usize)
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, store, &vars);
    let grads = g.backward(loss).expect("scalar loss");
    let mut analytic: Vec<f64> = coords.iter().map(|&(id, i)| grads.param(id).map_or(0.0, |t| t.data()[i])).collect();
    for (v, t) in vars.iter().zip(leaves) {
        match grads.get(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }
    let mut x: Vec<f64> = coords.iter().map(|&(id, i)| store.get(id).value.data()[i]).collect();
    leaves.iter().for_each(|t| x.extend_from_slice(t.data()));
    let mut work = store.clone();
    let numeric = central_difference(
        |x| {
            for (k, &(id, i)) in coords.iter().enumerate() {
                work.get_mut(id).value.data_mut()[i] = x[k];
            }
            let mut off = coords.len();
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves
                .iter()
                .map(|t| {
                    let v = g.constant(Tensor::new(t.shape().to_vec(), x[off..off + t.len()].to_vec()).expect("sized"));
                    off += t.len();
                    v
                })
                .collect();
            let l = f(&mut g, &work, &vars);
            g.value(l).item()
        },
        &x,
        STEP,
    );
    let r = compare(&analytic, &numeric, FLOOR);
    (r.max_relative_error, r.checked)
}

fn cross_attention(seed: u64) -> Result<(f64, usize)> {
    let cfg = AttentionConfig { dim: 8, heads: 2, kv_groups: 1, depth: 0, mlp_ratio: 2, dropout: 0.0 };
    let mut r = rng(seed, 1);
    let mut pb = ParamBuilder::new(r.gen());
    let block = CrossAttentionBlock::new(&mut pb, "x", &cfg, true)?;
    let mut store = pb.into_store();
    randomize(&mut store, &mut r);
    let leaves = [noise(&[3, 8], &mut r), noise(&[5, 8], &mut r)];
    let w = noise(&[3, 8], &mut r);
    Ok(check(&store, &all_coords(&store), &leaves, |g, s, v| {
        let y = block.cross_attention(g, s, v[0], v[1], &mut ForwardCtx::eval()).expect("shapes");
        probe(g, y, &w)
    }))
}

fn swin_stage(seed: u64) -> Result<(f64, usize)> {
    let cfg = SwinConfig { window: [1, 2, 2], ..SwinConfig::desk() };
    let mut r = rng(seed, 2);
    let mut pb = ParamBuilder::new(r.gen());
    let stage = SwinStage::new(&mut pb, "s", [2, 4, 4], 8, 2, 2, &[0.0, 0.0], &cfg)?;
    let mut store = pb.into_store();
    randomize(&mut store, &mut r);
    let leaves = [noise(&[32, 8], &mut r)];
    let w = noise(&[32, 8], &mut r);
    Ok(check(&store, &all_coords(&store), &leaves, |g, s, v| {
        let y = stage.forward(g, s, v[0], &mut ForwardCtx::eval()).expect("shapes");
        probe(g, y, &w)
    }))
}

/// Four consecutive states for the configured model, and where they came from.
fn model_window(ctx: &Ctx, model: &Model) -> Result<(Window, String)> {
    let cfg = &ctx.loaded.config;
    let dir = ctx.loaded.resolve(&cfg.paths.batches);
    if let Ok(batches) = load_batches(&dir) {
        if let Some(run) = consecutive_runs(&states_by_month(&batches), 4).into_iter().next() {
            let (stats, _) = stats_or_compute(&ctx.loaded.resolve(&cfg.paths.stats), &batches)?;
            return Ok((Window::from_slices(model, &run, &stats)?, dir.display().to_string()));
        }
    }
    let mut r = rng(cfg.seed, 3);
    let start = cfg.data.start;
    let n = model.schema().channel_count() * model.grid().cells();
    let series: Vec<StateSlice> = (0..4)
        .map(|t| {
            let rows: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
            StateSlice::from_rows(model.grid().clone(), model.schema().clone(), start.plus(t), &rows)
        })
        .collect::<std::result::Result<_, _>>()?;
    let pairs: Vec<Batch> = series.windows(2).map(|w| Batch::from_slices(&w[0], &w[1])).collect::<std::result::Result<_, _>>()?;
    let stats = compute_norm_stats(&pairs)?;
    Ok((Window::from_slices(model, &series, &stats)?, "seeded noise".into()))
}

fn sub_window(w: &Window, range: std::ops::Range<usize>) -> Window {
    Window { states: w.states[range.clone()].to_vec(), months: w.months[range].to_vec() }
}

fn td_loss(model: &Model, window: &Window, coef: &Tensor, seed: u64) -> Result<(f64, usize)> {
    let first = sub_window(window, 0..3);
    let coords = one_per_param(&model.store, &mut rng(seed, 4));
    Ok(check(&model.store, &coords, &[], |g, s, _| {
        ft_loss(g, model, s, &first, coef, 1, &mut ForwardCtx::eval()).expect("window fits").loss
    }))
}

/// With the first step's output held constant, the two-step objective is
/// `(L1 + L2(theta)) / 2`, `L2` a one-step loss from the fixed first
/// prediction; its differences are the reference.
fn ft_loss2(model: &Model, window: &Window, coef: &Tensor, seed: u64) -> Result<(f64, usize)> {
    let first = sub_window(window, 0..3);
    let mut g = Graph::new();
    let p1 = ft_loss(&mut g, model, &model.store, &first, coef, 1, &mut ForwardCtx::eval())?;
    let l1 = g.value(p1.loss).item();
    let pred = Tensor::new(
        window.states[1].shape().to_vec(),
        window.states[1].data().iter().zip(g.value(p1.increment).data()).map(|(a, b)| a + b).collect(),
    )?;
    let second = Window { states: vec![window.states[1].clone(), pred, window.states[3].clone()], months: window.months[1..4].to_vec() };

    let coords = one_per_param(&model.store, &mut rng(seed, 5));
    let mut g = Graph::new();
    let parts = ft_loss(&mut g, model, &model.store, window, coef, 2, &mut ForwardCtx::eval())?;
    let grads = g.backward(parts.loss).map_err(|e| CliError::Numerical(e.to_string()))?;
    let analytic: Vec<f64> = coords.iter().map(|&(id, i)| grads.param(id).map_or(0.0, |t| t.data()[i])).collect();
    let x0: Vec<f64> = coords.iter().map(|&(id, i)| model.store.get(id).value.data()[i]).collect();
    let mut work = model.store.clone();
    let numeric = central_difference(
        |x| {
            for (k, &(id, i)) in coords.iter().enumerate() {
                work.get_mut(id).value.data_mut()[i] = x[k];
            }
            let mut g = Graph::new();
            let p = ft_loss(&mut g, model, &work, &second, coef, 1, &mut ForwardCtx::eval()).expect("window fits");
            (l1 + g.value(p.loss).item()) / 2.0
        },
        &x0,
        STEP,
    );
    let r = compare(&analytic, &numeric, FLOOR);
    Ok((r.max_relative_error, r.checked))
}

pub const SUITES: [&str; 4] = ["cross_attention", "swin_stage", "td_loss", "ft_loss_k2"];

/// Runs the named suites, or all of them when `only` is empty.
pub fn run(ctx: &Ctx, only: &[String], tolerance: Option<f64>, out: Option<PathBuf>) -> Result<Report> {
    let cfg = &ctx.loaded.config;
    let tolerance = tolerance.unwrap_or(TOLERANCE);
    if let Some(bad) = only.iter().find(|s| !SUITES.contains(&s.as_str())) {
        return Err(CliError::Config(format!("unknown suite `{bad}` (known: {})", SUITES.join(", "))));
    }
    let model = Model::new(cfg.model_config()?, cfg.seed)?;
    let (window, data) = model_window(ctx, &model)?;
    let coef = coefficient_tensor(model.schema(), model.grid().cells(), &cfg.weights(model.schema())?)?;

    let mut suites = Vec::new();
    let runs: [(&str, Box<dyn Fn() -> Result<(f64, usize)> + '_>); 4] = [
        ("cross_attention", Box::new(|| cross_attention(cfg.seed))),
        ("swin_stage", Box::new(|| swin_stage(cfg.seed))),
        ("td_loss", Box::new(|| td_loss(&model, &window, &coef, cfg.seed))),
        ("ft_loss_k2", Box::new(|| ft_loss2(&model, &window, &coef, cfg.seed))),
    ];
    for (name, f) in runs {
        if !only.is_empty() && !only.iter().any(|s| s == name) {
            continue;
        }
        let (err, checked) = f()?;
        let pass = err <= tolerance;
        ctx.log.info("gradcheck", json!({ "suite": name, "checked": checked, "max_relative_error": err, "pass": pass }));
        suites.push(Suite { name: name.into(), checked, max_relative_error: err, pass });
    }
    let pass = suites.iter().all(|s| s.pass);
    let report = Report { tolerance, data, suites, pass };
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(p, text + "\n")?;
    }
    if !pass {
        return Err(CliError::Numerical(format!("gradient check failed at tolerance {tolerance:e}")));
    }
    Ok(report)
}
