//! Weighted L1 losses, the warm-restart cosine schedule, AdamW with global
//! norm clipping, push-forward rollout fine-tuning and VeRA adapters.
//!
//! Training runs in normalized space: the model predicts a normalized
//! increment and the target is the difference of normalized states.

mod adapters;
mod weights;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;

use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use adapters::{inject_adapters, AdapterConfig, AdapterState};
pub use weights::VariableWeights;

use crate::data_model::{Month, NormStats, Schema, StateSlice};
use crate::error::{CoreError, Result};
use crate::model::{channel_stats, normalized_rows, Model};
use crate::nn::ForwardCtx;
use crate::seed::{derive_seed, Stream};

fn check_pair(a: &StateSlice, b: &StateSlice) -> Result<()> {
    a.check_compatible(b).map_err(|e| match e {
        CoreError::SchemaMismatch(m) => CoreError::ShapeMismatch(m),
        other => other,
    })
}

/// Weighted L1 between two slices: per variable, `w_v` times the mean
/// absolute difference over its levels and cells, summed over variables.
pub fn mae_loss(pred: &StateSlice, target: &StateSlice, weights: &VariableWeights) -> Result<f64> {
    check_pair(pred, target)?;
    let coef = weights.channel_coefficients(&pred.schema, pred.grid.cells())?;
    let hw = pred.grid.cells();
    let (p, t) = (pred.to_rows(), target.to_rows());
    Ok(p.iter().zip(&t).enumerate().map(|(k, (a, b))| coef[k / hw] * (a - b).abs()).sum())
}

/// Same reduction applied to `increment - (x_next - x_t)`; `increment` is
/// `(C, H*W)` row-major.
pub fn td_loss(increment: &[f64], x_t: &StateSlice, x_next: &StateSlice, weights: &VariableWeights) -> Result<f64> {
    check_pair(x_t, x_next)?;
    let hw = x_t.grid.cells();
    let (a, b) = (x_t.to_rows(), x_next.to_rows());
    if increment.len() != a.len() {
        return Err(CoreError::ShapeMismatch(format!("increment of {} values for {} cells", increment.len(), a.len())));
    }
    let coef = weights.channel_coefficients(&x_t.schema, hw)?;
    Ok((0..a.len()).map(|k| coef[k / hw] * (increment[k] - (b[k] - a[k])).abs()).sum())
}

/// `sum(coef * |pred - target|)` on the tape; `coef` is `(C, H*W)`.
pub fn weighted_l1(g: &mut Graph, pred: Var, target: &Tensor, coef: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(pred, t)?;
    let a = g.abs(d);
    let c = g.constant(coef.clone());
    let w = g.mul(a, c)?;
    Ok(g.sum(w))
}

/// Coefficients broadcast to `(C, H*W)`.
pub fn coefficient_tensor(schema: &Schema, cells: usize, weights: &VariableWeights) -> Result<Tensor> {
    let coef = weights.channel_coefficients(schema, cells)?;
    Ok(Tensor::from_fn(&[coef.len(), cells], |k| coef[k / cells]))
}

/// Consecutive normalized states `(C, H*W)` with their months.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub states: Vec<Tensor>,
    pub months: Vec<Month>,
}

impl Window {
    pub fn from_slices(model: &Model, slices: &[StateSlice], stats: &NormStats) -> Result<Self> {
        if slices.len() < 3 {
            return Err(CoreError::InvalidValue(format!("a training window needs 3 states, got {}", slices.len())));
        }
        let (centre, scale) = channel_stats(model.schema(), stats)?;
        let shape = [model.schema().channel_count(), model.grid().cells()];
        let mut states = Vec::with_capacity(slices.len());
        for (i, s) in slices.iter().enumerate() {
            if s.schema != *model.schema() || s.grid != *model.grid() {
                return Err(CoreError::SchemaMismatch(format!("window state {i} does not match the model")));
            }
            s.validate()?;
            states.push(Tensor::new(shape.to_vec(), normalized_rows(s, &centre, &scale))?);
        }
        for w in slices.windows(2) {
            if w[1].timestamp <= w[0].timestamp {
                return Err(CoreError::InvalidValue("window months must increase".into()));
            }
        }
        Ok(Self { states, months: slices.iter().map(|s| s.timestamp).collect() })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let mut shape = vec![2];
    shape.extend_from_slice(a.shape());
    Tensor::new(shape, data).expect("same shapes")
}

fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()).expect("same shapes")
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).expect("same shapes")
}

/// Recorded loss plus the final step's increment and its target.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub loss: Var,
    pub increment: Var,
    pub target: Tensor,
}

/// One-step temporal-difference loss on the tape: the increment predicted
/// from states `0, 1` against `state[2] - state[1]`.
pub fn td_loss_graph(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    window: &Window,
    coef: &Tensor,
    ctx: &mut ForwardCtx,
) -> Result<LossParts> {
    ft_loss(g, model, store, window, coef, 1, ctx)
}

/// Rollout fine-tuning loss over `k` steps, averaged. Steps `1..k` run
/// without a tape and enter as constants; only the final step's forward
/// pass is recorded.
pub fn ft_loss(
    g: &mut Graph,
    model: &Model,
    store: &ParamStore,
    window: &Window,
    coef: &Tensor,
    k: usize,
    ctx: &mut ForwardCtx,
) -> Result<LossParts> {
    if k == 0 {
        return Err(CoreError::InvalidValue("rollout length must be at least 1".into()));
    }
    if window.len() < k + 2 {
        return Err(CoreError::InvalidValue(format!(
            "{k}-step loss needs {} states, window has {}",
            k + 2,
            window.len()
        )));
    }
    let mut a = window.states[0].clone();
    let mut b = window.states[1].clone();
    let mut earlier = 0.0;
    for step in 1..k {
        let mut g0 = Graph::new();
        let x = g0.constant(stack(&a, &b));
        let months = [window.months[step - 1], window.months[step]];
        let inc = model.increment(&mut g0, store, x, months, ctx)?;
        let target = sub(&window.states[step + 1], &b);
        let l = weighted_l1(&mut g0, inc, &target, coef)?;
        earlier += g0.value(l).item();
        let next = add(&b, g0.value(inc));
        a = std::mem::replace(&mut b, next);
    }
    let x = g.constant(stack(&a, &b));
    let months = [window.months[k - 1], window.months[k]];
    let inc = model.increment(g, store, x, months, ctx)?;
    let target = sub(&window.states[k + 1], &b);
    let last = weighted_l1(g, inc, &target, coef)?;
    let loss = if k == 1 {
        last
    } else {
        let e = g.constant(Tensor::full(g.shape(last), earlier));
        let s = g.add(last, e)?;
        g.scale(s, 1.0 / k as f64)
    };
    Ok(LossParts { loss, increment: inc, target })
}

/// Learning-rate schedule and optimizer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSchedule {
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Restart period in gradient steps.
    pub t_periodic: u64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` or a non-positive value disables
    /// clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimSchedule {
    fn default() -> Self {
        Self::full()
    }
}

impl OptimSchedule {
    pub fn full() -> Self {
        Self {
            base_lr: 5e-5,
            weight_decay: 5e-6,
            t_periodic: 8000,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }

    /// Cosine decay from `base_lr` to `min_lr` within each period, restarting
    /// at every multiple of `t_periodic`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let t = self.t_periodic.max(1);
        let phase = (step % t) as f64 / t as f64;
        self.min_lr + (self.base_lr - self.min_lr) * (1.0 + (PI * phase).cos()) / 2.0
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Frozen parameters are skipped;
/// trainable parameters without a gradient are treated as having zero
/// gradient.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
    pub t: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64, s: &OptimSchedule) {
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t as i32);
        let bc2 = 1.0 - s.beta2.powi(self.t as i32);
        let by_id: BTreeMap<ParamId, &Tensor> = grads.iter().map(|(id, g)| (*id, g)).collect();
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = by_id.get(&id).map(|t| t.data());
            let decay = 1.0 - lr * s.weight_decay;
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
                v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
                *w *= decay;
                *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + s.eps);
            }
        }
    }
}

/// Outcome of one gradient step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Final-step weighted loss split by variable group.
    pub groups: BTreeMap<String, f64>,
}

/// Owns optimizer state across gradient steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub schedule: OptimSchedule,
    pub weights: VariableWeights,
    pub optimizer: AdamW,
    pub step: u64,
    pub seed: u64,
    coef: Tensor,
}

impl Trainer {
    pub fn new(model: &Model, schedule: OptimSchedule, weights: VariableWeights, seed: u64) -> Result<Self> {
        let coef = coefficient_tensor(model.schema(), model.grid().cells(), &weights)?;
        Ok(Self { schedule, weights, optimizer: AdamW::new(), step: 0, seed, coef })
    }

    pub fn coefficients(&self) -> &Tensor {
        &self.coef
    }

    /// One update on a window; `k = 1` is the temporal-difference objective,
    /// larger `k` the push-forward rollout objective.
    pub fn train_step(&mut self, model: &mut Model, window: &Window, k: usize) -> Result<StepReport> {
        let mut ctx = ForwardCtx::train(derive_seed(self.seed, Stream::Dropout, self.step));
        let mut g = Graph::new();
        let parts = ft_loss(&mut g, model, &model.store, window, &self.coef, k, &mut ctx)?;
        let value = g.value(parts.loss).item();
        if !value.is_finite() {
            return Err(CoreError::NonFinite { step: self.step, detail: format!("loss is {value}") });
        }
        let grads = g.backward(parts.loss)?;
        let mut grads: Vec<(ParamId, Tensor)> = grads.params().into_iter().map(|(id, t)| (id, t.clone())).collect();
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            let name = model.store.get(*id).name.clone();
            return Err(CoreError::NonFinite { step: self.step, detail: format!("gradient of `{name}` is not finite") });
        }
        let grad_norm = match self.schedule.clip_norm {
            Some(c) if c > 0.0 => clip_global_norm(&mut grads, c),
            _ => grads.iter().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt(),
        };
        let lr = self.schedule.lr_at(self.step);
        self.optimizer.step(&mut model.store, &grads, lr, &self.schedule);

        let groups = group_losses(model.schema(), g.value(parts.increment), &parts.target, &self.coef);
        let report = StepReport { step: self.step, lr, loss: value, grad_norm, groups };
        self.step += 1;
        Ok(report)
    }
}

fn group_losses(schema: &Schema, inc: &Tensor, target: &Tensor, coef: &Tensor) -> BTreeMap<String, f64> {
    let hw = inc.shape()[1];
    let channels = schema.channels();
    let mut out = BTreeMap::new();
    for (k, ((p, t), c)) in inc.data().iter().zip(target.data()).zip(coef.data()).enumerate() {
        *out.entry(channels[k / hw].group.to_string()).or_insert(0.0) += c * (p - t).abs();
    }
    out
}

/// Append-only JSON-lines log.
pub struct TrainLog<W: Write> {
    out: W,
}

impl<W: Write> TrainLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
