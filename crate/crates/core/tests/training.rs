mod common;

use biocast_autograd::{Graph, Tensor};
use biocast_core::data_model::{GroupName, StateSlice};
use biocast_core::model::{Model, ModelConfig};
use biocast_core::nn::ForwardCtx;
use biocast_core::training::{
    clip_global_norm, coefficient_tensor, inject_adapters, mae_loss, td_loss, td_loss_graph, AdamW, AdapterConfig,
    OptimSchedule, StepReport, TrainLog, Trainer, VariableWeights, Window,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk(n: usize, seed: u64) -> (Model, Vec<StateSlice>, biocast_core::data_model::NormStats) {
    let cfg = ModelConfig::desk();
    let series = common::synthetic_series(&cfg.schema, &cfg.grid, common::start(), n, seed);
    let stats = common::stats_for(&series);
    (Model::new(cfg, 0).unwrap(), series, stats)
}

fn slice_with(base: &StateSlice, rows: Vec<f64>) -> StateSlice {
    StateSlice::from_rows(base.grid.clone(), base.schema.clone(), base.timestamp, &rows).unwrap()
}

#[test]
fn graph_td_loss_matches_scalar() {
    let (model, series, stats) = desk(3, 5);
    let window = Window::from_slices(&model, &series, &stats).unwrap();
    let weights = VariableWeights::full();
    let coef = coefficient_tensor(model.schema(), model.grid().cells(), &weights).unwrap();
    let mut g = Graph::new();
    let parts = td_loss_graph(&mut g, &model, &model.store, &window, &coef, &mut ForwardCtx::eval()).unwrap();
    let graph = g.value(parts.loss).item();

    // The window holds the states the scalar loss sees, already normalized.
    let x1 = slice_with(&series[1], window.states[1].data().to_vec());
    let x2 = slice_with(&series[2], window.states[2].data().to_vec());
    let inc = g.value(parts.increment).data().to_vec();
    let scalar = td_loss(&inc, &x1, &x2, &weights).unwrap();
    // Slices hold f32, the window f64.
    assert!((graph - scalar).abs() <= 1e-6 * graph.abs(), "{graph} vs {scalar}");
}

#[test]
fn window_errors() {
    let (model, series, stats) = desk(3, 5);
    assert!(Window::from_slices(&model, &series[..2], &stats).is_err());
    let reversed: Vec<_> = series.iter().rev().cloned().collect();
    assert!(Window::from_slices(&model, &reversed, &stats).is_err());
    let mini = ModelConfig::mini();
    let other = common::synthetic_series(&mini.schema, &mini.grid, common::start(), 3, 1);
    assert!(Window::from_slices(&model, &other, &stats).is_err());
}

#[test]
fn ft_loss_rejects_short_windows() {
    let (model, series, stats) = desk(3, 5);
    let window = Window::from_slices(&model, &series, &stats).unwrap();
    let mut trainer = Trainer::new(&model, OptimSchedule::full(), VariableWeights::full(), 0).unwrap();
    let mut m = model.clone();
    assert!(trainer.train_step(&mut m, &window, 0).is_err());
    assert!(trainer.train_step(&mut m, &window, 2).is_err());
}

#[test]
fn adamw_skips_frozen_and_decays_idle() {
    let mut store = biocast_autograd::ParamStore::default();
    let a = store.insert("a", Tensor::full(&[3], 2.0), true).unwrap();
    let b = store.insert("b", Tensor::full(&[3], 2.0), false).unwrap();
    let c = store.insert("c", Tensor::full(&[3], 2.0), true).unwrap();
    let s = OptimSchedule { weight_decay: 0.5, ..OptimSchedule::full() };
    let mut opt = AdamW::new();
    let grads = vec![(a, Tensor::full(&[3], 1.0)), (b, Tensor::full(&[3], 1.0))];
    opt.step(&mut store, &grads, 0.1, &s);
    assert_eq!(store.get(b).value.data(), &[2.0; 3]);
    // Zero gradient: only the decoupled decay acts.
    assert!(store.get(c).value.data().iter().all(|&v| (v - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15));
    // First Adam step moves by lr after bias correction.
    let expect = 2.0 * (1.0 - 0.05) - 0.1 * 1.0 / (1.0 + 1e-8);
    assert!(store.get(a).value.data().iter().all(|&v| (v - expect).abs() < 1e-12));
}

#[test]
fn training_is_deterministic() {
    let (model, series, stats) = desk(3, 5);
    let window = Window::from_slices(&model, &series, &stats).unwrap();
    let run = || {
        let mut m = model.clone();
        let mut t = Trainer::new(&m, OptimSchedule::full(), VariableWeights::full(), 7).unwrap();
        let reports: Vec<StepReport> = (0..3).map(|_| t.train_step(&mut m, &window, 1).unwrap()).collect();
        (m.to_checkpoint(), reports)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.iter().map(|r| r.step).collect::<Vec<_>>(), [0, 1, 2]);
    let total: f64 = ra[0].groups.values().sum();
    assert!((total - ra[0].loss).abs() < 1e-12 * ra[0].loss);
}

#[test]
fn adapter_training_touches_only_trainable() {
    let (mut model, series, stats) = desk(4, 6);
    inject_adapters(&mut model, AdapterConfig::default()).unwrap();
    assert!(inject_adapters(&mut model, AdapterConfig::default()).is_err());
    let window = Window::from_slices(&model, &series, &stats).unwrap();
    let before = model.store.clone();
    let mut t = Trainer::new(&model, OptimSchedule::full(), VariableWeights::full(), 0).unwrap();
    t.train_step(&mut model, &window, 2).unwrap();
    let mut moved = 0;
    for ((_, p), (_, q)) in before.iter().zip(model.store.iter()) {
        if p.trainable {
            moved += usize::from(p.value != q.value);
        } else {
            assert_eq!(p.value, q.value, "{}", p.name);
        }
    }
    assert!(moved > 0);
    // Heads stay trainable by default.
    assert!(model.store.iter().any(|(_, p)| p.trainable && p.name.starts_with("heads.")));
}

#[test]
fn adapter_config_errors() {
    let (mut model, _, _) = desk(2, 0);
    assert!(inject_adapters(&mut model.clone(), AdapterConfig { rank: 0, ..AdapterConfig::default() }).is_err());
    assert!(inject_adapters(&mut model, AdapterConfig { targets: vec![], ..AdapterConfig::default() }).is_err());
}

#[test]
fn train_log_writes_json_lines() {
    let mut log = TrainLog::new(Vec::new());
    let r = StepReport { step: 3, lr: 1e-4, loss: 0.5, grad_norm: 2.0, groups: [("surface".to_string(), 0.5)].into() };
    log.record(&r).unwrap();
    log.record(&r).unwrap();
    let text = String::from_utf8(log.into_inner()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let back: StepReport = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(back, r);
}

#[test]
fn weights_cover_the_schema() {
    let schema = ModelConfig::desk().schema;
    let w = VariableWeights::uniform(&schema);
    let coef = w.channel_coefficients(&schema, 10).unwrap();
    // Per variable the coefficients sum to w_v / cells.
    let t: f64 = coef.iter().take(1).sum();
    assert!((t - 0.1).abs() < 1e-15);
    let mut partial = VariableWeights::new([((GroupName::Surface, "t2m".to_string()), 1.0)]).unwrap();
    assert!(partial.channel_coefficients(&schema, 10).is_err());
    assert!(partial.set(GroupName::Surface, "msl", -1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mae_loss_is_a_metric_like(seed in any::<u64>()) {
        let schema = ModelConfig::mini().schema;
        let grid = ModelConfig::mini().grid;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = schema.channel_count() * grid.cells();
        let base = StateSlice::zeros(grid.clone(), schema.clone(), common::start());
        let a = slice_with(&base, common::rand_vec(&mut rng, n, -3.0, 3.0));
        let b = slice_with(&base, common::rand_vec(&mut rng, n, -3.0, 3.0));
        let w = VariableWeights::full();
        prop_assert_eq!(mae_loss(&a, &a, &w).unwrap(), 0.0);
        let ab = mae_loss(&a, &b, &w).unwrap();
        prop_assert!(ab > 0.0);
        prop_assert!((ab - mae_loss(&b, &a, &w).unwrap()).abs() < 1e-12);
        // A zero increment scores the true increment's size.
        let zero = vec![0.0; n];
        prop_assert!((td_loss(&zero, &a, &b, &w).unwrap() - ab).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm(vals in prop::collection::vec(-50.0f64..50.0, 1..40), max in 0.01f64..10.0) {
        let mut store = biocast_autograd::ParamStore::default();
        let id = store.insert("p", Tensor::zeros(&[vals.len()]), true).unwrap();
        let mut grads = vec![(id, Tensor::new(vec![vals.len()], vals.clone()).unwrap())];
        let before = clip_global_norm(&mut grads, max);
        let after = grads[0].1.norm_sq().sqrt();
        prop_assert!(after <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(grads[0].1.data(), &vals[..]);
        }
    }

    #[test]
    fn lr_stays_in_range(step in 0u64..100_000) {
        let s = OptimSchedule::full();
        let lr = s.lr_at(step);
        prop_assert!(lr >= s.min_lr && lr <= s.base_lr);
        prop_assert_eq!(lr, s.lr_at(step + s.t_periodic));
    }
}
