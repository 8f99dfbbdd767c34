mod common;

use biocast_core::data_model::{GroupName, Schema, StateSlice, VariableGroupSchema};
use biocast_core::metrics;
use biocast_core::model::{Model, ModelConfig, RolloutTrajectory};
use biocast_core::training::{inject_adapters, AdapterConfig};
use biocast_core::CoreError;

fn mini() -> (Model, Vec<StateSlice>, biocast_core::data_model::NormStats) {
    let cfg = ModelConfig::mini();
    let series = common::synthetic_series(&cfg.schema, &cfg.grid, common::start(), 5, 9);
    let stats = common::stats_for(&series);
    (Model::new(cfg, 3).unwrap(), series, stats)
}

#[test]
fn same_seed_same_weights() {
    let a = Model::new(ModelConfig::mini(), 11).unwrap();
    let b = Model::new(ModelConfig::mini(), 11).unwrap();
    let c = Model::new(ModelConfig::mini(), 12).unwrap();
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    assert_ne!(a.to_checkpoint(), c.to_checkpoint());
}

#[test]
fn checkpoint_round_trip() {
    let (model, s, stats) = mini();
    let back = Model::from_checkpoint(&model.to_checkpoint()).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.forward(&s[0], &s[1], &stats).unwrap(), model.forward(&s[0], &s[1], &stats).unwrap());
}

#[test]
fn checkpoint_keeps_adapters_and_frozen_flags() {
    let (mut model, s, stats) = mini();
    inject_adapters(&mut model, AdapterConfig { train_heads: false, ..AdapterConfig::default() }).unwrap();
    // Move the adapters off their identity initialization.
    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.name.ends_with("vera_b")).map(|(id, _)| id).collect();
    for id in ids {
        model.store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.05);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert!(back.adapters.is_some());
    let flags = |m: &Model| m.store.iter().map(|(_, p)| (p.name.clone(), p.trainable)).collect::<Vec<_>>();
    assert_eq!(flags(&back), flags(&model));
    assert_eq!(back.forward(&s[0], &s[1], &stats).unwrap(), model.forward(&s[0], &s[1], &stats).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let (model, _, _) = mini();
    let mut bytes = model.to_checkpoint();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    assert!(Model::from_checkpoint(&bytes).is_err());
    assert!(Model::from_checkpoint(&bytes[..n / 2]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    match Model::load(&path) {
        Err(CoreError::Source { path: p, .. }) => assert!(p.ends_with("bad.ckpt")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn forward_rejects_mismatched_inputs() {
    let (model, s, stats) = mini();
    let other = StateSlice::zeros(s[0].grid.clone(), Schema::desk(), s[0].timestamp);
    assert!(model.forward(&other, &s[1], &stats).is_err());
    assert!(model.forward(&s[0], &other, &stats).is_err());
}

#[test]
fn rollout_needs_a_step() {
    let (model, s, stats) = mini();
    assert!(model.rollout(&s[0], &s[1], 0, &stats).is_err());
}

#[test]
fn rollout_diagnostics_match_scorecard() {
    let (model, s, stats) = mini();
    let truth = &s[2..5];
    let traj = model.rollout_with_truth(&s[0], &s[1], truth, &stats).unwrap();
    assert_eq!(traj.len(), 3);
    assert_eq!(traj.timestamps(), truth.iter().map(|t| t.timestamp).collect::<Vec<_>>());
    let card = metrics::rollout_scorecard(&traj, truth).unwrap();
    for (k, diag) in traj.diagnostics.iter().enumerate() {
        let diag = diag.as_ref().unwrap();
        for (v, (label, e)) in diag.iter().enumerate() {
            assert_eq!(label, &card.variables[v]);
            assert_eq!(*e, card.mae[v][k]);
        }
    }
    let plain = model.rollout(&s[0], &s[1], 3, &stats).unwrap();
    assert_eq!(plain.steps, traj.steps);
    assert!(plain.diagnostics.iter().all(Option::is_none));
}

#[test]
fn static_channels_are_carried_over() {
    let mut cfg = ModelConfig::desk();
    let mut groups = cfg.schema.groups().to_vec();
    groups[0] = VariableGroupSchema::new(GroupName::Surface, &["t2m", "msl", "lsm"], None);
    cfg.schema = Schema::new(groups).unwrap();
    let series = common::synthetic_series(&cfg.schema, &cfg.grid, common::start(), 2, 4);
    let stats = common::stats_for(&common::synthetic_series(&cfg.schema, &cfg.grid, common::start(), 3, 4));
    let model = Model::new(cfg, 1).unwrap();
    let out = model.forward(&series[0], &series[1], &stats).unwrap();
    let labels: Vec<String> = model.schema().channels().iter().map(|c| c.label()).collect();
    let hw = model.grid().cells();
    let (a, b) = (out.to_rows(), series[1].to_rows());
    let mut saw_static = false;
    for (c, dynamic) in model.dynamic_channels().iter().enumerate() {
        if !dynamic {
            saw_static = true;
            assert_eq!(a[c * hw..(c + 1) * hw], b[c * hw..(c + 1) * hw], "{}", labels[c]);
        }
    }
    assert!(saw_static);
}

#[test]
fn presets_validate() {
    for name in ["small", "medium", "desk", "mini"] {
        ModelConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(ModelConfig::preset("huge").is_err());
}

#[test]
fn trajectory_file_round_trip() {
    let (model, s, stats) = mini();
    let traj = model.rollout_with_truth(&s[0], &s[1], &s[2..4], &stats).unwrap();
    let bytes = traj.to_bytes().unwrap();
    assert_eq!(RolloutTrajectory::from_bytes(&bytes).unwrap(), traj);
    assert!(Model::from_checkpoint(&bytes).is_err());
    assert!(RolloutTrajectory { steps: vec![], diagnostics: vec![] }.to_bytes().is_err());
}
