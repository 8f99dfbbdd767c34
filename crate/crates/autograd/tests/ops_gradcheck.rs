use std::sync::Arc;

use biocast_autograd::gradcheck::{central_difference, compare};
use biocast_autograd::{Graph, Tensor, Var, GATHER_ZERO};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Contracts the output with fixed random weights so every output element
/// contributes to the checked scalar.
fn check(inputs: Vec<Tensor>, build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &vars);
        g.value(out).shape().to_vec()
    };
    let weights = random(&probe, &mut rng);

    let scalar = |g: &mut Graph, vars: &[Var]| {
        let out = build(g, vars);
        let w = g.constant(weights.clone());
        let p = g.mul(out, w).unwrap();
        g.sum(p)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = scalar(&mut g, &vars);
    let grads = g.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; input.len()]);
        let numeric = central_difference(
            |x| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let t = if j == k { Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap() } else { t.clone() };
                        g.leaf(t, true)
                    })
                    .collect();
                let l = scalar(&mut g, &vars);
                g.value(l).item()
            },
            input.data(),
            1e-6,
        );
        let report = compare(&analytic, &numeric, 1e-7);
        assert!(report.passes(1e-6), "input {k}: {report:?}");
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    check(vec![a.clone(), b.clone()], &|g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(s, v[1]).unwrap();
        let m = g.mul(d, v[1]).unwrap();
        g.scale(m, -0.7)
    });
    check(vec![a.clone()], &|g, v| g.gelu(v[0]));
    check(vec![a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], &|g, v| g.abs(v[0]));
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[4], &mut rng);
    check(vec![a.clone(), b.clone()], &|g, v| g.add_bcast(v[0], v[1]).unwrap());
    check(vec![a, b], &|g, v| g.mul_bcast(v[0], v[1]).unwrap());
}

#[test]
fn matmul_and_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    check(vec![a.clone(), w], &|g, v| g.matmul(v[0], v[1]).unwrap());
    let b = random(&[2, 4, 2], &mut rng);
    check(vec![a.clone(), b], &|g, v| g.bmm(v[0], v[1], false).unwrap());
    let bt = random(&[2, 5, 4], &mut rng);
    check(vec![a, bt], &|g, v| g.bmm(v[0], v[1], true).unwrap());
}

#[test]
fn normalizations() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 5], &mut rng);
    check(vec![a.clone()], &|g, v| g.softmax(v[0]));
    check(vec![a], &|g, v| g.layer_norm(v[0], 1e-5));
}

#[test]
fn softmax_with_masked_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[2, 4], &mut rng);
    let mut mask = Tensor::zeros(&[2, 4]);
    mask.data_mut()[1] = f64::NEG_INFINITY;
    mask.data_mut()[6] = f64::NEG_INFINITY;
    check(vec![a], &move |g, v| {
        let m = g.constant(mask.clone());
        let s = g.add(v[0], m).unwrap();
        g.softmax(s)
    });
}

#[test]
fn fully_masked_row_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[1, 3], f64::NEG_INFINITY), false);
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 1, 4], &mut rng);
    check(vec![a.clone()], &|g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    check(vec![a.clone(), b], &|g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    check(vec![a.clone()], &|g, v| g.reshape(v[0], &[4, 6]).unwrap());
    let idx: Arc<[u32]> = vec![0, 5, 5, GATHER_ZERO, 23, 1].into();
    check(vec![a], &move |g, v| g.gather(v[0], idx.clone(), &[2, 3]).unwrap());
}

#[test]
fn permute_matches_manual_transpose() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let t = g.permute(x, &[1, 0]).unwrap();
    assert_eq!(g.value(t).data(), &[1., 4., 2., 5., 3., 6.]);
    assert_eq!(g.shape(t), &[3, 2]);
}

#[test]
fn repeated_param_use_accumulates() {
    let mut store = biocast_autograd::ParamStore::new();
    let id = store.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap(), true).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param(id).unwrap().data(), &[6.0]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = biocast_autograd::ParamStore::new();
    let id = store.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, id);
    let x = g.leaf(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(), true);
    let p = g.mul(w, x).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert!(grads.param(id).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}
