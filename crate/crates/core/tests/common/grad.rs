use biocast_autograd::gradcheck::{central_difference, compare, GradCheckReport};
use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Analytic vs central-difference gradients of a scalar loss with respect to
/// the given parameter coordinates and every coordinate of `leaves`.
pub fn check<F>(store: &ParamStore, coords: &[(ParamId, usize)], leaves: &[Tensor], eps: f64, floor: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, store, &vars);
    let grads = g.backward(loss).unwrap();
    let mut analytic: Vec<f64> = coords.iter().map(|&(id, i)| grads.param(id).map_or(0.0, |t| t.data()[i])).collect();
    for (v, t) in vars.iter().zip(leaves) {
        match grads.get(*v) {
            Some(gr) => analytic.extend_from_slice(gr.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(t.len())),
        }
    }

    let mut x: Vec<f64> = coords.iter().map(|&(id, i)| store.get(id).value.data()[i]).collect();
    for t in leaves {
        x.extend_from_slice(t.data());
    }
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
                    let data = x[off..off + t.len()].to_vec();
                    off += t.len();
                    g.constant(Tensor::new(t.shape().to_vec(), data).unwrap())
                })
                .collect();
            let loss = f(&mut g, &work, &vars);
            g.value(loss).item()
        },
        &x,
        eps,
    );
    compare(&analytic, &numeric, floor)
}

/// Every coordinate of every trainable parameter.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store.iter().filter(|(_, p)| p.trainable).flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i))).collect()
}

/// One random coordinate of every trainable parameter.
pub fn one_per_param(store: &ParamStore, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, rng.gen_range(0..p.value.len()))).collect()
}

/// Replaces every parameter with uniform noise in `[-amp, amp]`, so that
/// zero-initialized biases and tables take part in the check.
pub fn randomize(store: &mut ParamStore, amp: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-amp..amp));
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `sum(x * r)` for a fixed random `r`, a loss whose gradient is dense.
pub fn probe_loss(g: &mut Graph, x: Var, seed: u64) -> Var {
    let r = random_tensor(g.shape(x), seed);
    let r = g.constant(r);
    let y = g.mul(x, r).unwrap();
    g.sum(y)
}
