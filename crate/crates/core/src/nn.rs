//! Layers on top of the autodiff tape: linear maps (with optional VeRA
//! adapter sites), affine layer norm, GELU MLPs, dropout and stochastic depth.

use std::sync::Arc;

use biocast_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Creates named parameters with a seeded generator.
#[derive(Debug)]
pub struct ParamBuilder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        Ok(self.store.insert(name, t, true)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::zeros(shape), true)?)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        Ok(self.store.insert(name, Tensor::full(shape, 1.0), true)?)
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }
}

/// Training flag plus the generator behind dropout and stochastic depth.
#[derive(Debug)]
pub struct ForwardCtx {
    pub training: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { training: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(seed: u64) -> Self {
        Self { training: true, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen()
    }
}

/// Inverted dropout; identity in eval mode or at rate 0.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    if !ctx.training || rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = g.shape(x).to_vec();
    let mask = Tensor::from_fn(&shape, |_| if ctx.uniform() < keep { 1.0 / keep } else { 0.0 });
    let m = g.constant(mask);
    Ok(g.mul(x, m)?)
}

/// Stochastic depth on a residual branch: the whole branch is dropped with
/// probability `rate` (training only) and rescaled otherwise.
pub fn drop_path(g: &mut Graph, branch: Var, rate: f64, ctx: &mut ForwardCtx) -> Result<Option<Var>> {
    if !ctx.training || rate <= 0.0 {
        return Ok(Some(branch));
    }
    if rate >= 1.0 || ctx.uniform() < rate {
        return Ok(None);
    }
    Ok(Some(g.scale(branch, 1.0 / (1.0 - rate))))
}

/// `x + branch`, with the branch subject to stochastic depth.
pub fn residual(g: &mut Graph, x: Var, branch: Var, rate: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    match drop_path(g, branch, rate, ctx)? {
        Some(b) => Ok(g.add(x, b)?),
        None => Ok(x),
    }
}

/// One VeRA adapter site: `((x A) * d) B * b` added to the base output,
/// with `A`, `B` slices of frozen matrices shared by every site.
#[derive(Clone, Debug)]
pub struct VeraSite {
    pub d: ParamId,
    pub b: ParamId,
    pub shared_a: ParamId,
    pub shared_b: ParamId,
    pub rank: usize,
    a_idx: Arc<[u32]>,
    b_idx: Arc<[u32]>,
}

impl VeraSite {
    /// `shared_a` is `(max_in, rank)` and `shared_b` is `(rank, max_out)`.
    pub fn new(
        d: ParamId,
        b: ParamId,
        shared_a: (ParamId, [usize; 2]),
        shared_b: (ParamId, [usize; 2]),
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let rank = shared_a.1[1];
        let a_idx: Vec<u32> = (0..d_in * rank).map(|k| k as u32).collect();
        let max_out = shared_b.1[1];
        let b_idx: Vec<u32> = (0..rank).flat_map(|r| (0..d_out).map(move |c| (r * max_out + c) as u32)).collect();
        Self { d, b, shared_a: shared_a.0, shared_b: shared_b.0, rank, a_idx: a_idx.into(), b_idx: b_idx.into() }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub adapter: Option<VeraSite>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = pb.normal(&format!("{name}.w"), &[d_in, d_out], INIT_STD)?;
        let b = if bias { Some(pb.zeros(&format!("{name}.b"), &[d_out])?) } else { None };
        Ok(Self { name: name.to_string(), w, b, d_in, d_out, adapter: None })
    }

    /// `x: [.., d_in] -> [.., d_out]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let b = g.param(store, b);
            y = g.add_bcast(y, b)?;
        }
        if let Some(site) = &self.adapter {
            let sa = g.param(store, site.shared_a);
            let sb = g.param(store, site.shared_b);
            let a = g.gather(sa, site.a_idx.clone(), &[self.d_in, site.rank])?;
            let bm = g.gather(sb, site.b_idx.clone(), &[site.rank, self.d_out])?;
            let d = g.param(store, site.d);
            let bv = g.param(store, site.b);
            let u = g.matmul(x, a)?;
            let u = g.mul_bcast(u, d)?;
            let v = g.matmul(u, bm)?;
            let v = g.mul_bcast(v, bv)?;
            y = g.add(y, v)?;
        }
        Ok(y)
    }
}

/// Layer norm over the trailing dimension with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self { gamma: pb.ones(&format!("{name}.gamma"), &[dim])?, beta: pb.zeros(&format!("{name}.beta"), &[dim])? })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.mul_bcast(n, gamma)?;
        Ok(g.add_bcast(y, beta)?)
    }
}

/// Two-layer GELU MLP.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub drop: f64,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize, drop: f64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dim, true)?,
            drop,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = dropout(g, h, self.drop, ctx)?;
        let y = self.fc2.forward(g, store, h)?;
        dropout(g, y, self.drop, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_manual_product() {
        let mut pb = ParamBuilder::new(1);
        let lin = Linear::new(&mut pb, "l", 3, 2, true).unwrap();
        pb.store.get_mut(lin.b.unwrap()).value = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let store = pb.into_store();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        let w = store.get(lin.w).value.data();
        for j in 0..2 {
            let want = (0..3).map(|k| [1.0, 2.0, 3.0][k] * w[k * 2 + j]).sum::<f64>() + [0.5, -0.5][j];
            assert!((g.value(y).data()[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn drop_path_full_rate_is_identity_and_eval_ignores_rate() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 2], 1.0));
        let b = g.constant(Tensor::full(&[2, 2], 5.0));
        let mut train = ForwardCtx::train(0);
        let y = residual(&mut g, x, b, 1.0, &mut train).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 4]);
        let mut eval = ForwardCtx::eval();
        let y = residual(&mut g, x, b, 0.9, &mut eval).unwrap();
        assert_eq!(g.value(y).data(), &[6.0; 4]);
    }

    #[test]
    fn layer_norm_default_affine_is_plain_norm() {
        let mut pb = ParamBuilder::new(0);
        let ln = LayerNorm::new(&mut pb, "ln", 4).unwrap();
        let store = pb.into_store();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = ln.forward(&mut g, &store, x).unwrap();
        let m: f64 = g.value(y).data().iter().sum();
        assert!(m.abs() < 1e-12);
    }
}
