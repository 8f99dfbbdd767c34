use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::{AutogradError, Result, Tensor};

/// Sentinel gather index producing a zero element.
pub const GATHER_ZERO: u32 = u32::MAX;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    Gather { x: Var, idx: Arc<[u32]> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations supporting one reverse sweep per call to
/// [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf for a stored parameter; repeated calls return the same node so that
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn bcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let lb = self.value(b).len();
        if lb == 0 || sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast_check("add_bcast", a, b)?;
        let tb = self.value(b).data();
        let lb = tb.len();
        let ta = self.value(a);
        let data = ta.data().iter().enumerate().map(|(i, &x)| x + tb[i % lb]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::AddBcast(a, b), rg))
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast_check("mul_bcast", a, b)?;
        let tb = self.value(b).data();
        let lb = tb.len();
        let ta = self.value(a);
        let data = ta.data().iter().enumerate().map(|(i, &x)| x * tb[i % lb]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MulBcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// `a @ b` with `a: [.., K]` (leading dims flattened) and `b: [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Batched product: `a: [B, M, K]` with `b: [B, K, N]`, or `b: [B, N, K]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", &sa, &sb));
        }
        let mut out = vec![0.0; bsz * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..bsz {
            let ab = &da[bi * m * k..(bi + 1) * m * k];
            let bb = &db[bi * k * n..(bi + 1) * k * n];
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, ob, m, k, n);
            } else {
                gemm_nn(ab, bb, ob, m, k, n);
            }
        }
        let t = Tensor::new(vec![bsz, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Softmax over the trailing dimension. Rows that are entirely `-inf`
    /// produce zeros.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let l = tx.last_dim();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(l.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// Layer normalization over the trailing dimension, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let l = tx.last_dim().max(1);
        let mut out = tx.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / l);
        for row in out.chunks_mut(l) {
            let mean = row.iter().sum::<f64>() / l as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::LayerNorm { x, rstd }, rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)));
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(t, Op::Abs(x), rg)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `out[i] = x[idx[i]]`, or zero where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, idx: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(AutogradError::InvalidShape {
                op: "gather",
                detail: format!("{} indices for output shape {shape:?}", idx.len()),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for &i in idx.iter() {
            if i == GATHER_ZERO {
                out.push(0.0);
            } else {
                let v = *src.get(i as usize).ok_or(AutogradError::IndexOutOfRange {
                    index: i as usize,
                    len: src.len(),
                })?;
                out.push(v);
            }
        }
        let t = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Gather { x, idx }, rg))
    }

    /// Row gather from a 2-D table: `out[i, :] = table[rows[i], :]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(AutogradError::InvalidShape { op: "gather_rows", detail: format!("table shape {s:?}") });
        }
        let d = s[1];
        let mut idx = Vec::with_capacity(rows.len() * d);
        for r in rows {
            match r {
                Some(r) => {
                    if *r >= s[0] {
                        return Err(AutogradError::IndexOutOfRange { index: *r, len: s[0] });
                    }
                    idx.extend((0..d).map(|j| (r * d + j) as u32));
                }
                None => idx.extend(std::iter::repeat(GATHER_ZERO).take(d)),
            }
        }
        self.gather(table, idx.into(), &[rows.len(), d])
    }

    /// Axis permutation, implemented as a gather.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if perm.len() != shape.len() {
            return Err(AutogradError::InvalidShape { op: "permute", detail: format!("{perm:?} for {shape:?}") });
        }
        let idx = permute_indices(&shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(x, idx.into(), &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(AutogradError::InvalidShape { op: "concat", detail: format!("axis {axis} for {first:?}") });
        }
        let outer: usize = first[..axis].iter().product();
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(mismatch("concat", &first, s));
            }
            total_axis += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let t = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(AutogradError::InvalidShape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let seed = Tensor::from_fn(self.shape(loss), |_| 1.0);
        self.backward_with(loss, seed)
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(mismatch("backward", seed.shape(), self.shape(out)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.into_data());
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.acc(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.acc(grads, *b, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddBcast(a, b) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
                self.acc(grads, *b, |s| {
                    let lb = s.len();
                    for (i, gv) in g.iter().enumerate() {
                        s[i % lb] += gv;
                    }
                });
            }
            Op::MulBcast(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let lb = vb.len();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i % lb];
                    }
                });
                self.acc(grads, *b, |s| {
                    for (i, gv) in g.iter().enumerate() {
                        s[i % lb] += gv * va[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k));
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = self.value(*a).len() / k.max(1);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |s| gemm_nt(g, vb, s, m, n, k));
                self.acc(grads, *b, |s| gemm_tn(va, g, s, k, m, n));
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |s| {
                    for bi in 0..bsz {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &vb[bi * k * n..(bi + 1) * k * n];
                        let sb = &mut s[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gb, bb, sb, m, n, k);
                        } else {
                            gemm_nt(gb, bb, sb, m, n, k);
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for bi in 0..bsz {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &va[bi * m * k..(bi + 1) * m * k];
                        let sb = &mut s[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gb, ab, sb, n, m, k);
                        } else {
                            gemm_tn(ab, gb, sb, k, m, n);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let l = node.value.last_dim().max(1);
                self.acc(grads, *x, |s| {
                    for r in 0..y.len() / l {
                        let (yr, gr) = (&y[r * l..(r + 1) * l], &g[r * l..(r + 1) * l]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..l {
                            s[r * l + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, rstd } => {
                let y = node.value.data();
                let l = node.value.last_dim().max(1);
                self.acc(grads, *x, |s| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let (yr, gr) = (&y[r * l..(r + 1) * l], &g[r * l..(r + 1) * l]);
                        let gm = gr.iter().sum::<f64>() / l as f64;
                        let gy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / l as f64;
                        for j in 0..l {
                            s[r * l + j] += rs * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |s| {
                    let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                    for i in 0..s.len() {
                        let v = vx[i];
                        let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
                        s[i] += g[i] * (cdf + v * pdf);
                    }
                });
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        let sign = if vx[i] > 0.0 {
                            1.0
                        } else if vx[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[i] * sign;
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.acc(grads, *x, |s| s.iter_mut().for_each(|s| *s += gv));
            }
            Op::Gather { x, idx } => {
                self.acc(grads, *x, |s| {
                    for (o, &i) in idx.iter().enumerate() {
                        if i != GATHER_ZERO {
                            s[i as usize] += g[o];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.acc(grads, p, |s| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            s[o * chunk..(o + 1) * chunk].iter_mut().zip(src).for_each(|(s, g)| *s += g);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |s| s.iter_mut().zip(g).for_each(|(s, g)| *s += g));
            }
        }
    }
}

/// Row-major source indices realizing an axis permutation.
pub fn permute_indices(shape: &[usize], perm: &[usize]) -> Vec<u32> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = (0..rank).map(|d| coord[d] * strides[perm[d]]).sum();
        idx.push(src as u32);
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    idx
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter that was loaded into the graph, if it
    /// received one.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// All parameter gradients, sorted by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self.params.iter().filter_map(|(&id, &v)| self.get(v).map(|g| (id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
