//! Index arithmetic for 3D windows: partition/reverse, cyclic shifts, the
//! shifted-window region mask and relative-position lookups.
//!
//! Latent tensors are `(D, H, W, C)` stored row-major, i.e. token `(d, h, w)`
//! is row `(d * H + h) * W + w` of an `(N, C)` matrix.

use std::sync::Arc;

use biocast_autograd::{Tensor, GATHER_ZERO};

use crate::error::{CoreError, Result};

fn flat3(c: [usize; 3], dims: [usize; 3]) -> usize {
    (c[0] * dims[1] + c[1]) * dims[2] + c[2]
}

fn unflat3(k: usize, dims: [usize; 3]) -> [usize; 3] {
    [k / (dims[1] * dims[2]), (k / dims[2]) % dims[1], k % dims[2]]
}

/// Window geometry of one stage, after clipping the window to the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub grid: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
    /// Source token for each `(window, position)` slot; `None` for padding.
    pub partition: Vec<Option<usize>>,
    /// Slot holding each grid token.
    pub reverse: Vec<usize>,
}

impl WindowPlan {
    /// Windows larger than the grid are clipped; shifting is dropped along
    /// any axis a single window already spans.
    pub fn new(grid: [usize; 3], window: [usize; 3], shifted: bool) -> Result<Self> {
        if grid.contains(&0) || window.contains(&0) {
            return Err(CoreError::Config(format!("grid {grid:?} / window {window:?} must be positive")));
        }
        let mut w = [0; 3];
        let mut shift = [0; 3];
        let mut padded = [0; 3];
        for d in 0..3 {
            w[d] = window[d].min(grid[d]);
            shift[d] = if shifted && w[d] < grid[d] { w[d] / 2 } else { 0 };
            padded[d] = grid[d].div_ceil(w[d]) * w[d];
        }
        let nwin = [padded[0] / w[0], padded[1] / w[1], padded[2] / w[2]];
        let n_windows = nwin.iter().product::<usize>();
        let win_len = w.iter().product::<usize>();
        let mut partition = Vec::with_capacity(n_windows * win_len);
        let mut reverse = vec![0; grid.iter().product()];
        for wi in 0..n_windows {
            let wc = unflat3(wi, nwin);
            for pi in 0..win_len {
                let pc = unflat3(pi, w);
                let mut src = [0; 3];
                let mut real = true;
                for d in 0..3 {
                    let p = wc[d] * w[d] + pc[d];
                    src[d] = (p + shift[d]) % padded[d];
                    real &= src[d] < grid[d];
                }
                if real {
                    let s = flat3(src, grid);
                    reverse[s] = partition.len();
                    partition.push(Some(s));
                } else {
                    partition.push(None);
                }
            }
        }
        Ok(Self { grid, window: w, shift, padded, partition, reverse })
    }

    pub fn n_windows(&self) -> usize {
        self.partition.len() / self.win_len()
    }

    pub fn win_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn has_padding(&self) -> bool {
        self.padded != self.grid
    }

    /// Element gather `(N, C) -> (nW, win_len, C)`.
    pub fn partition_index(&self, c: usize) -> Arc<[u32]> {
        let mut idx = Vec::with_capacity(self.partition.len() * c);
        for slot in &self.partition {
            match slot {
                Some(s) => idx.extend((0..c).map(|k| (s * c + k) as u32)),
                None => idx.extend(std::iter::repeat(GATHER_ZERO).take(c)),
            }
        }
        idx.into()
    }

    /// Element gather `(nW, win_len, C) -> (N, C)`.
    pub fn reverse_index(&self, c: usize) -> Arc<[u32]> {
        self.reverse.iter().flat_map(|&slot| (0..c).map(move |k| (slot * c + k) as u32)).collect::<Vec<_>>().into()
    }

    /// Additive attention mask `(nW, win_len, win_len)`: `-inf` between
    /// tokens of different shifted regions and towards padded keys, else 0.
    /// `None` when nothing needs masking.
    pub fn attention_mask(&self) -> Option<Vec<f64>> {
        if !self.is_shifted() && !self.has_padding() {
            return None;
        }
        let n = self.win_len();
        let nwin = [self.padded[0] / self.window[0], self.padded[1] / self.window[1], self.padded[2] / self.window[2]];
        let region = |wi: usize, pi: usize| -> usize {
            let wc = unflat3(wi, nwin);
            let pc = unflat3(pi, self.window);
            let mut label = 0;
            for d in 0..3 {
                let p = wc[d] * self.window[d] + pc[d];
                let l = if self.shift[d] == 0 || p < self.padded[d] - self.window[d] {
                    0
                } else if p < self.padded[d] - self.shift[d] {
                    1
                } else {
                    2
                };
                label = label * 3 + l;
            }
            label
        };
        let mut mask = vec![0.0; self.n_windows() * n * n];
        for wi in 0..self.n_windows() {
            let labels: Vec<usize> = (0..n).map(|pi| region(wi, pi)).collect();
            for i in 0..n {
                for j in 0..n {
                    let pad_key = self.partition[wi * n + j].is_none();
                    if pad_key || labels[i] != labels[j] {
                        mask[(wi * n + i) * n + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        Some(mask)
    }
}

/// Size of the relative-position bias table for a window.
pub fn bias_table_len(window: [usize; 3]) -> usize {
    window.iter().map(|w| 2 * w - 1).product()
}

/// Table row for every `(i, j)` pair of window positions, `win_len^2` entries.
pub fn relative_position_index(window: [usize; 3]) -> Vec<usize> {
    let n: usize = window.iter().product();
    let span = [2 * window[0] - 1, 2 * window[1] - 1, 2 * window[2] - 1];
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let a = unflat3(i, window);
        for j in 0..n {
            let b = unflat3(j, window);
            let rel = [0, 1, 2].map(|d| a[d] + window[d] - 1 - b[d]);
            out.push(flat3(rel, span));
        }
    }
    out
}

fn check_grid(x: &Tensor) -> Result<[usize; 4]> {
    match x.shape() {
        [d, h, w, c] => Ok([*d, *h, *w, *c]),
        s => Err(CoreError::ShapeMismatch(format!("expected (D, H, W, C), got {s:?}"))),
    }
}

fn gather_tensor(x: &Tensor, idx: &[u32], shape: Vec<usize>) -> Tensor {
    let src = x.data();
    let data = idx.iter().map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] }).collect();
    Tensor::new(shape, data).expect("index length matches shape")
}

/// `(D, H, W, C) -> (nW, Wd*Wh*Ww, C)` without shifting; remainders are
/// zero-padded.
pub fn window_partition(x: &Tensor, window: [usize; 3]) -> Result<Tensor> {
    let [d, h, w, c] = check_grid(x)?;
    let plan = WindowPlan::new([d, h, w], window, false)?;
    let idx = plan.partition_index(c);
    Ok(gather_tensor(x, &idx, vec![plan.n_windows(), plan.win_len(), c]))
}

/// Inverse of [`window_partition`] for a grid of `grid` tokens.
pub fn window_reverse(windows: &Tensor, window: [usize; 3], grid: [usize; 3]) -> Result<Tensor> {
    let plan = WindowPlan::new(grid, window, false)?;
    let c = *windows.shape().last().unwrap_or(&0);
    if windows.shape() != [plan.n_windows(), plan.win_len(), c] {
        return Err(CoreError::ShapeMismatch(format!("windows {:?} do not fit grid {grid:?}", windows.shape())));
    }
    let idx = plan.reverse_index(c);
    Ok(gather_tensor(windows, &idx, vec![grid[0], grid[1], grid[2], c]))
}

/// Circular roll: the token at `p` moves to `(p + offsets) mod dims`.
pub fn cyclic_shift(x: &Tensor, offsets: [isize; 3]) -> Result<Tensor> {
    let [d, h, w, c] = check_grid(x)?;
    let dims = [d, h, w];
    let mut out = vec![0.0; x.len()];
    for k in 0..d * h * w {
        let p = unflat3(k, dims);
        let q = [0, 1, 2].map(|a| (p[a] as isize + offsets[a]).rem_euclid(dims[a] as isize) as usize);
        let dst = flat3(q, dims);
        out[dst * c..(dst + 1) * c].copy_from_slice(&x.data()[k * c..(k + 1) * c]);
    }
    Ok(Tensor::new(x.shape().to_vec(), out)?)
}
