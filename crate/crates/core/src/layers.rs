//! Building blocks shared by the graph and temporal modules. All feature
//! tensors are `[batch, joints, frames, channels]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, InitRng};
use crate::params::{BufferStore, Grads, ParamId, ParamStore, Values};
use crate::tensor::{gemm, gemm_a_bt, gemm_at_b, Tensor};

/// Shape of a `[B, N, T, C]` feature tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub b: usize,
    pub n: usize,
    pub t: usize,
    pub c: usize,
}

impl Dims {
    pub fn of(x: &Tensor) -> Result<Dims> {
        match *x.shape() {
            [b, n, t, c] => Ok(Dims { b, n, t, c }),
            _ => Err(Error::dim("feature tensor", x.shape(), &[0, 0, 0, 0])),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.b, self.n, self.t, self.c]
    }

    pub fn rows(&self) -> usize {
        self.b * self.n * self.t
    }

    pub fn with_c(self, c: usize) -> Dims {
        Dims { c, ..self }
    }

    pub fn with_t(self, t: usize) -> Dims {
        Dims { t, ..self }
    }
}

pub fn out_frames(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Per-position affine map over the trailing channel axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.insert(format!("{name}.weight"), fan_in_uniform(rng, &[c_in, c_out], c_in));
        let b = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Linear { w, b, c_in, c_out }
    }

    pub fn forward(&self, v: Values, x: &Tensor) -> Result<Tensor> {
        if x.last_dim() != self.c_in {
            return Err(Error::dim("linear", x.shape(), v.get(self.w).shape()));
        }
        let rows = x.len() / self.c_in;
        let mut out = match self.b {
            Some(b) => {
                let bias = v.get(b).data();
                let mut o = Vec::with_capacity(rows * self.c_out);
                for _ in 0..rows {
                    o.extend_from_slice(bias);
                }
                o
            }
            None => vec![0.0; rows * self.c_out],
        };
        gemm(x.data(), v.get(self.w).data(), &mut out, rows, self.c_in, self.c_out);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.c_out;
        Tensor::new(shape, out)
    }

    /// Accumulates weight/bias gradients; returns `dx` when `need_dx`.
    pub fn backward(
        &self,
        v: Values,
        g: &mut Grads,
        x: &Tensor,
        dy: &Tensor,
        need_dx: bool,
    ) -> Option<Tensor> {
        let rows = x.len() / self.c_in;
        gemm_at_b(x.data(), dy.data(), g.get_mut(self.w), rows, self.c_in, self.c_out);
        if let Some(b) = self.b {
            let gb = g.get_mut(b);
            for row in dy.data().chunks_exact(self.c_out) {
                for (acc, d) in gb.iter_mut().zip(row) {
                    *acc += d;
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; rows * self.c_in];
            gemm_a_bt(dy.data(), v.get(self.w).data(), &mut dx, rows, self.c_out, self.c_in);
            Tensor::new(x.shape().to_vec(), dx).expect("same shape as input")
        })
    }

    pub fn num_params(&self) -> usize {
        self.c_in * self.c_out + if self.b.is_some() { self.c_out } else { 0 }
    }

    pub fn flops(&self, rows: usize) -> u64 {
        (rows * self.c_in * self.c_out) as u64
    }
}

/// Per-channel standardization over every non-channel position, with
/// running estimates for inference.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
    prefix: String,
}

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var_unbiased: Vec<f64>,
}

impl Norm {
    pub fn register(store: &mut ParamStore, buffers: &mut BufferStore, name: &str, c: usize) -> Self {
        let gamma = store.insert(format!("{name}.weight"), Tensor::full(&[c], 1.0));
        let beta = store.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
        buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        buffers.insert(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
        Norm {
            gamma,
            beta,
            c,
            prefix: String::from(name),
        }
    }

    fn affine(&self, v: Values, xhat: &mut [f64]) {
        let gamma = v.get(self.gamma).data();
        let beta = v.get(self.beta).data();
        for row in xhat.chunks_exact_mut(self.c) {
            for ((x, g), b) in row.iter_mut().zip(gamma).zip(beta) {
                *x = *x * g + b;
            }
        }
    }

    pub fn forward_train(&self, v: Values, x: &Tensor) -> Result<(Tensor, NormCache)> {
        if x.last_dim() != self.c {
            return Err(Error::dim("norm", x.shape(), &[self.c]));
        }
        let rows = x.len() / self.c;
        let mut mean = vec![0.0; self.c];
        for row in x.data().chunks_exact(self.c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; self.c];
        for row in x.data().chunks_exact(self.c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let var_unbiased = var
            .iter()
            .map(|s| if rows > 1 { s / (rows - 1) as f64 } else { 0.0 })
            .collect();
        let inv_std: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / libm::sqrt(s / rows as f64 + NORM_EPS))
            .collect();
        let mut xhat = x.clone();
        for row in xhat.data_mut().chunks_exact_mut(self.c) {
            for ((v, m), is) in row.iter_mut().zip(&mean).zip(&inv_std) {
                *v = (*v - m) * is;
            }
        }
        let mut y = xhat.clone();
        self.affine(v, y.data_mut());
        Ok((
            y,
            NormCache {
                xhat,
                inv_std,
                mean,
                var_unbiased,
            },
        ))
    }

    pub fn forward_eval(&self, v: Values, buffers: &BufferStore, x: &Tensor) -> Result<Tensor> {
        if x.last_dim() != self.c {
            return Err(Error::dim("norm", x.shape(), &[self.c]));
        }
        let mean = buffers.get(&format!("{}.running_mean", self.prefix))?.data();
        let var = buffers.get(&format!("{}.running_var", self.prefix))?.data();
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / libm::sqrt(s + NORM_EPS)).collect();
        let mut y = x.clone();
        for row in y.data_mut().chunks_exact_mut(self.c) {
            for ((v, m), is) in row.iter_mut().zip(mean).zip(&inv_std) {
                *v = (*v - m) * is;
            }
        }
        self.affine(v, y.data_mut());
        Ok(y)
    }

    pub fn backward(&self, v: Values, g: &mut Grads, cache: &NormCache, dy: &Tensor) -> Tensor {
        let c = self.c;
        let rows = (dy.len() / c) as f64;
        let gamma = v.get(self.gamma).data();
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (drow, xrow) in dy.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
            for k in 0..c {
                sum_dy[k] += drow[k];
                sum_dy_xhat[k] += drow[k] * xrow[k];
            }
        }
        for (acc, s) in g.get_mut(self.gamma).iter_mut().zip(&sum_dy_xhat) {
            *acc += s;
        }
        for (acc, s) in g.get_mut(self.beta).iter_mut().zip(&sum_dy) {
            *acc += s;
        }
        let mut dx = dy.clone();
        for (drow, xrow) in dx.data_mut().chunks_exact_mut(c).zip(cache.xhat.data().chunks_exact(c)) {
            for k in 0..c {
                let scale = gamma[k] * cache.inv_std[k];
                drow[k] = scale * (drow[k] - sum_dy[k] / rows - xrow[k] * sum_dy_xhat[k] / rows);
            }
        }
        dx
    }

    pub fn update_running(&self, buffers: &mut BufferStore, cache: &NormCache) -> Result<()> {
        let rm = buffers.get_mut(&format!("{}.running_mean", self.prefix))?;
        for (r, m) in rm.data_mut().iter_mut().zip(&cache.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * m;
        }
        let rv = buffers.get_mut(&format!("{}.running_var", self.prefix))?;
        for (r, v) in rv.data_mut().iter_mut().zip(&cache.var_unbiased) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 * self.c
    }
}

/// Keeps frames `0, s, 2s, ...`.
pub fn subsample_frames(x: &Tensor, stride: usize) -> Result<Tensor> {
    let d = Dims::of(x)?;
    if stride == 1 {
        return Ok(x.clone());
    }
    let to = out_frames(d.t, stride);
    let mut out = Vec::with_capacity(d.b * d.n * to * d.c);
    for bn in 0..d.b * d.n {
        for t in 0..to {
            let src = (bn * d.t + t * stride) * d.c;
            out.extend_from_slice(&x.data()[src..src + d.c]);
        }
    }
    Tensor::new(d.with_t(to).shape().to_vec(), out)
}

pub fn subsample_frames_backward(dy: &Tensor, t_in: usize, stride: usize) -> Result<Tensor> {
    let d = Dims::of(dy)?;
    if stride == 1 {
        return Ok(dy.clone());
    }
    let mut dx = Tensor::zeros(&d.with_t(t_in).shape());
    for bn in 0..d.b * d.n {
        for t in 0..d.t {
            let dst = (bn * t_in + t * stride) * d.c;
            let src = (bn * d.t + t) * d.c;
            dx.data_mut()[dst..dst + d.c].copy_from_slice(&dy.data()[src..src + d.c]);
        }
    }
    Ok(dx)
}

/// Temporal max-pool, kernel 3, padding 1 (padded frames never win).
/// Returns the pooled tensor and the source frame of every output element.
pub fn max_pool_frames(x: &Tensor, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let d = Dims::of(x)?;
    let to = out_frames(d.t, stride);
    let mut out = vec![0.0; d.b * d.n * to * d.c];
    let mut arg = vec![0u32; out.len()];
    for bn in 0..d.b * d.n {
        for t in 0..to {
            let center = t * stride;
            let lo = center.saturating_sub(1);
            let hi = (center + 1).min(d.t - 1);
            for c in 0..d.c {
                let mut best = f64::NEG_INFINITY;
                let mut best_t = lo;
                for s in lo..=hi {
                    let val = x.data()[(bn * d.t + s) * d.c + c];
                    if val > best {
                        best = val;
                        best_t = s;
                    }
                }
                let o = (bn * to + t) * d.c + c;
                out[o] = best;
                arg[o] = best_t as u32;
            }
        }
    }
    Ok((Tensor::new(d.with_t(to).shape().to_vec(), out)?, arg))
}

pub fn max_pool_frames_backward(dy: &Tensor, arg: &[u32], t_in: usize) -> Result<Tensor> {
    let d = Dims::of(dy)?;
    let mut dx = Tensor::zeros(&d.with_t(t_in).shape());
    for bn in 0..d.b * d.n {
        for t in 0..d.t {
            for c in 0..d.c {
                let o = (bn * d.t + t) * d.c + c;
                let src = (bn * t_in + arg[o] as usize) * d.c + c;
                dx.data_mut()[src] += dy.data()[o];
            }
        }
    }
    Ok(dx)
}
