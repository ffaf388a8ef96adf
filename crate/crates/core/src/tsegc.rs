//! Symmetry-aware graph convolution.
//!
//! The layer learns one topology per sample from the temporal mean of its
//! input:
//!
//! 1. joints are embedded (`theta`) and compared by negative squared
//!    Euclidean distance `D`;
//! 2. `tanh(D)` gives the calibration matrix `B`;
//! 3. for every joint the `K` nearest joints in embedding space (itself
//!    first) pick `K` hop distances, and each scale mask row activates the
//!    whole hop-equivalence class at that distance, so mirrored joints are
//!    switched on together;
//! 4. the shared topology `M` is reactivated through the masks and combined
//!    as `Z_k = alpha * (H_k . M) + beta * B + C_k`;
//! 5. features are embedded (`psi`), split into `K` channel partitions, each
//!    partition aggregated with its own `Z_k`, concatenated, projected to
//!    `C_out` and passed through GeLU.
//!
//! Mask membership is piecewise constant in the embeddings and is not
//! differentiated; gradients reach `theta` through `B` only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::activation::{gelu, gelu_grad};
use crate::error::{Error, Result};
use crate::graph::HopTable;
use crate::init::{uniform, InitRng};
use crate::layers::{Dims, Linear};
use crate::params::{Grads, ParamId, ParamStore, Values};
use crate::tensor::Tensor;

/// Static sizes of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TsegcShape {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// Number of partitions / scales.
    pub k: usize,
    /// Embedding reduction ratio for `theta`.
    pub r_red: usize,
    /// Number of independent `(psi, W)` pathways summed before the activation.
    pub subsets: usize,
}

impl TsegcShape {
    /// Channels per partition, `floor(C_out / K)`.
    pub fn c_prime(&self) -> usize {
        self.c_out / self.k
    }

    /// Width of the `theta` embedding, `max(1, floor(C_in / R))`.
    pub fn c_embed(&self) -> usize {
        (self.c_in / self.r_red).max(1)
    }

    pub fn partition_width(&self) -> usize {
        self.c_prime() * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::config("n_joints", "must be positive"));
        }
        if self.k == 0 {
            return Err(Error::config("k_partitions", "must be positive"));
        }
        if self.k > self.n {
            return Err(Error::config(
                "k_partitions",
                format!("K = {} exceeds the joint count {}", self.k, self.n),
            ));
        }
        if self.c_prime() == 0 {
            return Err(Error::config(
                "k_partitions",
                format!("C_out = {} leaves no channels for K = {} partitions", self.c_out, self.k),
            ));
        }
        if self.r_red == 0 {
            return Err(Error::config("r_red", "must be positive"));
        }
        if self.c_in == 0 || self.subsets == 0 {
            return Err(Error::config("c_in", "channel and subset counts must be positive"));
        }
        Ok(())
    }
}

/// Binary `[K, N, N]` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleMask {
    pub h: Tensor,
}

/// Topology of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyBundle {
    /// `[N, N]` calibration matrix.
    pub b_cal: Tensor,
    /// `[K, N, N]` reactivated shared topology.
    pub a_react: Tensor,
    /// `[K, N, N]` assembled topology.
    pub z: Tensor,
}

/// Learnable topology terms of one layer.
#[derive(Debug, Clone, Copy)]
pub struct TopologyParams<'a> {
    pub m_shared: &'a Tensor,
    pub c_learn: &'a Tensor,
    pub alpha: f64,
    pub beta: f64,
}

/// `[B, N, C_in] -> [B, N, K, C']`: embeds with `psi` and views the channel
/// axis as `K` contiguous partitions.
pub fn partition_features(x: &Tensor, psi: &Linear, v: Values, k: usize) -> Result<Tensor> {
    let [b, n, _] = match *x.shape() {
        [b, n, c] => [b, n, c],
        _ => return Err(Error::dim("partition_features", x.shape(), &[0, 0, psi.c_in])),
    };
    if !psi.c_out.is_multiple_of(k) {
        return Err(Error::config("k_partitions", "psi width must be a multiple of K"));
    }
    psi.forward(v, x)?.reshape(&[b, n, k, psi.c_out / k])
}

/// `D[b][i][j] = -|e_i - e_j|^2` for `e: [B, N, C_e]`.
pub fn pairwise_distance(e: &Tensor) -> Result<Tensor> {
    let [b, n, c] = match *e.shape() {
        [b, n, c] => [b, n, c],
        _ => return Err(Error::dim("pairwise_distance", e.shape(), &[0, 0, 0])),
    };
    let mut d = Tensor::zeros(&[b, n, n]);
    for bb in 0..b {
        let eb = &e.data()[bb * n * c..(bb + 1) * n * c];
        let db = &mut d.data_mut()[bb * n * n..(bb + 1) * n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let dist: f64 = eb[i * c..(i + 1) * c]
                    .iter()
                    .zip(&eb[j * c..(j + 1) * c])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                db[i * n + j] = -dist;
                db[j * n + i] = -dist;
            }
        }
    }
    Ok(d)
}

/// `B = tanh(D)`.
pub fn calibration(d: &Tensor) -> Tensor {
    d.map(libm::tanh)
}

/// Joint order for row `i` of `d` (`[N, N]` slice): itself first, then by
/// decreasing `d[i][j]`, ties by ascending index.
fn neighbour_order(d_row: &[f64], i: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d_row.len()).filter(|&j| j != i).collect();
    order.sort_by(|&a, &b| d_row[b].total_cmp(&d_row[a]).then(a.cmp(&b)));
    order.insert(0, i);
    order
}

/// Scale masks for every batch element of `d: [B, N, N]`.
pub fn scale_mask(d: &Tensor, hop: &HopTable, k: usize) -> Result<Vec<ScaleMask>> {
    let [b, n, _] = match *d.shape() {
        [b, n, m] if n == m => [b, n, m],
        _ => return Err(Error::dim("scale_mask", d.shape(), &[0, hop.n(), hop.n()])),
    };
    if hop.n() != n {
        return Err(Error::dim("scale_mask", d.shape(), &[hop.n(), hop.n()]));
    }
    if k == 0 || k > n {
        return Err(Error::config("k_partitions", format!("K = {k} must lie in 1..={n}")));
    }
    let mut out = Vec::with_capacity(b);
    for bb in 0..b {
        let db = &d.data()[bb * n * n..(bb + 1) * n * n];
        let mut h = Tensor::zeros(&[k, n, n]);
        for i in 0..n {
            let order = neighbour_order(&db[i * n..(i + 1) * n], i);
            for (s, &nb) in order.iter().take(k).enumerate() {
                let scale = hop.get(i, nb);
                for j in 0..n {
                    if hop.get(i, j) == scale {
                        h.data_mut()[(s * n + i) * n + j] = 1.0;
                    }
                }
            }
        }
        out.push(ScaleMask { h });
    }
    Ok(out)
}

/// `A_s = H_s . M`, `Z_s = alpha A_s + beta B + C_s`.
pub fn assemble_topology(mask: &ScaleMask, b_cal: &Tensor, p: TopologyParams) -> Result<TopologyBundle> {
    let [k, n, _] = match *mask.h.shape() {
        [k, n, m] if n == m => [k, n, m],
        _ => return Err(Error::dim("assemble_topology", mask.h.shape(), b_cal.shape())),
    };
    if b_cal.shape() != [n, n] || p.m_shared.shape() != [n, n] || p.c_learn.shape() != [k, n, n] {
        return Err(Error::dim("assemble_topology", mask.h.shape(), p.c_learn.shape()));
    }
    let mut a_react = Tensor::zeros(&[k, n, n]);
    let mut z = Tensor::zeros(&[k, n, n]);
    let nn = n * n;
    for s in 0..k {
        for idx in 0..nn {
            let a = mask.h.data()[s * nn + idx] * p.m_shared.data()[idx];
            a_react.data_mut()[s * nn + idx] = a;
            z.data_mut()[s * nn + idx] =
                p.alpha * a + p.beta * b_cal.data()[idx] + p.c_learn.data()[s * nn + idx];
        }
    }
    Ok(TopologyBundle {
        b_cal: b_cal.clone(),
        a_react,
        z,
    })
}

/// One graph-convolution layer and its parameter handles.
#[derive(Debug, Clone)]
pub struct TsegcLayer {
    pub shape: TsegcShape,
    pub psi: Vec<Linear>,
    pub out: Vec<Linear>,
    pub theta: Linear,
    pub m_shared: ParamId,
    pub c_learn: ParamId,
    pub alpha: ParamId,
    pub beta: ParamId,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TsegcCache {
    dims: Dims,
    x: Tensor,
    xbar: Tensor,
    e: Tensor,
    b_cal: Tensor,
    h: Tensor,
    z: Tensor,
    xt: Vec<Tensor>,
    agg: Vec<Tensor>,
    pre: Tensor,
}

impl TsegcCache {
    /// `[B, K, N, N]` assembled topologies.
    pub fn z(&self) -> &Tensor {
        &self.z
    }

    /// `[B, K, N, N]` scale masks.
    pub fn masks(&self) -> &Tensor {
        &self.h
    }
}

impl TsegcLayer {
    /// Registers parameters under `name`. `m_shared` starts at `a_hat`.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        shape: TsegcShape,
        a_hat: &Tensor,
    ) -> Result<Self> {
        shape.validate()?;
        if a_hat.shape() != [shape.n, shape.n] {
            return Err(Error::dim("tsegc init", a_hat.shape(), &[shape.n, shape.n]));
        }
        let width = shape.partition_width();
        let psi = (0..shape.subsets)
            .map(|s| Linear::register(store, rng, &format!("{name}.psi.{s}"), shape.c_in, width, true))
            .collect();
        let theta = Linear::register(store, rng, &format!("{name}.theta"), shape.c_in, shape.c_embed(), false);
        let out = (0..shape.subsets)
            .map(|s| Linear::register(store, rng, &format!("{name}.out.{s}"), width, shape.c_out, true))
            .collect();
        let m_shared = store.insert(format!("{name}.m_shared"), a_hat.clone());
        let c_learn = store.insert(
            format!("{name}.c_learn"),
            uniform(rng, &[shape.k, shape.n, shape.n], 1e-4),
        );
        let alpha = store.insert(format!("{name}.alpha"), Tensor::scalar(1.0));
        let beta = store.insert(format!("{name}.beta"), Tensor::scalar(0.0));
        Ok(TsegcLayer {
            shape,
            psi,
            out,
            theta,
            m_shared,
            c_learn,
            alpha,
            beta,
        })
    }

    fn check_input(&self, x: &Tensor, hop: &HopTable) -> Result<Dims> {
        let d = Dims::of(x)?;
        if d.n != self.shape.n || d.c != self.shape.c_in || hop.n() != d.n {
            return Err(Error::dim(
                "tsegc",
                x.shape(),
                &[d.b, self.shape.n, d.t, self.shape.c_in],
            ));
        }
        Ok(d)
    }

    fn topology_params<'a>(&self, v: Values<'a>) -> TopologyParams<'a> {
        TopologyParams {
            m_shared: v.get(self.m_shared),
            c_learn: v.get(self.c_learn),
            alpha: v.scalar(self.alpha),
            beta: v.scalar(self.beta),
        }
    }

    /// Temporal mean `[B, N, T, C] -> [B, N, C]`.
    fn temporal_mean(x: &Tensor, d: Dims) -> Tensor {
        let mut m = Tensor::zeros(&[d.b, d.n, d.c]);
        let inv_t = 1.0 / d.t as f64;
        for bn in 0..d.b * d.n {
            let dst = &mut m.data_mut()[bn * d.c..(bn + 1) * d.c];
            for t in 0..d.t {
                let src = &x.data()[(bn * d.t + t) * d.c..(bn * d.t + t + 1) * d.c];
                for (a, s) in dst.iter_mut().zip(src) {
                    *a += s;
                }
            }
            dst.iter_mut().for_each(|a| *a *= inv_t);
        }
        m
    }

    /// Per-sample topologies without running the feature pathway.
    pub fn topology(&self, v: Values, x: &Tensor, hop: &HopTable) -> Result<Vec<(ScaleMask, TopologyBundle)>> {
        let d = self.check_input(x, hop)?;
        let xbar = Self::temporal_mean(x, d);
        let e = self.theta.forward(v, &xbar)?;
        let dist = pairwise_distance(&e)?;
        let b_cal = calibration(&dist);
        let masks = scale_mask(&dist, hop, self.shape.k)?;
        let n = d.n;
        masks
            .into_iter()
            .enumerate()
            .map(|(bb, mask)| {
                let bc = Tensor::new(vec![n, n], b_cal.data()[bb * n * n..(bb + 1) * n * n].to_vec())?;
                let bundle = assemble_topology(&mask, &bc, self.topology_params(v))?;
                Ok((mask, bundle))
            })
            .collect()
    }

    pub fn forward(&self, v: Values, x: &Tensor, hop: &HopTable) -> Result<(Tensor, TsegcCache)> {
        let d = self.check_input(x, hop)?;
        let (n, t) = (d.n, d.t);
        let k = self.shape.k;
        let cp = self.shape.c_prime();
        let width = self.shape.partition_width();

        let xbar = Self::temporal_mean(x, d);
        let e = self.theta.forward(v, &xbar)?;
        let dist = pairwise_distance(&e)?;
        let b_cal = calibration(&dist);
        let masks = scale_mask(&dist, hop, k)?;

        let nn = n * n;
        let mut h = Tensor::zeros(&[d.b, k, n, n]);
        let mut z = Tensor::zeros(&[d.b, k, n, n]);
        let tp = self.topology_params(v);
        for (bb, mask) in masks.iter().enumerate() {
            let bc = Tensor::new(vec![n, n], b_cal.data()[bb * nn..(bb + 1) * nn].to_vec())?;
            let bundle = assemble_topology(mask, &bc, tp)?;
            h.data_mut()[bb * k * nn..(bb + 1) * k * nn].copy_from_slice(mask.h.data());
            z.data_mut()[bb * k * nn..(bb + 1) * k * nn].copy_from_slice(bundle.z.data());
        }

        let mut pre: Option<Tensor> = None;
        let mut xts = Vec::with_capacity(self.shape.subsets);
        let mut aggs = Vec::with_capacity(self.shape.subsets);
        for (psi, out) in self.psi.iter().zip(&self.out) {
            let xt = psi.forward(v, x)?;
            let mut agg = Tensor::zeros(&d.with_c(width).shape());
            for bb in 0..d.b {
                aggregate(
                    &z.data()[bb * k * nn..(bb + 1) * k * nn],
                    &xt.data()[bb * n * t * width..(bb + 1) * n * t * width],
                    &mut agg.data_mut()[bb * n * t * width..(bb + 1) * n * t * width],
                    n,
                    t,
                    k,
                    cp,
                );
            }
            let y = out.forward(v, &agg)?;
            match pre.as_mut() {
                Some(p) => p.add_assign(&y),
                None => pre = Some(y),
            }
            xts.push(xt);
            aggs.push(agg);
        }
        let pre = pre.expect("at least one subset");
        let y = pre.map(gelu);
        Ok((
            y,
            TsegcCache {
                dims: d,
                x: x.clone(),
                xbar,
                e,
                b_cal,
                h,
                z,
                xt: xts,
                agg: aggs,
                pre,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, v: Values, g: &mut Grads, cache: &TsegcCache, dy: &Tensor) -> Result<Tensor> {
        let d = cache.dims;
        if dy.shape() != cache.pre.shape() {
            return Err(Error::dim("tsegc backward", dy.shape(), cache.pre.shape()));
        }
        let (n, t, k) = (d.n, d.t, self.shape.k);
        let cp = self.shape.c_prime();
        let width = self.shape.partition_width();
        let nn = n * n;

        let mut dpre = dy.clone();
        for (gv, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *gv *= gelu_grad(p);
        }

        let mut dz = Tensor::zeros(&[d.b, k, n, n]);
        let mut dx = Tensor::zeros(&d.shape());
        for s in 0..self.shape.subsets {
            let dagg = self.out[s]
                .backward(v, g, &cache.agg[s], &dpre, true)
                .expect("requested dx");
            let xt = &cache.xt[s];
            let mut dxt = Tensor::zeros(xt.shape());
            let span = n * t * width;
            for bb in 0..d.b {
                aggregate_backward(
                    &cache.z.data()[bb * k * nn..(bb + 1) * k * nn],
                    &xt.data()[bb * span..(bb + 1) * span],
                    &dagg.data()[bb * span..(bb + 1) * span],
                    &mut dz.data_mut()[bb * k * nn..(bb + 1) * k * nn],
                    &mut dxt.data_mut()[bb * span..(bb + 1) * span],
                    n,
                    t,
                    k,
                    cp,
                );
            }
            let dxs = self.psi[s]
                .backward(v, g, &cache.x, &dxt, true)
                .expect("requested dx");
            dx.add_assign(&dxs);
        }

        // topology terms
        let alpha = v.scalar(self.alpha);
        let beta = v.scalar(self.beta);
        let m = v.get(self.m_shared).data();
        let mut d_alpha = 0.0;
        let mut d_beta = 0.0;
        let mut dm = vec![0.0; nn];
        let mut dc = vec![0.0; k * nn];
        let mut db_cal = vec![0.0; d.b * nn];
        for bb in 0..d.b {
            for s in 0..k {
                let off = (bb * k + s) * nn;
                for idx in 0..nn {
                    let gz = dz.data()[off + idx];
                    let hv = cache.h.data()[off + idx];
                    let bc = cache.b_cal.data()[bb * nn + idx];
                    d_alpha += gz * hv * m[idx];
                    d_beta += gz * bc;
                    dm[idx] += alpha * hv * gz;
                    dc[s * nn + idx] += gz;
                    db_cal[bb * nn + idx] += beta * gz;
                }
            }
        }
        g.get_mut(self.alpha)[0] += d_alpha;
        g.get_mut(self.beta)[0] += d_beta;
        for (a, b) in g.get_mut(self.m_shared).iter_mut().zip(&dm) {
            *a += b;
        }
        for (a, b) in g.get_mut(self.c_learn).iter_mut().zip(&dc) {
            *a += b;
        }

        // calibration -> distances -> embedding
        let ce = self.shape.c_embed();
        let mut de = Tensor::zeros(&[d.b, n, ce]);
        for bb in 0..d.b {
            let e = &cache.e.data()[bb * n * ce..(bb + 1) * n * ce];
            let dd = |i: usize, j: usize| {
                let bc = cache.b_cal.data()[bb * nn + i * n + j];
                db_cal[bb * nn + i * n + j] * (1.0 - bc * bc)
            };
            let dst = &mut de.data_mut()[bb * n * ce..(bb + 1) * n * ce];
            for a in 0..n {
                for j in 0..n {
                    if j == a {
                        continue;
                    }
                    let w = -2.0 * (dd(a, j) + dd(j, a));
                    for c in 0..ce {
                        dst[a * ce + c] += w * (e[a * ce + c] - e[j * ce + c]);
                    }
                }
            }
        }
        let dxbar = self
            .theta
            .backward(v, g, &cache.xbar, &de, true)
            .expect("requested dx");
        let inv_t = 1.0 / t as f64;
        for bn in 0..d.b * n {
            let src = &dxbar.data()[bn * d.c..(bn + 1) * d.c];
            for tt in 0..t {
                let dst = &mut dx.data_mut()[(bn * t + tt) * d.c..(bn * t + tt + 1) * d.c];
                for (a, s) in dst.iter_mut().zip(src) {
                    *a += s * inv_t;
                }
            }
        }
        Ok(dx)
    }

    pub fn num_params(&self) -> usize {
        let n = self.shape.n;
        self.psi.iter().chain(&self.out).map(Linear::num_params).sum::<usize>()
            + self.theta.num_params()
            + n * n
            + self.shape.k * n * n
            + 2
    }

    /// Multiply-accumulate count for a `[B, N, T, C_in]` input.
    pub fn flops(&self, b: usize, t: usize) -> u64 {
        let n = self.shape.n;
        let rows = b * n * t;
        let width = self.shape.partition_width() as u64;
        let per_subset = self.psi[0].flops(rows)
            + self.out[0].flops(rows)
            + (b * n * n * t) as u64 * width;
        let topo = self.theta.flops(b * n) + (b * n * n * self.shape.c_embed()) as u64;
        per_subset * self.shape.subsets as u64 + topo
    }
}

/// `out[i, t, kC'..] += sum_j z_k[i][j] * xt[j, t, kC'..]` for one sample.
fn aggregate(z: &[f64], xt: &[f64], out: &mut [f64], n: usize, t: usize, k: usize, cp: usize) {
    let width = k * cp;
    for kk in 0..k {
        let zk = &z[kk * n * n..(kk + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                let zv = zk[i * n + j];
                for tt in 0..t {
                    let o = (i * t + tt) * width + kk * cp;
                    let s = (j * t + tt) * width + kk * cp;
                    for (a, b) in out[o..o + cp].iter_mut().zip(&xt[s..s + cp]) {
                        *a += zv * b;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn aggregate_backward(
    z: &[f64],
    xt: &[f64],
    dout: &[f64],
    dz: &mut [f64],
    dxt: &mut [f64],
    n: usize,
    t: usize,
    k: usize,
    cp: usize,
) {
    let width = k * cp;
    for kk in 0..k {
        for i in 0..n {
            for j in 0..n {
                let zv = z[(kk * n + i) * n + j];
                let mut acc = 0.0;
                for tt in 0..t {
                    let o = (i * t + tt) * width + kk * cp;
                    let s = (j * t + tt) * width + kk * cp;
                    let go = &dout[o..o + cp];
                    acc += go.iter().zip(&xt[s..s + cp]).map(|(a, b)| a * b).sum::<f64>();
                    for (dxv, gv) in dxt[s..s + cp].iter_mut().zip(go) {
                        *dxv += zv * gv;
                    }
                }
                dz[(kk * n + i) * n + j] += acc;
            }
        }
    }
}
