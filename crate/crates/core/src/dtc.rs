//! Deformable temporal convolution and the four-branch temporal block.
//!
//! A DTC layer runs a depthwise temporal convolution, pools the result over
//! joints with learned weights, predicts one offset and one modulation weight
//! per output frame and tap from that readout, resamples the depthwise output
//! at the shifted tap positions by linear interpolation and mixes the taps
//! with a pointwise projection. With zero offset and modulation projections
//! the layer is a plain dilated depthwise-separable convolution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::activation::{gelu, gelu_grad};
use crate::error::{Error, Result};
use crate::init::{fan_in_uniform, InitRng};
use crate::layers::{
    max_pool_frames, max_pool_frames_backward, out_frames, subsample_frames, subsample_frames_backward, Dims,
    Linear,
};
use crate::params::{Grads, ParamId, ParamStore, Values};
use crate::tensor::Tensor;

pub const KERNEL: usize = 5;

/// Input of the modulation projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ModSource {
    /// The joint readout, like the offsets.
    #[default]
    Readout,
    /// The predicted offsets.
    Offsets,
}

/// Tap geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelCfg {
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl KernelCfg {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(Error::config("kernel", "must be at least 1"));
        }
        if self.dilation == 0 {
            return Err(Error::config("dilation", "must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Undeformed position of tap `r` for output frame `t_out`.
    pub fn base_position(&self, t_out: usize, r: usize) -> f64 {
        let half = (self.kernel - 1) as f64 / 2.0;
        (t_out * self.stride) as f64 + (r as f64 - half) * self.dilation as f64
    }
}

/// Per-frame, per-tap offsets and modulation weights, `[B, T', R]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub p: Tensor,
    pub m_mod: Tensor,
}

/// `Z[b][t][c] = (1/N) sum_n w[n] Y[b][n][t][c]`.
pub fn weighted_readout(y: &Tensor, w: &[f64]) -> Result<Tensor> {
    let d = Dims::of(y)?;
    if w.len() != d.n {
        return Err(Error::dim("weighted_readout", y.shape(), &[w.len()]));
    }
    let mut z = Tensor::zeros(&[d.b, d.t, d.c]);
    let inv_n = 1.0 / d.n as f64;
    let tc = d.t * d.c;
    for b in 0..d.b {
        let dst = &mut z.data_mut()[b * tc..(b + 1) * tc];
        for (n, &wn) in w.iter().enumerate() {
            let src = &y.data()[(b * d.n + n) * tc..(b * d.n + n + 1) * tc];
            for (a, s) in dst.iter_mut().zip(src) {
                *a += wn * inv_n * s;
            }
        }
    }
    Ok(z)
}

/// Offsets `z W_off + b_off` and modulation `1 + tanh(src W_mod + b_mod)`
/// where `src` is `z` or the offsets. Also returns the modulation
/// pre-activation.
pub fn compute_offsets(
    v: Values,
    offset: &Linear,
    modulation: &Linear,
    source: ModSource,
    z: &Tensor,
) -> Result<(OffsetField, Tensor)> {
    let p = offset.forward(v, z)?;
    let pre = match source {
        ModSource::Readout => modulation.forward(v, z)?,
        ModSource::Offsets => modulation.forward(v, &p)?,
    };
    let m_mod = pre.map(|a| 1.0 + libm::tanh(a));
    Ok((OffsetField { p, m_mod }, pre))
}

/// Clamped sampling point: lower frame, upper frame, fraction, and whether
/// the unclamped position was inside the valid range.
#[inline]
fn locate(pos: f64, t: usize) -> (usize, usize, f64, bool) {
    let hi = (t - 1) as f64;
    let inside = (0.0..=hi).contains(&pos);
    let q = pos.clamp(0.0, hi);
    let i0 = libm::floor(q) as usize;
    let i0 = i0.min(t - 1);
    let i1 = (i0 + 1).min(t - 1);
    (i0, i1, q - i0 as f64, inside)
}

/// Samples every joint and channel of `x` at tap `r` of output frame
/// `t_out`, shifted by the frame's offset and scaled by its modulation.
pub fn deform_sample(x: &Tensor, t_out: usize, r: usize, offsets: &OffsetField, kcfg: KernelCfg) -> Result<Tensor> {
    kcfg.validate()?;
    let d = Dims::of(x)?;
    let [ob, ot, or] = match *offsets.p.shape() {
        [b, t, r] => [b, t, r],
        _ => return Err(Error::dim("deform_sample", offsets.p.shape(), &[d.b, 0, kcfg.kernel])),
    };
    if ob != d.b || or != kcfg.kernel || t_out >= ot || r >= or || offsets.m_mod.shape() != offsets.p.shape() {
        return Err(Error::dim("deform_sample", offsets.p.shape(), &[d.b, t_out + 1, kcfg.kernel]));
    }
    let mut out = Tensor::zeros(&[d.b, d.n, d.c]);
    for b in 0..d.b {
        let oi = (b * ot + t_out) * or + r;
        let pos = kcfg.base_position(t_out, r) + offsets.p.data()[oi];
        let m = offsets.m_mod.data()[oi];
        let (i0, i1, frac, _) = locate(pos, d.t);
        for n in 0..d.n {
            let base = (b * d.n + n) * d.t;
            for c in 0..d.c {
                let v0 = x.data()[(base + i0) * d.c + c];
                let v1 = x.data()[(base + i1) * d.c + c];
                out.data_mut()[(b * d.n + n) * d.c + c] = m * (v0 * (1.0 - frac) + v1 * frac);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DtcConfig {
    pub n: usize,
    pub c: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub mod_source: ModSource,
}

impl DtcConfig {
    fn kcfg(&self) -> KernelCfg {
        KernelCfg {
            kernel: self.kernel,
            dilation: self.dilation,
            stride: self.stride,
        }
    }
}

/// One deformable temporal convolution with `C` channels in and out.
#[derive(Debug, Clone)]
pub struct Dtc {
    pub cfg: DtcConfig,
    /// `[C, R]` depthwise taps.
    pub depthwise: ParamId,
    /// `[N]` readout weights.
    pub readout: ParamId,
    pub offset: Linear,
    pub modulation: Linear,
    /// `R C -> C`; rows `r C .. (r + 1) C` hold tap `r`.
    pub pointwise: Linear,
}

#[derive(Debug, Clone)]
pub struct DtcCache {
    x: Tensor,
    y: Tensor,
    z: Tensor,
    field: OffsetField,
    mod_pre: Tensor,
    samples: Tensor,
}

impl DtcCache {
    pub fn offsets(&self) -> &OffsetField {
        &self.field
    }
}

impl Dtc {
    /// Offset and modulation projections start at zero and the readout
    /// weights at one, so a fresh layer is an undeformed convolution.
    pub fn register(store: &mut ParamStore, rng: &mut InitRng, name: &str, cfg: DtcConfig) -> Result<Self> {
        cfg.kcfg().validate()?;
        if cfg.n == 0 || cfg.c == 0 {
            return Err(Error::config("c_base", "DTC needs at least one joint and channel"));
        }
        let (c, r) = (cfg.c, cfg.kernel);
        let depthwise = store.insert(format!("{name}.depthwise"), fan_in_uniform(rng, &[c, r], r));
        let readout = store.insert(format!("{name}.readout"), Tensor::full(&[cfg.n], 1.0));
        let offset = Linear::register(store, rng, &format!("{name}.offset"), c, r, true);
        let mod_in = match cfg.mod_source {
            ModSource::Readout => c,
            ModSource::Offsets => r,
        };
        let modulation = Linear::register(store, rng, &format!("{name}.modulation"), mod_in, r, true);
        store.value_mut(offset.w).fill(0.0);
        store.value_mut(modulation.w).fill(0.0);
        let pointwise = Linear::register(store, rng, &format!("{name}.pointwise"), r * c, c, true);
        Ok(Dtc {
            cfg,
            depthwise,
            readout,
            offset,
            modulation,
            pointwise,
        })
    }

    fn check(&self, x: &Tensor) -> Result<Dims> {
        let d = Dims::of(x)?;
        if d.n != self.cfg.n || d.c != self.cfg.c || d.t == 0 {
            return Err(Error::dim("dtc", x.shape(), &[d.b, self.cfg.n, d.t.max(1), self.cfg.c]));
        }
        Ok(d)
    }

    /// Zero-padded strided depthwise convolution.
    fn depthwise_forward(&self, w: &[f64], x: &Tensor, d: Dims) -> Tensor {
        let kc = self.cfg.kcfg();
        let to = out_frames(d.t, kc.stride);
        let r_n = kc.kernel;
        let mut y = Tensor::zeros(&d.with_t(to).shape());
        for bn in 0..d.b * d.n {
            for t in 0..to {
                let dst = (bn * to + t) * d.c;
                for r in 0..r_n {
                    let pos = kc.base_position(t, r);
                    if pos < 0.0 || pos >= d.t as f64 {
                        continue;
                    }
                    let src = (bn * d.t + pos as usize) * d.c;
                    for c in 0..d.c {
                        y.data_mut()[dst + c] += w[c * r_n + r] * x.data()[src + c];
                    }
                }
            }
        }
        y
    }

    pub fn forward(&self, v: Values, x: &Tensor) -> Result<(Tensor, DtcCache)> {
        let d = self.check(x)?;
        let (c, r_n) = (self.cfg.c, self.cfg.kernel);
        let y = self.depthwise_forward(v.get(self.depthwise).data(), x, d);
        let to = y.shape()[2];
        let z = weighted_readout(&y, v.get(self.readout).data())?;
        let (field, mod_pre) = compute_offsets(v, &self.offset, &self.modulation, self.cfg.mod_source, &z)?;
        let sample_cfg = KernelCfg {
            stride: 1,
            ..self.cfg.kcfg()
        };

        let mut samples = Tensor::zeros(&[d.b, d.n, to, r_n * c]);
        for b in 0..d.b {
            for t in 0..to {
                for r in 0..r_n {
                    let oi = (b * to + t) * r_n + r;
                    let pos = sample_cfg.base_position(t, r) + field.p.data()[oi];
                    let m = field.m_mod.data()[oi];
                    let (i0, i1, frac, _) = locate(pos, to);
                    for n in 0..d.n {
                        let ybase = (b * d.n + n) * to;
                        let dst = ((ybase + t) * r_n + r) * c;
                        for ch in 0..c {
                            let v0 = y.data()[(ybase + i0) * c + ch];
                            let v1 = y.data()[(ybase + i1) * c + ch];
                            samples.data_mut()[dst + ch] = m * (v0 * (1.0 - frac) + v1 * frac);
                        }
                    }
                }
            }
        }
        let out = self.pointwise.forward(v, &samples)?;
        Ok((
            out,
            DtcCache {
                x: x.clone(),
                y,
                z,
                field,
                mod_pre,
                samples,
            },
        ))
    }

    pub fn backward(&self, v: Values, g: &mut Grads, cache: &DtcCache, dy: &Tensor) -> Result<Tensor> {
        let d = Dims::of(&cache.x)?;
        let (c, r_n) = (self.cfg.c, self.cfg.kernel);
        let to = cache.y.shape()[2];
        let expected = [d.b, d.n, to, c];
        if dy.shape() != expected {
            return Err(Error::dim("dtc backward", dy.shape(), &expected));
        }
        let ds = self
            .pointwise
            .backward(v, g, &cache.samples, dy, true)
            .expect("requested dx");
        let sample_cfg = KernelCfg {
            stride: 1,
            ..self.cfg.kcfg()
        };

        let y = &cache.y;
        let mut dyd = Tensor::zeros(y.shape());
        let mut dp = Tensor::zeros(cache.field.p.shape());
        let mut dm = Tensor::zeros(cache.field.p.shape());
        for b in 0..d.b {
            for t in 0..to {
                for r in 0..r_n {
                    let oi = (b * to + t) * r_n + r;
                    let pos = sample_cfg.base_position(t, r) + cache.field.p.data()[oi];
                    let m = cache.field.m_mod.data()[oi];
                    let (i0, i1, frac, inside) = locate(pos, to);
                    let mut gm = 0.0;
                    let mut gq = 0.0;
                    for n in 0..d.n {
                        let ybase = (b * d.n + n) * to;
                        let src = ((ybase + t) * r_n + r) * c;
                        for ch in 0..c {
                            let g_s = ds.data()[src + ch];
                            let v0 = y.data()[(ybase + i0) * c + ch];
                            let v1 = y.data()[(ybase + i1) * c + ch];
                            gm += g_s * (v0 * (1.0 - frac) + v1 * frac);
                            let gi = g_s * m;
                            dyd.data_mut()[(ybase + i0) * c + ch] += gi * (1.0 - frac);
                            dyd.data_mut()[(ybase + i1) * c + ch] += gi * frac;
                            gq += gi * (v1 - v0);
                        }
                    }
                    dm.data_mut()[oi] = gm;
                    if inside {
                        dp.data_mut()[oi] = gq;
                    }
                }
            }
        }

        let mut dmod_pre = dm;
        for (gv, &a) in dmod_pre.data_mut().iter_mut().zip(cache.mod_pre.data()) {
            let th = libm::tanh(a);
            *gv *= 1.0 - th * th;
        }
        let mut dz = match self.cfg.mod_source {
            ModSource::Readout => self
                .modulation
                .backward(v, g, &cache.z, &dmod_pre, true)
                .expect("requested dx"),
            ModSource::Offsets => {
                let dpp = self
                    .modulation
                    .backward(v, g, &cache.field.p, &dmod_pre, true)
                    .expect("requested dx");
                dp.add_assign(&dpp);
                Tensor::zeros(cache.z.shape())
            }
        };
        let dz_off = self.offset.backward(v, g, &cache.z, &dp, true).expect("requested dx");
        dz.add_assign(&dz_off);

        // readout
        let w = v.get(self.readout).data();
        let inv_n = 1.0 / d.n as f64;
        let tc = to * c;
        let mut dw = vec![0.0; d.n];
        for b in 0..d.b {
            let gz = &dz.data()[b * tc..(b + 1) * tc];
            for n in 0..d.n {
                let off = (b * d.n + n) * tc;
                let yv = &y.data()[off..off + tc];
                dw[n] += inv_n * gz.iter().zip(yv).map(|(a, b)| a * b).sum::<f64>();
                for (dst, gv) in dyd.data_mut()[off..off + tc].iter_mut().zip(gz) {
                    *dst += w[n] * inv_n * gv;
                }
            }
        }
        for (a, b) in g.get_mut(self.readout).iter_mut().zip(&dw) {
            *a += b;
        }

        // depthwise
        let kc = self.cfg.kcfg();
        let wd = v.get(self.depthwise).data();
        let mut dwd = vec![0.0; c * r_n];
        let mut dx = Tensor::zeros(cache.x.shape());
        for bn in 0..d.b * d.n {
            for t in 0..to {
                let gsrc = (bn * to + t) * c;
                for r in 0..r_n {
                    let pos = kc.base_position(t, r);
                    if pos < 0.0 || pos >= d.t as f64 {
                        continue;
                    }
                    let xi = (bn * d.t + pos as usize) * c;
                    for ch in 0..c {
                        let gv = dyd.data()[gsrc + ch];
                        dwd[ch * r_n + r] += gv * cache.x.data()[xi + ch];
                        dx.data_mut()[xi + ch] += gv * wd[ch * r_n + r];
                    }
                }
            }
        }
        for (a, b) in g.get_mut(self.depthwise).iter_mut().zip(&dwd) {
            *a += b;
        }
        Ok(dx)
    }

    pub fn num_params(&self) -> usize {
        self.cfg.c * self.cfg.kernel
            + self.cfg.n
            + self.offset.num_params()
            + self.modulation.num_params()
            + self.pointwise.num_params()
    }

    /// Multiply-accumulates for a `[B, N, T, C]` input.
    pub fn flops(&self, b: usize, t: usize) -> u64 {
        let to = out_frames(t, self.cfg.stride);
        let (n, c, r) = (self.cfg.n, self.cfg.c, self.cfg.kernel);
        let depthwise = (b * n * to * c * r) as u64;
        let readout = (b * n * to * c) as u64;
        depthwise
            + readout
            + self.offset.flops(b * to)
            + self.modulation.flops(b * to)
            + self.pointwise.flops(b * n * to)
    }
}

/// Four parallel temporal branches concatenated along channels: DTC with
/// dilation 1, DTC with dilation 2, max-pool, and a strided 1x1 path.
#[derive(Debug, Clone)]
pub struct Mbdtc {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub reduce: [Linear; 4],
    pub dtc: [Dtc; 2],
}

#[derive(Debug, Clone)]
pub struct MbdtcCache {
    t_in: usize,
    x_sub: Tensor,
    pre: [Tensor; 4],
    dtc: [DtcCache; 2],
    pool_arg: Vec<u32>,
}

impl MbdtcCache {
    pub fn dtc_offsets(&self) -> [&OffsetField; 2] {
        [self.dtc[0].offsets(), self.dtc[1].offsets()]
    }
}

impl Mbdtc {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        n: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        mod_source: ModSource,
    ) -> Result<Self> {
        if c_out == 0 || !c_out.is_multiple_of(4) {
            return Err(Error::config(
                "c_out",
                format!("temporal block width {c_out} is not a positive multiple of 4"),
            ));
        }
        if stride == 0 {
            return Err(Error::config("stride", "must be at least 1"));
        }
        let cb = c_out / 4;
        let reduce = [0, 1, 2, 3].map(|i| Linear::register(store, rng, &format!("{name}.reduce.{i}"), c_in, cb, true));
        let mk = |store: &mut ParamStore, rng: &mut InitRng, i: usize, dilation: usize| {
            Dtc::register(
                store,
                rng,
                &format!("{name}.dtc.{i}"),
                DtcConfig {
                    n,
                    c: cb,
                    kernel: KERNEL,
                    dilation,
                    stride,
                    mod_source,
                },
            )
        };
        let d0 = mk(store, rng, 0, 1)?;
        let d1 = mk(store, rng, 1, 2)?;
        Ok(Mbdtc {
            c_in,
            c_out,
            stride,
            reduce,
            dtc: [d0, d1],
        })
    }

    pub fn forward(&self, v: Values, x: &Tensor) -> Result<(Tensor, MbdtcCache)> {
        let d = Dims::of(x)?;
        if d.c != self.c_in {
            return Err(Error::dim("mbdtc", x.shape(), &[d.b, d.n, d.t, self.c_in]));
        }
        let cb = self.c_out / 4;
        let x_sub = subsample_frames(x, self.stride)?;
        let pre = [
            self.reduce[0].forward(v, x)?,
            self.reduce[1].forward(v, x)?,
            self.reduce[2].forward(v, x)?,
            self.reduce[3].forward(v, &x_sub)?,
        ];
        let act = [pre[0].map(gelu), pre[1].map(gelu), pre[2].map(gelu)];
        let (b0, c0) = self.dtc[0].forward(v, &act[0])?;
        let (b1, c1) = self.dtc[1].forward(v, &act[1])?;
        let (b2, pool_arg) = max_pool_frames(&act[2], self.stride)?;
        let b3 = pre[3].map(gelu);
        let to = out_frames(d.t, self.stride);
        let mut out = Tensor::zeros(&[d.b, d.n, to, self.c_out]);
        for (i, br) in [&b0, &b1, &b2, &b3].into_iter().enumerate() {
            for (row, src) in out
                .data_mut()
                .chunks_exact_mut(self.c_out)
                .zip(br.data().chunks_exact(cb))
            {
                row[i * cb..(i + 1) * cb].copy_from_slice(src);
            }
        }
        Ok((
            out,
            MbdtcCache {
                t_in: d.t,
                x_sub,
                pre,
                dtc: [c0, c1],
                pool_arg,
            },
        ))
    }

    pub fn backward(&self, v: Values, g: &mut Grads, cache: &MbdtcCache, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let d = Dims::of(dy)?;
        if d.c != self.c_out {
            return Err(Error::dim("mbdtc backward", dy.shape(), &[self.c_out]));
        }
        let cb = self.c_out / 4;
        let split: Vec<Tensor> = (0..4)
            .map(|i| {
                let data = dy
                    .data()
                    .chunks_exact(self.c_out)
                    .flat_map(|row| row[i * cb..(i + 1) * cb].iter().copied())
                    .collect();
                Tensor::new(d.with_c(cb).shape().to_vec(), data).expect("branch shape")
            })
            .collect();

        let mut dact = [
            self.dtc[0].backward(v, g, &cache.dtc[0], &split[0])?,
            self.dtc[1].backward(v, g, &cache.dtc[1], &split[1])?,
            max_pool_frames_backward(&split[2], &cache.pool_arg, cache.t_in)?,
        ];
        let mut dx = Tensor::zeros(x.shape());
        for (i, da) in dact.iter_mut().enumerate() {
            for (gv, &p) in da.data_mut().iter_mut().zip(cache.pre[i].data()) {
                *gv *= gelu_grad(p);
            }
            let dxi = self.reduce[i].backward(v, g, x, da, true).expect("requested dx");
            dx.add_assign(&dxi);
        }
        let mut d3 = split[3].clone();
        for (gv, &p) in d3.data_mut().iter_mut().zip(cache.pre[3].data()) {
            *gv *= gelu_grad(p);
        }
        let dsub = self.reduce[3]
            .backward(v, g, &cache.x_sub, &d3, true)
            .expect("requested dx");
        dx.add_assign(&subsample_frames_backward(&dsub, cache.t_in, self.stride)?);
        Ok(dx)
    }

    pub fn num_params(&self) -> usize {
        self.reduce.iter().map(Linear::num_params).sum::<usize>() + self.dtc.iter().map(Dtc::num_params).sum::<usize>()
    }

    pub fn flops(&self, b: usize, n: usize, t: usize) -> u64 {
        let to = out_frames(t, self.stride);
        let full = self.reduce[..3].iter().map(|l| l.flops(b * n * t)).sum::<u64>();
        full + self.reduce[3].flops(b * n * to) + self.dtc.iter().map(|l| l.flops(b, t)).sum::<u64>()
    }
}
