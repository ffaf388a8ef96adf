//! Gradient checks of every layer type at toy sizes.
//!
//! Each case builds a small layer with seeded parameters, draws a random
//! input and checks `sum(R * layer(x))` (or the cross-entropy of the whole
//! model) against central differences. Deformable layers get non-zero
//! offsets whose fractional parts stay well away from integers, so no sampling
//! position sits on an interpolation kink.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::dtc::{Dtc, DtcConfig, Mbdtc, ModSource, KERNEL};
use crate::error::Result;
use crate::gradcheck::{grad_check, CheckConfig, CheckReport};
use crate::graph::{hop_table, normalize_adjacency, SkeletonGraph};
use crate::init::{rng, uniform, InitRng};
use crate::layers::{Linear, Norm};
use crate::loss::cross_entropy;
use crate::model::{ModelConfig, TsegcnModel};
use crate::params::{BufferStore, ParamStore};
use crate::tensor::Tensor;
use crate::tsegc::{TsegcLayer, TsegcShape};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerCheck {
    pub layer: String,
    pub report: CheckReport,
    /// For graph layers: whether every `m_shared` entry outside all scale
    /// masks received exactly zero gradient.
    pub masked_zero: Option<bool>,
    /// Number of `m_shared` entries outside every mask.
    pub masked_entries: usize,
}

impl LayerCheck {
    pub fn passed(&self) -> bool {
        self.report.passed && self.masked_zero != Some(false)
    }
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn finish(layer: &str, report: CheckReport) -> LayerCheck {
    LayerCheck {
        layer: layer.to_string(),
        report,
        masked_zero: None,
        masked_entries: 0,
    }
}

pub fn check_linear(seed: u64, cfg: &CheckConfig) -> Result<LayerCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let lin = Linear::register(&mut store, &mut r, "classifier", 6, 4, true);
    let x = uniform(&mut r, &[3, 6], 1.0);
    let proj = uniform(&mut r, &[3, 4], 1.0);
    let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
        let y = lin.forward(p.values(), &x)?;
        if with_grad {
            let (v, mut g) = p.split_mut();
            lin.backward(v, &mut g, &x, &proj, false);
        }
        Ok(dot(&y, &proj))
    };
    Ok(finish("linear", grad_check(&mut store, &mut f, cfg)?))
}

pub fn check_norm(seed: u64, cfg: &CheckConfig) -> Result<LayerCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let mut bufs = BufferStore::default();
    let norm = Norm::register(&mut store, &mut bufs, "norm", 3);
    store.value_mut(norm.gamma).data_mut().copy_from_slice(&[0.7, 1.3, -0.4]);
    store.value_mut(norm.beta).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
    let x = uniform(&mut r, &[2, 3, 4, 3], 1.0);
    let proj = uniform(&mut r, &[2, 3, 4, 3], 1.0);
    let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
        let (y, cache) = norm.forward_train(p.values(), &x)?;
        if with_grad {
            let (v, mut g) = p.split_mut();
            norm.backward(v, &mut g, &cache, &proj);
        }
        Ok(dot(&y, &proj))
    };
    Ok(finish("norm", grad_check(&mut store, &mut f, cfg)?))
}

/// Graph layer on a 5-joint chain. `m_shared` is perturbed away from the
/// normalized adjacency so that every entry carries a distinct value.
pub fn check_tsegc(seed: u64, cfg: &CheckConfig) -> Result<LayerCheck> {
    let graph = SkeletonGraph::chain(5);
    let hop = hop_table(&graph, graph.n())?;
    let a_hat = normalize_adjacency(&graph).a_hat;
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let shape = TsegcShape {
        n: 5,
        c_in: 6,
        c_out: 8,
        k: 2,
        r_red: 2,
        subsets: 1,
    };
    let layer = TsegcLayer::register(&mut store, &mut r, "gc", shape, &a_hat)?;
    let noise = uniform(&mut r, &[5, 5], 0.3);
    store.value_mut(layer.m_shared).add_assign(&noise);
    store.value_mut(layer.c_learn).add_assign(&uniform(&mut r, &[2, 5, 5], 0.2));
    store.value_mut(layer.alpha).data_mut()[0] = 0.8;
    store.value_mut(layer.beta).data_mut()[0] = 0.3;
    let x = uniform(&mut r, &[2, 5, 3, 6], 1.0);
    let proj = uniform(&mut r, &[2, 5, 3, 8], 1.0);
    let mut masks = Tensor::default();
    let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
        let (y, cache) = layer.forward(p.values(), &x, &hop)?;
        if with_grad {
            masks = cache.masks().clone();
            let (v, mut g) = p.split_mut();
            layer.backward(v, &mut g, &cache, &proj)?;
        }
        Ok(dot(&y, &proj))
    };
    let report = grad_check(&mut store, &mut f, cfg)?;
    // An entry is masked when no sample and no scale activates it.
    let nn = 25;
    let grad = store.grad(layer.m_shared).data();
    let mut masked = 0;
    let mut zero = true;
    for e in 0..nn {
        if masks.data().chunks_exact(nn).all(|h| h[e] == 0.0) {
            masked += 1;
            zero &= grad[e] == 0.0;
        }
    }
    Ok(LayerCheck {
        layer: "tsegc".to_string(),
        report,
        masked_zero: Some(zero),
        masked_entries: masked,
    })
}

/// Moves a DTC layer off its undeformed initialization: taps get biases
/// `k + u` with integer `k` in `-2..=2` and `u` in `[0.3, 0.7]`, and small
/// data-dependent terms.
fn deform(store: &mut ParamStore, r: &mut InitRng, dtc: &Dtc, weight_bound: f64) {
    for b in store.value_mut(dtc.offset.b.expect("offset bias")).data_mut() {
        *b = r.random_range(-2i32..=2) as f64 + r.random_range(0.3..0.7);
    }
    let w = uniform(r, store.value(dtc.offset.w).shape(), weight_bound);
    *store.value_mut(dtc.offset.w) = w;
    let m = uniform(r, store.value(dtc.modulation.w).shape(), 0.3);
    *store.value_mut(dtc.modulation.w) = m;
    let mb = uniform(r, store.value(dtc.modulation.b.expect("modulation bias")).shape(), 0.3);
    *store.value_mut(dtc.modulation.b.expect("modulation bias")) = mb;
    let ro = uniform(r, &[dtc.cfg.n], 0.3).map(|v| 1.0 + v);
    *store.value_mut(dtc.readout) = ro;
}

/// Distance of the closest offset to an integer.
fn kink_margin(p: &Tensor) -> f64 {
    p.data()
        .iter()
        .map(|v| {
            let f = v - libm::floor(*v);
            f.min(1.0 - f)
        })
        .fold(f64::INFINITY, f64::min)
}

const MIN_MARGIN: f64 = 0.05;

pub fn check_dtc(seed: u64, dilation: usize, stride: usize, source: ModSource, cfg: &CheckConfig) -> Result<LayerCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let dtc = Dtc::register(
        &mut store,
        &mut r,
        "dtc",
        DtcConfig {
            n: 3,
            c: 4,
            kernel: KERNEL,
            dilation,
            stride,
            mod_source: source,
        },
    )?;
    deform(&mut store, &mut r, &dtc, 0.02);
    let x = uniform(&mut r, &[2, 3, 7, 4], 1.0);
    let (y0, cache) = dtc.forward(store.values(), &x)?;
    let margin = kink_margin(&cache.offsets().p);
    let proj = uniform(&mut r, y0.shape(), 1.0);
    let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
        let (y, cache) = dtc.forward(p.values(), &x)?;
        if with_grad {
            let (v, mut g) = p.split_mut();
            dtc.backward(v, &mut g, &cache, &proj)?;
        }
        Ok(dot(&y, &proj))
    };
    let mut report = grad_check(&mut store, &mut f, cfg)?;
    report.passed &= margin >= MIN_MARGIN;
    let src = match source {
        ModSource::Readout => "",
        ModSource::Offsets => ",mod=offsets",
    };
    Ok(finish(&format!("dtc(d={dilation},s={stride}{src})"), report))
}

pub fn check_mbdtc(seed: u64, stride: usize, cfg: &CheckConfig) -> Result<LayerCheck> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let block = Mbdtc::register(&mut store, &mut r, "tc", 3, 6, 8, stride, ModSource::Readout)?;
    for d in &block.dtc {
        deform(&mut store, &mut r, d, 0.02);
    }
    let x = uniform(&mut r, &[2, 3, 6, 6], 1.0);
    let (y0, cache) = block.forward(store.values(), &x)?;
    let margin = cache
        .dtc_offsets()
        .iter()
        .map(|o| kink_margin(&o.p))
        .fold(f64::INFINITY, f64::min);
    let proj = uniform(&mut r, y0.shape(), 1.0);
    let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
        let (y, cache) = block.forward(p.values(), &x)?;
        if with_grad {
            let (v, mut g) = p.split_mut();
            block.backward(v, &mut g, &cache, &x, &proj)?;
        }
        Ok(dot(&y, &proj))
    };
    let mut report = grad_check(&mut store, &mut f, cfg)?;
    report.passed &= margin >= MIN_MARGIN;
    Ok(finish(&format!("mbdtc(s={stride})"), report))
}

/// Small end-to-end network: 5-joint chain, 8 frames, width 8, two
/// partitions, three blocks (the last strided), cross-entropy loss.
pub fn check_model(seed: u64, cfg: &CheckConfig) -> Result<LayerCheck> {
    let mut mc = ModelConfig::toy();
    mc.n_joints = 5;
    mc.t_frames = 8;
    mc.c_base = 8;
    mc.n_classes = 3;
    mc.blocks = ModelConfig::schedule(8);
    mc.blocks.truncate(4);
    let mut model = TsegcnModel::build(mc.clone(), SkeletonGraph::chain(5), seed)?;
    let mut r = rng(seed ^ 0x5eed);
    let dtcs: Vec<Dtc> = model
        .arch
        .blocks
        .iter()
        .flat_map(|b| b.tc.dtc.iter().cloned())
        .collect();
    for d in &dtcs {
        deform(&mut model.params, &mut r, d, 0.01);
    }
    let scales: Vec<_> = model
        .params
        .ids()
        .filter(|&id| model.params.name(id).ends_with("gc_norm.weight"))
        .collect();
    for id in scales {
        model.params.value_mut(id).fill(0.5);
    }
    let x = uniform(&mut r, &mc.input_shape(2), 1.0);
    let labels: Vec<usize> = (0..2).map(|i| i % mc.n_classes).collect();
    let (_, cache) = model.forward_train(&x)?;
    let margin = cache
        .blocks()
        .iter()
        .flat_map(|b| b.offsets())
        .map(|o| kink_margin(&o.p))
        .fold(f64::INFINITY, f64::min);
    let TsegcnModel { arch, params, buffers } = &mut model;
    let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
        let (logits, cache) = arch.run(p.values(), buffers, &x, true)?;
        let (loss, dl) = cross_entropy(&logits, &labels)?;
        if with_grad {
            let (v, mut g) = p.split_mut();
            arch.backward(v, &mut g, &cache, &dl)?;
        }
        Ok(loss)
    };
    let mut report = grad_check(params, &mut f, cfg)?;
    report.passed &= margin >= MIN_MARGIN;
    Ok(finish("model", report))
}

/// Every case with the given seed.
pub fn run_suite(seed: u64, cfg: &CheckConfig) -> Result<Vec<LayerCheck>> {
    let mut out = vec![
        check_linear(seed, cfg)?,
        check_norm(seed, cfg)?,
        check_tsegc(seed, cfg)?,
    ];
    for (d, s) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
        out.push(check_dtc(seed, d, s, ModSource::Readout, cfg)?);
    }
    out.push(check_dtc(seed, 1, 1, ModSource::Offsets, cfg)?);
    out.push(check_mbdtc(seed, 1, cfg)?);
    out.push(check_mbdtc(seed, 2, cfg)?);
    out.push(check_model(seed, cfg)?);
    Ok(out)
}
