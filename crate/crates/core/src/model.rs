//! The full network: joint embedding with a positional table, nine
//! graph/temporal blocks with residual shortcuts, global pooling and a linear
//! classifier.
//!
//! Inputs are `[B * M, N, T, 3]` with the `M` bodies of a sample stored
//! consecutively; logits are `[B, classes]`. Pooling averages over bodies,
//! joints and frames.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dtc::{MbdtcCache, ModSource, Mbdtc, OffsetField};
use crate::error::{Error, Result};
use crate::graph::{hop_table, normalize_adjacency, HopTable, SkeletonGraph};
use crate::init::{rng, uniform};
use crate::layers::{out_frames, subsample_frames, subsample_frames_backward, Dims, Linear, Norm, NormCache};
use crate::params::{BufferStore, Grads, ParamId, ParamStore, Values};
use crate::tensor::Tensor;
use crate::tsegc::{ScaleMask, TopologyBundle, TsegcCache, TsegcLayer, TsegcShape};

/// Channels in/out and temporal stride of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub n_joints: usize,
    pub t_frames: usize,
    pub c_in: usize,
    pub c_base: usize,
    pub k_partitions: usize,
    pub r_red: usize,
    pub n_classes: usize,
    /// Bodies per sample.
    pub persons: usize,
    /// Independent feature pathways per graph layer.
    pub subsets: usize,
    pub use_norm: bool,
    pub mod_source: ModSource,
    pub blocks: Vec<BlockSpec>,
}

impl Default for ModelConfig {
    /// 25 joints, 64 frames, two bodies, 120 classes.
    fn default() -> Self {
        ModelConfig {
            n_joints: 25,
            t_frames: 64,
            c_in: 3,
            c_base: 64,
            k_partitions: 3,
            r_red: 8,
            n_classes: 120,
            persons: 2,
            subsets: 1,
            use_norm: true,
            mod_source: ModSource::Readout,
            blocks: Self::schedule(64),
        }
    }
}

impl ModelConfig {
    /// `C C C | 2C 2C 2C | 4C 4C 4C` with stride 2 entering blocks 4 and 7.
    pub fn schedule(c: usize) -> Vec<BlockSpec> {
        let widths = [c, c, c, 2 * c, 2 * c, 2 * c, 4 * c, 4 * c, 4 * c];
        let mut prev = c;
        widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let spec = BlockSpec {
                    c_in: prev,
                    c_out: w,
                    stride: if i == 3 || i == 6 { 2 } else { 1 },
                };
                prev = w;
                spec
            })
            .collect()
    }

    /// Nine joints, 16 frames, one body, 4 classes.
    pub fn toy() -> Self {
        ModelConfig {
            n_joints: 9,
            t_frames: 16,
            c_base: 16,
            k_partitions: 2,
            n_classes: 4,
            persons: 1,
            blocks: Self::schedule(16),
            ..Self::default()
        }
    }

    /// Same schedule with a different base width.
    pub fn with_base(mut self, c: usize) -> Self {
        self.c_base = c;
        self.blocks = Self::schedule(c);
        self
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch * self.persons, self.n_joints, self.t_frames, self.c_in]
    }

    /// Frame count after every block.
    pub fn temporal_schedule(&self) -> Vec<usize> {
        let mut t = self.t_frames;
        self.blocks
            .iter()
            .map(|b| {
                t = out_frames(t, b.stride);
                t
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_joints", self.n_joints),
            ("t_frames", self.t_frames),
            ("c_in", self.c_in),
            ("c_base", self.c_base),
            ("k_partitions", self.k_partitions),
            ("r_red", self.r_red),
            ("n_classes", self.n_classes),
            ("persons", self.persons),
            ("subsets", self.subsets),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.blocks.is_empty() {
            return Err(Error::config("blocks", "schedule is empty"));
        }
        let mut prev = self.c_base;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.c_in != prev {
                return Err(Error::config(
                    "blocks",
                    format!("block {} takes {} channels but receives {prev}", i + 1, b.c_in),
                ));
            }
            if b.c_out == 0 || b.c_out % 4 != 0 {
                return Err(Error::config(
                    "blocks",
                    format!("block {} width {} is not a positive multiple of 4", i + 1, b.c_out),
                ));
            }
            if b.stride == 0 {
                return Err(Error::config("blocks", format!("block {} has stride 0", i + 1)));
            }
            prev = b.c_out;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub gc: TsegcLayer,
    pub norm_gc: Option<Norm>,
    pub res_gc: Option<Linear>,
    pub tc: Mbdtc,
    pub norm_tc: Option<Norm>,
    pub res_tc: Option<Linear>,
    pub spec: BlockSpec,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    input: Tensor,
    gc: TsegcCache,
    norm_gc: Option<NormCache>,
    h1: Tensor,
    tc: MbdtcCache,
    norm_tc: Option<NormCache>,
    h1_sub: Option<Tensor>,
}

impl BlockCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn topology(&self) -> &Tensor {
        self.gc.z()
    }

    pub fn masks(&self) -> &Tensor {
        self.gc.masks()
    }

    pub fn offsets(&self) -> [&OffsetField; 2] {
        self.tc.dtc_offsets()
    }
}

fn norm_forward(norm: &Option<Norm>, v: Values, bufs: &BufferStore, x: Tensor, train: bool) -> Result<(Tensor, Option<NormCache>)> {
    match norm {
        None => Ok((x, None)),
        Some(n) if train => {
            let (y, c) = n.forward_train(v, &x)?;
            Ok((y, Some(c)))
        }
        Some(n) => Ok((n.forward_eval(v, bufs, &x)?, None)),
    }
}

impl Block {
    fn forward(&self, v: Values, bufs: &BufferStore, hop: &HopTable, x: &Tensor, train: bool) -> Result<(Tensor, BlockCache)> {
        let (g, gc_cache) = self.gc.forward(v, x, hop)?;
        let (mut h1, norm_gc) = norm_forward(&self.norm_gc, v, bufs, g, train)?;
        match &self.res_gc {
            Some(l) => h1.add_assign(&l.forward(v, x)?),
            None => h1.add_assign(x),
        }
        let (t, tc_cache) = self.tc.forward(v, &h1)?;
        let (mut h2, norm_tc) = norm_forward(&self.norm_tc, v, bufs, t, train)?;
        let h1_sub = match &self.res_tc {
            Some(l) => {
                let s = subsample_frames(&h1, self.spec.stride)?;
                h2.add_assign(&l.forward(v, &s)?);
                Some(s)
            }
            None => {
                h2.add_assign(&h1);
                None
            }
        };
        Ok((
            h2,
            BlockCache {
                input: x.clone(),
                gc: gc_cache,
                norm_gc,
                h1,
                tc: tc_cache,
                norm_tc,
                h1_sub,
            },
        ))
    }

    fn backward(&self, v: Values, g: &mut Grads, cache: &BlockCache, dh2: &Tensor) -> Result<Tensor> {
        let dt = match (&self.norm_tc, &cache.norm_tc) {
            (Some(n), Some(c)) => n.backward(v, g, c, dh2),
            (None, _) => dh2.clone(),
            (Some(_), None) => return Err(Error::config("mode", "backward needs a training-mode forward")),
        };
        let mut dh1 = self.tc.backward(v, g, &cache.tc, &cache.h1, &dt)?;
        match (&self.res_tc, &cache.h1_sub) {
            (Some(l), Some(s)) => {
                let ds = l.backward(v, g, s, dh2, true).expect("requested dx");
                dh1.add_assign(&subsample_frames_backward(&ds, cache.h1.shape()[2], self.spec.stride)?);
            }
            _ => dh1.add_assign(dh2),
        }
        let dg = match (&self.norm_gc, &cache.norm_gc) {
            (Some(n), Some(c)) => n.backward(v, g, c, &dh1),
            (None, _) => dh1.clone(),
            (Some(_), None) => return Err(Error::config("mode", "backward needs a training-mode forward")),
        };
        let mut dx = self.gc.backward(v, g, &cache.gc, &dg)?;
        match &self.res_gc {
            Some(l) => dx.add_assign(&l.backward(v, g, &cache.input, &dh1, true).expect("requested dx")),
            None => dx.add_assign(&dh1),
        }
        Ok(dx)
    }

    fn update_running(&self, bufs: &mut BufferStore, cache: &BlockCache) -> Result<()> {
        if let (Some(n), Some(c)) = (&self.norm_gc, &cache.norm_gc) {
            n.update_running(bufs, c)?;
        }
        if let (Some(n), Some(c)) = (&self.norm_tc, &cache.norm_tc) {
            n.update_running(bufs, c)?;
        }
        Ok(())
    }
}

/// Layer structure and parameter handles, independent of parameter values.
#[derive(Debug, Clone)]
pub struct Architecture {
    pub cfg: ModelConfig,
    pub graph: SkeletonGraph,
    pub hop: HopTable,
    pub embed: Linear,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub classifier: Linear,
}

/// Values recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    train: bool,
    x: Tensor,
    blocks: Vec<BlockCache>,
    last: Tensor,
    pooled: Tensor,
}

impl ForwardCache {
    pub fn blocks(&self) -> &[BlockCache] {
        &self.blocks
    }

    /// `[B, N, T, C]` shape leaving every block.
    pub fn block_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> = self.blocks.iter().skip(1).map(|b| b.input.shape().to_vec()).collect();
        shapes.push(self.last.shape().to_vec());
        shapes
    }
}

/// Per-layer accounting row.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LayerSummary {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct TsegcnModel {
    pub arch: Architecture,
    pub params: ParamStore,
    pub buffers: BufferStore,
}

impl Architecture {
    fn check_input(&self, x: &Tensor) -> Result<Dims> {
        let cfg = &self.cfg;
        let d = Dims::of(x)?;
        if d.n != cfg.n_joints || d.t != cfg.t_frames || d.c != cfg.c_in || d.b == 0 || d.b % cfg.persons != 0 {
            return Err(Error::dim(
                "model input",
                x.shape(),
                &[cfg.persons.max(1) * d.b.div_ceil(cfg.persons.max(1)).max(1), cfg.n_joints, cfg.t_frames, cfg.c_in],
            ));
        }
        Ok(d)
    }

    pub fn run(&self, v: Values, bufs: &BufferStore, x: &Tensor, train: bool) -> Result<(Tensor, ForwardCache)> {
        let d = self.check_input(x)?;
        let mut h = self.embed.forward(v, x)?;
        let pe = v.get(self.pos_embed).data();
        let c = self.cfg.c_base;
        for bn in 0..d.b * d.n {
            let n = bn % d.n;
            for t in 0..d.t {
                let row = &mut h.data_mut()[(bn * d.t + t) * c..(bn * d.t + t + 1) * c];
                for (a, p) in row.iter_mut().zip(&pe[n * c..(n + 1) * c]) {
                    *a += p;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(v, bufs, &self.hop, &h, train)?;
            caches.push(cache);
            h = next;
        }
        let hd = Dims::of(&h)?;
        let samples = hd.b / self.cfg.persons;
        let per_sample = self.cfg.persons * hd.n * hd.t;
        let mut pooled = Tensor::zeros(&[samples, hd.c]);
        for s in 0..samples {
            let dst = &mut pooled.data_mut()[s * hd.c..(s + 1) * hd.c];
            for row in h.data()[s * per_sample * hd.c..(s + 1) * per_sample * hd.c].chunks_exact(hd.c) {
                for (a, v) in dst.iter_mut().zip(row) {
                    *a += v;
                }
            }
            dst.iter_mut().for_each(|a| *a /= per_sample as f64);
        }
        let logits = self.classifier.forward(v, &pooled)?;
        Ok((
            logits,
            ForwardCache {
                train,
                x: x.clone(),
                blocks: caches,
                last: h,
                pooled,
            },
        ))
    }

    pub fn backward(&self, v: Values, g: &mut Grads, cache: &ForwardCache, dlogits: &Tensor) -> Result<()> {
        if !cache.train {
            return Err(Error::config("mode", "backward needs a training-mode forward"));
        }
        if dlogits.shape() != [cache.pooled.shape()[0], self.cfg.n_classes] {
            return Err(Error::dim("model backward", dlogits.shape(), &[cache.pooled.shape()[0], self.cfg.n_classes]));
        }
        let dpooled = self
            .classifier
            .backward(v, g, &cache.pooled, dlogits, true)
            .expect("requested dx");
        let hd = Dims::of(&cache.last)?;
        let per_sample = self.cfg.persons * hd.n * hd.t;
        let mut dh = Tensor::zeros(cache.last.shape());
        for (i, row) in dh.data_mut().chunks_exact_mut(hd.c).enumerate() {
            let s = i / per_sample;
            for (a, gv) in row.iter_mut().zip(&dpooled.data()[s * hd.c..(s + 1) * hd.c]) {
                *a = gv / per_sample as f64;
            }
        }
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(v, g, bc, &dh)?;
        }
        let d = Dims::of(&cache.x)?;
        let c = self.cfg.c_base;
        let gp = g.get_mut(self.pos_embed);
        for bn in 0..d.b * d.n {
            let n = bn % d.n;
            for t in 0..d.t {
                let row = &dh.data()[(bn * d.t + t) * c..(bn * d.t + t + 1) * c];
                for (a, gv) in gp[n * c..(n + 1) * c].iter_mut().zip(row) {
                    *a += gv;
                }
            }
        }
        self.embed.backward(v, g, &cache.x, &dh, false);
        Ok(())
    }

    /// Per-layer parameters and multiply-accumulates for `batch` samples.
    pub fn summary(&self, batch: usize) -> Vec<LayerSummary> {
        let cfg = &self.cfg;
        let bodies = batch * cfg.persons;
        let n = cfg.n_joints;
        let mut rows = Vec::new();
        let mut t = cfg.t_frames;
        rows.push(LayerSummary {
            name: String::from("embed"),
            output_shape: vec![bodies, n, t, cfg.c_base],
            params: self.embed.num_params() + n * cfg.c_base,
            flops: self.embed.flops(bodies * n * t),
        });
        for (i, b) in self.blocks.iter().enumerate() {
            let norm_params = |nm: &Option<Norm>| nm.as_ref().map_or(0, Norm::num_params);
            let res = |l: &Option<Linear>| l.as_ref().map_or(0, Linear::num_params);
            let to = out_frames(t, b.spec.stride);
            rows.push(LayerSummary {
                name: format!("block{}.gc", i + 1),
                output_shape: vec![bodies, n, t, b.spec.c_out],
                params: b.gc.num_params() + norm_params(&b.norm_gc) + res(&b.res_gc),
                flops: b.gc.flops(bodies, t) + b.res_gc.as_ref().map_or(0, |l| l.flops(bodies * n * t)),
            });
            rows.push(LayerSummary {
                name: format!("block{}.tc", i + 1),
                output_shape: vec![bodies, n, to, b.spec.c_out],
                params: b.tc.num_params() + norm_params(&b.norm_tc) + res(&b.res_tc),
                flops: b.tc.flops(bodies, n, t) + b.res_tc.as_ref().map_or(0, |l| l.flops(bodies * n * to)),
            });
            t = to;
        }
        rows.push(LayerSummary {
            name: String::from("classifier"),
            output_shape: vec![batch, cfg.n_classes],
            params: self.classifier.num_params(),
            flops: self.classifier.flops(batch),
        });
        rows
    }
}

/// Initial scale of the normalization after each graph layer, so that every
/// block starts close to its residual path.
pub const GC_NORM_SCALE: f64 = 1e-6;

impl TsegcnModel {
    /// Deterministic construction from `seed`.
    pub fn build(cfg: ModelConfig, graph: SkeletonGraph, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if graph.n() != cfg.n_joints {
            return Err(Error::config(
                "n_joints",
                format!("graph has {} joints, config expects {}", graph.n(), cfg.n_joints),
            ));
        }
        let hop = hop_table(&graph, graph.n())?;
        let a_hat = normalize_adjacency(&graph).a_hat;
        let mut params = ParamStore::new();
        let mut buffers = BufferStore::default();
        let mut r = rng(seed);
        let embed = Linear::register(&mut params, &mut r, "embed", cfg.c_in, cfg.c_base, true);
        let pos_embed = params.insert("pos_embed", uniform(&mut r, &[cfg.n_joints, cfg.c_base], 0.02));
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        for (i, spec) in cfg.blocks.iter().enumerate() {
            let name = format!("blocks.{i}");
            let gc = TsegcLayer::register(
                &mut params,
                &mut r,
                &format!("{name}.gc"),
                TsegcShape {
                    n: cfg.n_joints,
                    c_in: spec.c_in,
                    c_out: spec.c_out,
                    k: cfg.k_partitions,
                    r_red: cfg.r_red,
                    subsets: cfg.subsets,
                },
                &a_hat,
            )?;
            let norm_gc = cfg.use_norm.then(|| {
                let norm = Norm::register(&mut params, &mut buffers, &format!("{name}.gc_norm"), spec.c_out);
                params.value_mut(norm.gamma).fill(GC_NORM_SCALE);
                norm
            });
            let res_gc = (spec.c_in != spec.c_out)
                .then(|| Linear::register(&mut params, &mut r, &format!("{name}.gc_res"), spec.c_in, spec.c_out, true));
            let tc = Mbdtc::register(
                &mut params,
                &mut r,
                &format!("{name}.tc"),
                cfg.n_joints,
                spec.c_out,
                spec.c_out,
                spec.stride,
                cfg.mod_source,
            )?;
            let norm_tc = cfg
                .use_norm
                .then(|| Norm::register(&mut params, &mut buffers, &format!("{name}.tc_norm"), spec.c_out));
            let res_tc = (spec.stride != 1)
                .then(|| Linear::register(&mut params, &mut r, &format!("{name}.tc_res"), spec.c_out, spec.c_out, true));
            blocks.push(Block {
                gc,
                norm_gc,
                res_gc,
                tc,
                norm_tc,
                res_tc,
                spec: *spec,
            });
        }
        let c_final = cfg.blocks.last().expect("validated").c_out;
        let classifier = Linear::register(&mut params, &mut r, "classifier", c_final, cfg.n_classes, true);
        Ok(TsegcnModel {
            arch: Architecture {
                cfg,
                graph,
                hop,
                embed,
                pos_embed,
                blocks,
                classifier,
            },
            params,
            buffers,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.arch.cfg
    }

    /// Inference with running normalization statistics.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.arch.run(self.params.values(), &self.buffers, x, false)?.0)
    }

    /// Inference that also returns intermediate values.
    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.arch.run(self.params.values(), &self.buffers, x, false)
    }

    /// Training-mode forward using batch statistics.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.arch.run(self.params.values(), &self.buffers, x, true)
    }

    /// Accumulates parameter gradients of `sum(dlogits * logits)`.
    pub fn backward(&mut self, cache: &ForwardCache, dlogits: &Tensor) -> Result<()> {
        let (v, mut g) = self.params.split_mut();
        self.arch.backward(v, &mut g, cache, dlogits)
    }

    pub fn update_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        for (block, bc) in self.arch.blocks.iter().zip(&cache.blocks) {
            block.update_running(&mut self.buffers, bc)?;
        }
        Ok(())
    }

    /// Scale masks and assembled topology of graph layer `layer` for every
    /// sample of `x` (eval mode).
    pub fn topology(&self, x: &Tensor, layer: usize) -> Result<Vec<(ScaleMask, TopologyBundle)>> {
        let block = self
            .arch
            .blocks
            .get(layer)
            .ok_or_else(|| Error::config("layer", format!("model has {} blocks", self.arch.blocks.len())))?;
        let (_, cache) = self.forward_traced(x)?;
        block.gc.topology(self.params.values(), cache.blocks[layer].input(), &self.arch.hop)
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Multiply-accumulates of one forward pass over `batch` samples
    /// (`batch * persons` bodies).
    pub fn count_flops(&self, batch: usize) -> u64 {
        self.arch.summary(batch).iter().map(|r| r.flops).sum()
    }

    pub fn summary(&self, batch: usize) -> Vec<LayerSummary> {
        self.arch.summary(batch)
    }
}
