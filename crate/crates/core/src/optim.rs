//! SGD with Nesterov momentum and L2 weight decay.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    /// `(epoch, factor)`: from `epoch` on, the rate is multiplied by `factor`.
    pub lr_drops: Vec<(usize, f64)>,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.05,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 0.004,
            epochs: 140,
            lr_drops: alloc::vec![(110, 0.1), (120, 0.1)],
            batch_size: 64,
        }
    }
}

impl OptimConfig {
    /// 60 epochs with drops at 40 and 50.
    pub fn toy() -> Self {
        OptimConfig {
            epochs: 60,
            lr_drops: alloc::vec![(40, 0.1), (50, 0.1)],
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("{} is not a finite non-negative rate", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.lr_drops.iter().any(|&(_, f)| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::config("lr_drops", "factors must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_drops
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.lr, |lr, &(_, f)| lr * f)
    }
}

/// Parameters left out of weight decay: the positional table and the
/// topology balance scalars.
pub fn decays(name: &str) -> bool {
    !(name.contains("pos_embed") || name.ends_with(".alpha") || name.ends_with(".beta"))
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// `g = grad + wd p; buf = mu buf + g; p -= lr (g + mu buf)` (Nesterov)
    /// or `p -= lr buf` otherwise.
    pub fn step(&mut self, params: &mut ParamStore, cfg: &OptimConfig, lr: f64) {
        if self.buffers.is_empty() {
            self.buffers = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
        }
        let ids: Vec<_> = params.ids().collect();
        for (id, buf) in ids.into_iter().zip(self.buffers.iter_mut()) {
            let wd = if decays(params.name(id)) { cfg.weight_decay } else { 0.0 };
            let grad = params.grad(id).data().to_vec();
            let p = params.value_mut(id).data_mut();
            for ((pv, &gv), bv) in p.iter_mut().zip(&grad).zip(buf.data_mut()) {
                let g = gv + wd * *pv;
                *bv = cfg.momentum * *bv + g;
                let update = if cfg.nesterov { g + cfg.momentum * *bv } else { *bv };
                *pv -= lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_store(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn plain_step_on_quadratic() {
        let mut p = scalar_store(1.0);
        let id = p.id("w").unwrap();
        p.grad_mut(id).data_mut()[0] = 1.0;
        let cfg = OptimConfig { momentum: 0.0, weight_decay: 0.0, ..OptimConfig::default() };
        Sgd::new().step(&mut p, &cfg, 0.1);
        assert!((p.value(id).data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut p = scalar_store(0.37);
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = Sgd::new();
        for _ in 0..3 {
            opt.step(&mut p, &cfg, 0.05);
        }
        assert_eq!(p.value(p.id("w").unwrap()).data(), &[0.37]);
    }

    #[test]
    fn schedule_drops() {
        let cfg = OptimConfig::toy();
        assert_eq!(cfg.lr_at(0), 0.05);
        assert!((cfg.lr_at(40) - 0.005).abs() < 1e-15);
        assert!((cfg.lr_at(59) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn decay_exclusions() {
        assert!(!decays("pos_embed"));
        assert!(!decays("blocks.0.gc.alpha"));
        assert!(!decays("blocks.0.gc.beta"));
        assert!(decays("blocks.0.gc_norm.bias"));
        assert!(decays("blocks.0.gc.m_shared"));
    }
}
