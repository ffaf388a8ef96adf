//! Training and evaluation loops.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsegcn_core::loss::{argmax_rows, cross_entropy};
use tsegcn_core::optim::{OptimConfig, Sgd};
use tsegcn_core::{Tensor, TsegcnModel};

use crate::checkpoint;
use crate::dataio::{to_batch_persons, SkeletonSequence};
use crate::error::{Error, Result};

/// Preprocessed samples: each one `[persons, N, T, 3]`, flattened.
#[derive(Debug, Clone)]
pub struct Samples {
    shape: [usize; 4],
    data: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl Samples {
    /// Resamples, centres and pads every sequence to the model's input
    /// contract.
    pub fn prepare(model: &TsegcnModel, seqs: &[SkeletonSequence]) -> Result<Self> {
        let cfg = model.cfg();
        let mut data = Vec::with_capacity(seqs.len());
        let mut labels = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            if s.joints != cfg.n_joints {
                return Err(Error::Dataset(format!(
                    "sample {i} has {} joints, the model expects {}",
                    s.joints, cfg.n_joints
                )));
            }
            let label = s
                .label
                .ok_or_else(|| Error::Dataset(format!("sample {i} has no label")))?;
            if label >= cfg.n_classes {
                return Err(tsegcn_core::Error::Label {
                    label,
                    n_classes: cfg.n_classes,
                }
                .into());
            }
            data.push(to_batch_persons(std::slice::from_ref(s), cfg.t_frames, cfg.persons)?.into_data());
            labels.push(label);
        }
        Ok(Samples {
            shape: cfg.input_shape(1),
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Stacks the listed samples into one model input.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(idx.len() * self.data[0].len());
        for &i in idx {
            data.extend_from_slice(&self.data[i]);
        }
        let mut shape = self.shape;
        shape[0] *= idx.len();
        let x = Tensor::new(shape.to_vec(), data).expect("consistent sample shapes");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy of the training-mode forward passes during the epoch.
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// The log with wall times cleared, for comparing runs.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            epochs: self
                .epochs
                .iter()
                .map(|e| EpochLog {
                    wall_time: 0.0,
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn best_eval(&self) -> Option<(usize, f64)> {
        self.epochs
            .iter()
            .filter_map(|e| e.eval_acc.map(|a| (e.epoch, a)))
            .fold(None, |best, (e, a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((e, a)),
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    /// Seeds the shuffling order.
    pub seed: u64,
    /// Evaluate every this many epochs and after the last one; 0 disables.
    pub eval_every: usize,
    /// Where to keep the best checkpoint (by eval accuracy, else by
    /// training loss).
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch JSON lines are appended here as training runs.
    pub log_path: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl TrainConfig {
    pub fn new(optim: OptimConfig, seed: u64) -> Self {
        TrainConfig {
            optim,
            seed,
            eval_every: 1,
            checkpoint: None,
            log_path: None,
            threads: None,
        }
    }
}

/// Mean loss and correct count of one optimization step.
pub fn train_step(
    model: &mut TsegcnModel,
    opt: &mut Sgd,
    optim: &OptimConfig,
    lr: f64,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, usize)> {
    let (logits, cache) = model.forward_train(x)?;
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    if !loss.is_finite() {
        return Err(tsegcn_core::Error::Evaluation {
            context: "training loss".into(),
        }
        .into());
    }
    let correct = argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    model.params.zero_grad();
    model.backward(&cache, &dlogits)?;
    model.update_running_stats(&cache)?;
    opt.step(&mut model.params, optim, lr);
    Ok((loss, correct))
}

/// Runs `cfg.optim.epochs` epochs over `train`, evaluating on `test`.
pub fn train(model: &mut TsegcnModel, train: &Samples, test: Option<&Samples>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.optim.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut log_file = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut opt = Sgd::new();
    let mut log = TrainLog::default();
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..cfg.optim.epochs {
        let start = Instant::now();
        let lr = cfg.optim.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.optim.batch_size) {
            let (x, labels) = train.batch(chunk);
            let (loss, c) = train_step(model, &mut opt, &cfg.optim, lr, &x, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += c;
        }
        let last = epoch + 1 == cfg.optim.epochs;
        let eval_acc = match test {
            Some(t) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) => {
                Some(evaluate(model, t, cfg.threads)?)
            }
            _ => None,
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            eval_acc,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let score = match test {
            Some(_) => eval_acc,
            None => Some(-entry.train_loss),
        };
        if let Some(s) = score.filter(|&s| s > best) {
            best = s;
            if let Some(path) = &cfg.checkpoint {
                checkpoint::save(path, model)?;
            }
        }
        if let (Some(f), Some(p)) = (&mut log_file, &cfg.log_path) {
            writeln!(f, "{}", serde_json::to_string(&entry)?)
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(p, e))?;
        }
        log.epochs.push(entry);
    }
    Ok(log)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Dataset(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

const EVAL_CHUNK: usize = 16;

/// Eval-mode predictions, computed in parallel over fixed-size chunks.
pub fn predict(model: &TsegcnModel, samples: &Samples, threads: Option<usize>) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let parts: Vec<Result<Vec<usize>>> = with_threads(threads, || {
        idx.par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let (x, _) = samples.batch(chunk);
                Ok(argmax_rows(&model.forward(&x)?))
            })
            .collect()
    })?;
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Top-1 accuracy with running normalization statistics.
pub fn evaluate(model: &TsegcnModel, samples: &Samples, threads: Option<usize>) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let pred = predict(model, samples, threads)?;
    let correct = pred.iter().zip(samples.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / samples.len() as f64)
}

/// Convenience wrapper: loads a manifest into samples for `model`.
pub fn load_samples(model: &TsegcnModel, manifest: &Path) -> Result<Samples> {
    let m = crate::dataio::DatasetManifest::read(manifest)?;
    if m.entries.is_empty() {
        return Err(Error::Dataset(format!("{} lists no samples", manifest.display())));
    }
    Samples::prepare(model, &m.load()?)
}
