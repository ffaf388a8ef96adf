//! Command-line interface. Exit codes: 0 success, 1 failure of the
//! requested operation, 2 invalid invocation.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use tsegcn_core::gradcheck::CheckConfig;
use tsegcn_core::optim::OptimConfig;
use tsegcn_core::suite::run_suite;
use tsegcn_core::{hop_table, ModelConfig, SkeletonGraph, Tensor, TsegcnModel};

use crate::dataio::{read_sequence, synth_dataset, to_batch_persons, write_sequence, DatasetManifest, ManifestEntry, SynthSpec};
use crate::trainer::{evaluate, load_samples, train, TrainConfig};
use crate::{checkpoint, ntu, preset, skeleton};

#[derive(Debug, Parser)]
#[command(name = "tsegcn", version, about = "Skeleton action recognition with symmetry-aware graph convolution")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for evaluation.
    #[arg(long, global = true, env = "TSEGCN_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Skeleton graph files.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Learned topologies of one graph layer.
    #[command(subcommand)]
    Topology(TopologyCmd),
    /// Frame-averaged temporal sampling offsets.
    #[command(subcommand)]
    Offsets(OffsetsCmd),
    /// Model structure.
    #[command(subcommand)]
    Model(ModelCmd),
    /// Parameter and multiply-accumulate counts.
    Audit(AuditArgs),
    /// Finite-difference check of every layer's backward pass.
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic four-class dataset.
    Gen(GenArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Convert foreign skeleton formats.
    #[command(subcommand)]
    Convert(ConvertCmd),
}

#[derive(Debug, Subcommand)]
pub enum GraphCmd {
    /// Joint count, edges, diameter and hop histogram.
    Inspect {
        /// Graph file or bundled name (`kinect_v2`, `toy9`).
        graph: String,
    },
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// Load weights and configuration from a checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Preset (`default`, `toy`) or JSON model configuration file.
    #[arg(long, default_value = "toy")]
    pub config: String,
    /// Graph file or bundled name; defaults to the preset's skeleton.
    #[arg(long)]
    pub graph: Option<String>,
    /// Initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Disable normalization layers.
    #[arg(long)]
    pub no_norm: bool,
}

#[derive(Debug, Subcommand)]
pub enum TopologyCmd {
    /// Write scale masks, reactivated, calibration and assembled topologies as JSON.
    Dump {
        #[arg(long)]
        layer: usize,
        /// Skeleton sequence file.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        model: ModelSource,
    },
}

#[derive(Debug, Subcommand)]
pub enum OffsetsCmd {
    /// Write per-layer mean sampling positions as CSV.
    Dump {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        model: ModelSource,
    },
}

#[derive(Debug, Subcommand)]
pub enum ModelCmd {
    /// Per-layer output shapes, parameters and multiply-accumulates.
    Summary {
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[command(flatten)]
        model: ModelSource,
    },
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long)]
    pub graph: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 0.02)]
    pub jitter: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (JSON lines).
    #[arg(long)]
    pub train: PathBuf,
    /// Evaluation manifest.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Evaluate every N epochs (0: never).
    #[arg(long, default_value_t = 1)]
    pub eval_every: usize,
    /// Best checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch JSON lines log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest to evaluate.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ConvertCmd {
    /// Kinect v2 `.skeleton` files to sequence files plus a manifest.
    Ntu {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        persons: usize,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match dispatch(&cli) {
        Ok(text) => {
            let _ = write!(out, "{text}");
            0
        }
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            let _ = writeln!(err, "error: {msg}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<String> {
    let json = cli.json;
    match &cli.command {
        Command::Graph(GraphCmd::Inspect { graph }) => graph_inspect(graph, json),
        Command::Topology(TopologyCmd::Dump { layer, input, model }) => topology_dump(*layer, input, model),
        Command::Offsets(OffsetsCmd::Dump { input, model }) => offsets_dump(input, model, json),
        Command::Model(ModelCmd::Summary { batch, model }) => model_summary(*batch, model, json),
        Command::Audit(a) => audit(a, json),
        Command::Gradcheck(a) => gradcheck(a, json),
        Command::Gen(a) => gen(a, json),
        Command::Train(a) => train_cmd(a, cli.threads, json),
        Command::Eval(a) => eval_cmd(a, cli.threads, json),
        Command::Convert(ConvertCmd::Ntu { inputs, out, persons }) => convert_ntu(inputs, out, *persons, json),
    }
}

fn to_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Nested arrays following the tensor's shape.
pub fn tensor_json(t: &Tensor) -> Value {
    fn nest(shape: &[usize], data: &[f64]) -> Value {
        match shape {
            [] => json!(data[0]),
            [_] => json!(data),
            [n, rest @ ..] => {
                let step = data.len() / n;
                Value::Array(data.chunks(step.max(1)).map(|c| nest(rest, c)).collect())
            }
        }
    }
    nest(t.shape(), t.data())
}

fn resolve_config(name: &str) -> anyhow::Result<(ModelConfig, Option<SkeletonGraph>, OptimConfig)> {
    if let Some((cfg, g, opt)) = preset(name) {
        return Ok((cfg, Some(g), opt));
    }
    let path = Path::new(name);
    let text = std::fs::read_to_string(path).with_context(|| format!("{}: not a preset or readable config file", name))?;
    let cfg: ModelConfig = serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
    Ok((cfg, None, OptimConfig::default()))
}

fn build_model(src: &ModelSource) -> anyhow::Result<(TsegcnModel, OptimConfig)> {
    if let Some(ck) = &src.checkpoint {
        return Ok((checkpoint::load(ck)?, OptimConfig::default()));
    }
    let (mut cfg, graph, opt) = resolve_config(&src.config)?;
    if src.no_norm {
        cfg.use_norm = false;
    }
    let graph = match (&src.graph, graph) {
        (Some(g), _) => skeleton::resolve(g)?,
        (None, Some(g)) => g,
        (None, None) => bail!("--graph is required with a configuration file"),
    };
    Ok((TsegcnModel::build(cfg, graph, src.seed)?, opt))
}

fn model_input(model: &TsegcnModel, input: &Path) -> anyhow::Result<Tensor> {
    let seq = read_sequence(input)?;
    let cfg = model.cfg();
    if seq.joints != cfg.n_joints {
        bail!(
            "{}: {} joints, the model expects {}",
            input.display(),
            seq.joints,
            cfg.n_joints
        );
    }
    Ok(to_batch_persons(&[seq], cfg.t_frames, cfg.persons)?)
}

fn graph_inspect(spec: &str, json: bool) -> anyhow::Result<String> {
    let g = skeleton::resolve(spec)?;
    let hop = hop_table(&g, g.n())?;
    let report = json!({
        "n": g.n(),
        "edges": g.edges().len(),
        "diameter": hop.diameter(),
        "hop_histogram": hop.histogram(),
        "names": g.names(),
    });
    if json {
        return to_json(&report);
    }
    Ok(format!(
        "joints {}\nedges {}\ndiameter {}\nhop histogram {:?}\n",
        g.n(),
        g.edges().len(),
        hop.diameter(),
        hop.histogram()
    ))
}

fn topology_dump(layer: usize, input: &Path, src: &ModelSource) -> anyhow::Result<String> {
    let (model, _) = build_model(src)?;
    let x = model_input(&model, input)?;
    let topo = model.topology(&x, layer)?;
    let bodies: Vec<Value> = topo
        .iter()
        .map(|(mask, t)| {
            json!({
                "h": tensor_json(&mask.h),
                "a_react": tensor_json(&t.a_react),
                "b_cal": tensor_json(&t.b_cal),
                "z": tensor_json(&t.z),
            })
        })
        .collect();
    to_json(&json!({ "layer": layer, "bodies": bodies }))
}

#[derive(Debug, Serialize)]
struct OffsetRow {
    layer: usize,
    branch: usize,
    dilation: usize,
    tap: usize,
    base: f64,
    mean_offset: f64,
    mean_position: f64,
}

fn offsets_dump(input: &Path, src: &ModelSource, json: bool) -> anyhow::Result<String> {
    let (model, _) = build_model(src)?;
    let x = model_input(&model, input)?;
    let (_, cache) = model.forward_traced(&x)?;
    let mut rows = Vec::new();
    for (layer, bc) in cache.blocks().iter().enumerate() {
        for (branch, field) in bc.offsets().iter().enumerate() {
            let dilation = model.arch.blocks[layer].tc.dtc[branch].cfg.dilation;
            let taps = field.p.last_dim();
            let frames = field.p.len() / taps;
            for tap in 0..taps {
                let mean = field.p.data().iter().skip(tap).step_by(taps).sum::<f64>() / frames as f64;
                let base = (tap as f64 - (taps - 1) as f64 / 2.0) * dilation as f64;
                rows.push(OffsetRow {
                    layer,
                    branch,
                    dilation,
                    tap,
                    base,
                    mean_offset: mean,
                    mean_position: base + mean,
                });
            }
        }
    }
    if json {
        return to_json(&rows);
    }
    let mut s = String::from("layer,branch,dilation,tap,base,mean_offset,mean_position\n");
    for r in &rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.layer, r.branch, r.dilation, r.tap, r.base, r.mean_offset, r.mean_position
        );
    }
    Ok(s)
}

fn model_summary(batch: usize, src: &ModelSource, json: bool) -> anyhow::Result<String> {
    let (model, _) = build_model(src)?;
    let rows = model.summary(batch);
    let params = model.count_params();
    let flops = model.count_flops(batch);
    if json {
        return to_json(&json!({ "layers": rows, "params": params, "flops": flops, "batch": batch }));
    }
    let mut s = format!("{:<20} {:<20} {:>10} {:>15}\n", "layer", "output", "params", "flops");
    for r in &rows {
        let _ = writeln!(
            s,
            "{:<20} {:<20} {:>10} {:>15}",
            r.name,
            format!("{:?}", r.output_shape),
            r.params,
            r.flops
        );
    }
    let _ = writeln!(s, "{:<20} {:<20} {params:>10} {flops:>15}", "total", "");
    Ok(s)
}

/// Reference sizes of the full-scale configuration.
pub const PARAMS_REFERENCE: f64 = 1.10e6;
pub const FLOPS_REFERENCE: f64 = 1.38e9;

fn audit(a: &AuditArgs, json: bool) -> anyhow::Result<String> {
    let (model, _) = build_model(&ModelSource {
        checkpoint: None,
        config: a.config.clone(),
        graph: a.graph.clone(),
        seed: 0,
        no_norm: false,
    })?;
    let params = model.count_params();
    let flops = model.count_flops(1);
    let pdev = params as f64 / PARAMS_REFERENCE - 1.0;
    let fdev = flops as f64 / FLOPS_REFERENCE - 1.0;
    let report = json!({
        "config": a.config,
        "params": params,
        "flops": flops,
        "params_reference": PARAMS_REFERENCE,
        "flops_reference": FLOPS_REFERENCE,
        "params_deviation": pdev,
        "flops_deviation": fdev,
    });
    if json {
        return to_json(&report);
    }
    Ok(format!(
        "params {params} ({:+.1}% vs {PARAMS_REFERENCE:e})\nflops  {flops} ({:+.1}% vs {FLOPS_REFERENCE:e}, batch 1)\n",
        100.0 * pdev,
        100.0 * fdev
    ))
}

fn gradcheck(a: &GradcheckArgs, json: bool) -> anyhow::Result<String> {
    let cfg = CheckConfig {
        eps: a.eps,
        tol: a.tol,
        seed: a.seed,
        ..CheckConfig::default()
    };
    let checks = run_suite(a.seed, &cfg)?;
    let rows: Vec<Value> = checks
        .iter()
        .map(|c| {
            json!({
                "layer": c.layer,
                "max_rel_error": c.report.max_rel_error,
                "checked": c.report.checked,
                "masked_zero": c.masked_zero,
                "passed": c.passed(),
            })
        })
        .collect();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.layer.as_str()).collect();
    let text = if json {
        to_json(&json!({ "seed": a.seed, "tol": a.tol, "eps": a.eps, "layers": rows, "passed": failed.is_empty() }))?
    } else {
        let mut s = String::new();
        for c in &checks {
            let _ = writeln!(
                s,
                "{:<28} {:.3e} {}",
                c.layer,
                c.report.max_rel_error,
                if c.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    };
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(text)
}

fn gen(a: &GenArgs, json: bool) -> anyhow::Result<String> {
    let spec = SynthSpec {
        classes: a.classes,
        samples_per_class: a.samples_per_class,
        seed: a.seed,
        jitter: a.jitter,
        ..SynthSpec::default()
    };
    let (tr, te) = synth_dataset(&a.out, &spec, a.test_per_class)?;
    let train_path = a.out.join("train.jsonl");
    let test_path = a.out.join("test.jsonl");
    if json {
        return to_json(&json!({
            "train": train_path,
            "test": test_path,
            "train_samples": tr.entries.len(),
            "test_samples": te.entries.len(),
            "classes": a.classes,
        }));
    }
    Ok(format!(
        "{} training samples in {}\n{} test samples in {}\n",
        tr.entries.len(),
        train_path.display(),
        te.entries.len(),
        test_path.display()
    ))
}

fn train_cmd(a: &TrainArgs, threads: Option<usize>, json: bool) -> anyhow::Result<String> {
    let (mut model, mut optim) = build_model(&a.model)?;
    if let Some(e) = a.epochs {
        optim.epochs = e;
    }
    if let Some(lr) = a.lr {
        optim.lr = lr;
    }
    if let Some(b) = a.batch_size {
        optim.batch_size = b;
    }
    let train_set = load_samples(&model, &a.train)?;
    let test_set = a.test.as_deref().map(|p| load_samples(&model, p)).transpose()?;
    let cfg = TrainConfig {
        eval_every: a.eval_every,
        checkpoint: a.out.clone(),
        log_path: a.log.clone(),
        threads,
        ..TrainConfig::new(optim, a.model.seed)
    };
    let log = train(&mut model, &train_set, test_set.as_ref(), &cfg)?;
    if let Some(out) = &a.out {
        if !out.exists() {
            checkpoint::save(out, &model)?;
        }
    }
    let train_acc = evaluate(&model, &train_set, threads)?;
    let last = log.without_timing().epochs.last().cloned();
    let best = log.best_eval();
    if json {
        return to_json(&json!({
            "epochs": log.epochs.len(),
            "last": last,
            "final_train_acc": train_acc,
            "best_eval": best.map(|(e, acc)| json!({ "epoch": e, "acc": acc })),
        }));
    }
    let mut s = String::new();
    for e in &log.epochs {
        let _ = writeln!(
            s,
            "epoch {:>3} lr {:.4} loss {:.4} train {:.3}{}",
            e.epoch,
            e.lr,
            e.train_loss,
            e.train_acc,
            e.eval_acc.map_or_else(String::new, |v| format!(" eval {v:.3}"))
        );
    }
    let _ = writeln!(s, "final train accuracy {train_acc:.3}");
    Ok(s)
}

fn eval_cmd(a: &EvalArgs, threads: Option<usize>, json: bool) -> anyhow::Result<String> {
    let model = checkpoint::load(&a.checkpoint)?;
    let samples = load_samples(&model, &a.data)?;
    let acc = evaluate(&model, &samples, threads)?;
    if json {
        return to_json(&json!({ "accuracy": acc, "samples": samples.len() }));
    }
    Ok(format!("accuracy {acc:.4} on {} samples\n", samples.len()))
}

fn convert_ntu(inputs: &[PathBuf], out: &Path, persons: usize, json: bool) -> anyhow::Result<String> {
    if inputs.is_empty() {
        return Err(anyhow!("no input files"));
    }
    std::fs::create_dir_all(out).with_context(|| format!("{}", out.display()))?;
    let mut entries = Vec::new();
    let mut written = Vec::new();
    for input in inputs {
        let seq = ntu::read_ntu(input, persons)?;
        let stem = input
            .file_stem()
            .ok_or_else(|| anyhow!("{}: no file name", input.display()))?;
        let rel = PathBuf::from(stem).with_extension("skel");
        write_sequence(out.join(&rel), &seq)?;
        if let Some(label) = seq.label {
            entries.push(ManifestEntry { path: rel.clone(), label });
        }
        written.push(rel);
    }
    let n_classes = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let manifest = DatasetManifest {
        entries,
        n_classes,
        split: "converted".into(),
        root: out.to_path_buf(),
    };
    manifest.validate()?;
    manifest.write(out.join("converted.jsonl"))?;
    if json {
        return to_json(&json!({ "files": written, "labelled": manifest.entries.len() }));
    }
    Ok(format!("converted {} files into {}\n", written.len(), out.display()))
}
