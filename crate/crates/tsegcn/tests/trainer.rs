use tsegcn::core::optim::OptimConfig;
use tsegcn::core::{ModelConfig, TsegcnModel};
use tsegcn::dataio::{synth_sequences, SkeletonSequence, SynthSpec};
use tsegcn::skeleton::toy9;
use tsegcn::trainer::{evaluate, predict, train, Samples, TrainConfig};

fn toy(seed: u64) -> TsegcnModel {
    TsegcnModel::build(ModelConfig::toy(), toy9(), seed).unwrap()
}

fn data(per_class: usize, seed: u64) -> Vec<SkeletonSequence> {
    synth_sequences(
        &SynthSpec {
            samples_per_class: per_class,
            seed,
            ..SynthSpec::default()
        },
        0,
    )
    .unwrap()
}

fn short(epochs: usize, batch: usize) -> OptimConfig {
    OptimConfig {
        epochs,
        batch_size: batch,
        lr_drops: vec![],
        ..OptimConfig::toy()
    }
}

fn weights(m: &TsegcnModel) -> Vec<Vec<f64>> {
    m.params.iter().map(|(_, v, _)| v.data().to_vec()).collect()
}

#[test]
fn same_seed_same_log() {
    let seqs = data(3, 1);
    let run = || {
        let mut m = toy(4);
        let s = Samples::prepare(&m, &seqs).unwrap();
        let log = train(&mut m, &s, Some(&s), &TrainConfig::new(short(2, 4), 11)).unwrap();
        (log.without_timing(), weights(&m))
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert_eq!(a.epochs.len(), 2);
    for e in &a.epochs {
        assert!((0.0..=1.0).contains(&e.train_acc));
        assert!((0.0..=1.0).contains(&e.eval_acc.unwrap()));
    }
}

#[test]
fn shuffle_seed_changes_the_run() {
    let seqs = data(3, 1);
    let run = |seed| {
        let mut m = toy(4);
        let s = Samples::prepare(&m, &seqs).unwrap();
        train(&mut m, &s, None, &TrainConfig::new(short(1, 4), seed)).unwrap();
        weights(&m)
    };
    assert_ne!(run(0), run(1));
}

#[test]
fn zero_epochs_is_a_no_op() {
    let mut m = toy(0);
    let before = weights(&m);
    let s = Samples::prepare(&m, &data(1, 0)).unwrap();
    let log = train(&mut m, &s, Some(&s), &TrainConfig::new(short(0, 4), 0)).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(weights(&m), before);
}

#[test]
fn zero_rate_keeps_parameters() {
    let mut m = toy(0);
    let before = weights(&m);
    let s = Samples::prepare(&m, &data(2, 0)).unwrap();
    let cfg = TrainConfig::new(
        OptimConfig {
            lr: 0.0,
            ..short(2, 4)
        },
        0,
    );
    train(&mut m, &s, None, &cfg).unwrap();
    assert_eq!(weights(&m), before);
}

#[test]
fn empty_training_set_is_an_error() {
    let mut m = toy(0);
    let s = Samples::prepare(&m, &[]).unwrap();
    assert!(train(&mut m, &s, None, &TrainConfig::new(short(1, 4), 0)).is_err());
}

#[test]
fn memorizes_eight_samples() {
    let seqs = data(2, 3);
    let mut m = toy(1);
    let s = Samples::prepare(&m, &seqs).unwrap();
    let log = train(&mut m, &s, None, &TrainConfig::new(short(30, 4), 0)).unwrap();
    assert_eq!(evaluate(&m, &s, None).unwrap(), 1.0, "{:?}", log.without_timing());
    let first = log.epochs[0].train_loss;
    let last = log.epochs.last().unwrap().train_loss;
    assert!(last < first / 4.0, "{first} -> {last}");
}

#[test]
fn untrained_model_is_near_chance() {
    let seqs = data(250, 17);
    let m = toy(5);
    let s = Samples::prepare(&m, &seqs).unwrap();
    let acc = evaluate(&m, &s, Some(1)).unwrap();
    assert!((0.17..=0.33).contains(&acc), "{acc}");
    assert_eq!(evaluate(&m, &s, Some(1)).unwrap(), acc);
}

#[test]
fn predictions_independent_of_thread_count() {
    let seqs = data(10, 2);
    let m = toy(3);
    let s = Samples::prepare(&m, &seqs).unwrap();
    assert_eq!(predict(&m, &s, Some(1)).unwrap(), predict(&m, &s, Some(3)).unwrap());
}

#[test]
fn best_checkpoint_and_log_file_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = data(2, 0);
    let mut m = toy(0);
    let s = Samples::prepare(&m, &seqs).unwrap();
    let mut cfg = TrainConfig::new(short(2, 4), 0);
    cfg.checkpoint = Some(dir.path().join("best.ckpt"));
    cfg.log_path = Some(dir.path().join("log.jsonl"));
    let log = train(&mut m, &s, Some(&s), &cfg).unwrap();
    let restored = tsegcn::checkpoint::load(dir.path().join("best.ckpt")).unwrap();
    let (best_epoch, best_acc) = log.best_eval().unwrap();
    assert!(best_epoch < 2);
    assert_eq!(evaluate(&restored, &s, None).unwrap(), best_acc);
    let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["wall_time"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn wrong_joint_count_is_rejected() {
    let m = toy(0);
    let s = SkeletonSequence::new(5, 1, 4, vec![0.0; 60], Some(0)).unwrap();
    assert!(Samples::prepare(&m, &[s]).is_err());
    let s = SkeletonSequence::new(9, 1, 4, vec![0.0; 108], Some(7)).unwrap();
    assert!(Samples::prepare(&m, &[s]).is_err());
}
