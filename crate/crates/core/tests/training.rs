use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnorm::data::{make_padded_batches, synth_alignment_task, AlignedSequence, AlignmentTaskConfig};
use rnnorm::metrics::{cross_entropy, metrics_csv, Split};
use rnnorm::normalization::{Axis, Mode};
use rnnorm::persistence::load_checkpoint;
use rnnorm::recurrent::{Activation, BnConfig, CellKind, InitScheme, InputSpec, Placement, RecurrentStack, StackConfig};
use rnnorm::training::{
    evaluate, random_search, rescale_gradients, sgd_momentum_step, train, RunOptions, RunStatus, SearchSpace, TaskData,
    TrainConfig, Velocity,
};
use rnnorm::Tensor;

fn model(cell: CellKind, input: InputSpec, layers: usize, hidden: usize, classes: usize, bn: BnConfig, seed: u64) -> RecurrentStack {
    let mut s = RecurrentStack::new(StackConfig {
        cell,
        input,
        layers,
        hidden,
        bidirectional: false,
        classes,
        activation: Activation::Tanh,
        bn,
        dropout: 0.0,
    })
    .unwrap();
    s.init_parameters(InitScheme::Glorot, InitScheme::Uniform(0.1), seed);
    s
}

fn align_data(n: usize, seed: u64) -> TaskData {
    let ds = synth_alignment_task(
        seed,
        &AlignmentTaskConfig { sequences: n, features: 4, classes: 3, min_len: 3, max_len: 8 },
    )
    .unwrap();
    let (train, valid) = ds.split(n / 5);
    TaskData::Align { train: train.sequences, valid: valid.sequences }
}

fn lm_data(seed: u64) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stream: Vec<usize> = (0..1200).map(|i| if rng.gen_bool(0.8) { i % 5 } else { rng.gen_range(0..5) }).collect();
    TaskData::Lm { train: stream[..1000].to_vec(), valid: stream[1000..].to_vec() }
}

fn seq_bn() -> BnConfig {
    BnConfig { placement: Placement::InputToHidden, axis: Axis::SequenceWise, ..BnConfig::default() }
}

#[test]
fn one_epoch_gives_one_row_per_split() {
    let data = align_data(10, 1);
    let mut m = model(CellKind::Rnn, InputSpec::Features(4), 1, 6, 3, BnConfig::default(), 0);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let rec = train(&mut m, &data, &cfg, RunOptions::default()).unwrap();
    assert_eq!(rec.split_rows(Split::Train).count(), 1);
    assert_eq!(rec.split_rows(Split::Valid).count(), 1);
    assert_eq!(rec.status, RunStatus::Completed);
}

#[test]
fn overfits_a_single_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seqs: Vec<AlignedSequence> = (0..4)
        .map(|_| AlignedSequence {
            frames: Tensor::new(vec![8, 3], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            labels: (0..8).map(|_| rng.gen_range(0..4)).collect(),
        })
        .collect();
    let batch = make_padded_batches(&seqs, 4, None).unwrap().batches.remove(0);
    let mut m = model(CellKind::Lstm, InputSpec::Features(3), 2, 32, 4, BnConfig::default(), 5);
    let mut velocity = Velocity::default();
    let mut reached = None;
    for step in 0..500 {
        let mut pass = m.build(&batch, Mode::Train, None, None).unwrap();
        if pass.loss_value() < 0.01 {
            reached = Some(step);
            break;
        }
        let mut g = pass.backward().unwrap();
        rescale_gradients(&mut g, 10.0);
        sgd_momentum_step(&mut m, &g, &mut velocity, 0.3, 0.9).unwrap();
    }
    let logits = m.run_sequence(&batch, Mode::Infer).unwrap();
    let ce = cross_entropy(&logits, &batch.targets, &batch.mask).unwrap();
    assert!(reached.is_some() && ce < 0.01, "cross-entropy {ce} after 500 steps");
}

#[test]
fn huge_learning_rate_diverges_without_panicking() {
    let data = align_data(40, 2);
    let mut m = model(CellKind::Rnn, InputSpec::Features(4), 1, 16, 3, BnConfig::default(), 0);
    let cfg = TrainConfig { learning_rate: 10.0, momentum: 0.9, batch_size: 4, epochs: 8, ..TrainConfig::default() };
    let rec = train(&mut m, &data, &cfg, RunOptions::default()).unwrap();
    assert!(rec.status.is_diverged(), "{:?}", rec.status);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let data = align_data(30, 4);
    let run = |dir: &std::path::Path| {
        let mut m = model(CellKind::Lstm, InputSpec::Features(4), 1, 8, 3, seq_bn(), 11);
        let cfg = TrainConfig { epochs: 2, batch_size: 5, dropout: 0.2, seed: 9, ..TrainConfig::default() };
        let opts = RunOptions { out_dir: Some(dir.to_path_buf()), ..RunOptions::default() };
        train(&mut m, &data, &cfg, opts).unwrap();
        std::fs::read(dir.join("metrics.csv")).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn best_checkpoint_reproduces_its_validation_metric() {
    let data = align_data(30, 6);
    let dir = tempfile::tempdir().unwrap();
    let mut m = model(CellKind::Rnn, InputSpec::Features(4), 2, 8, 3, seq_bn(), 2);
    let cfg = TrainConfig { epochs: 3, batch_size: 6, ..TrainConfig::default() };
    let rec = train(&mut m, &data, &cfg, RunOptions { out_dir: Some(dir.path().into()), ..RunOptions::default() }).unwrap();
    let ck = load_checkpoint(dir.path().join("best.ckpt")).unwrap();
    assert_eq!(Some(ck.metric), rec.best_valid);
    let restored = ck.restore().unwrap();
    let fce = evaluate(&restored, &data, 6, 20).unwrap().cross_entropy().unwrap();
    assert_eq!(Some(fce), rec.best_valid);
    let last = load_checkpoint(dir.path().join("last.ckpt")).unwrap().restore().unwrap();
    assert_eq!(last, m);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&rec.rows));
}

#[test]
fn language_model_training_learns_the_pattern() {
    let data = lm_data(0);
    let mut m = model(CellKind::Lstm, InputSpec::Tokens { vocab: 5, embedding: 8 }, 1, 16, 5, BnConfig::default(), 1);
    let cfg = TrainConfig { learning_rate: 0.5, momentum: 0.0, batch_size: 5, bptt_window: 10, epochs: 6, ..TrainConfig::default() };
    let rec = train(&mut m, &data, &cfg, RunOptions::default()).unwrap();
    assert_eq!(rec.status, RunStatus::Completed);
    // uniform guessing costs ln 5
    assert!(rec.best_valid.unwrap() < 0.8 * 5f64.ln(), "{:?}", rec.best_valid);
}

#[test]
fn validation_does_not_touch_statistics() {
    let data = align_data(20, 8);
    let mut m = model(CellKind::Lstm, InputSpec::Features(4), 1, 6, 3, seq_bn(), 0);
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    train(&mut m, &data, &cfg, RunOptions::default()).unwrap();
    let before = m.clone();
    evaluate(&m, &data, 3, 20).unwrap();
    assert_eq!(m.statistics_updates(), before.statistics_updates());
    assert_eq!(m, before);
}

#[test]
fn trained_model_beats_majority_class() {
    let ds = synth_alignment_task(
        21,
        &AlignmentTaskConfig { sequences: 200, features: 4, classes: 3, min_len: 10, max_len: 20 },
    )
    .unwrap();
    let (train_set, valid_set) = ds.split(40);
    let majority = 1.0 - valid_set.majority_fraction();
    let mut m = RecurrentStack::new(StackConfig {
        cell: CellKind::Lstm,
        input: InputSpec::Features(4),
        layers: 2,
        hidden: 16,
        bidirectional: true,
        classes: 3,
        activation: Activation::Tanh,
        bn: BnConfig::default(),
        dropout: 0.0,
    })
    .unwrap();
    m.init_parameters(InitScheme::Glorot, InitScheme::Glorot, 0);
    let data = TaskData::Align { train: train_set.sequences, valid: valid_set.sequences };
    let cfg = TrainConfig { learning_rate: 0.05, momentum: 0.9, batch_size: 8, epochs: 5, grad_norm_threshold: Some(10.0), ..TrainConfig::default() };
    let rec = train(&mut m, &data, &cfg, RunOptions::default()).unwrap();
    let fer = rec.split_rows(Split::Valid).map(|r| r.fer).fold(f64::INFINITY, f64::min);
    assert!(fer < majority, "FER {fer} vs majority-class {majority}");
}

#[test]
fn sweep_records_every_trial() {
    let data = align_data(20, 3);
    let space = SearchSpace { trials: 3, batch_sizes: vec![4, 8], ..SearchSpace::default() };
    let base = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let make = |seed| {
        let mut s = model(CellKind::Rnn, InputSpec::Features(4), 1, 6, 3, BnConfig::default(), 0);
        s.init_parameters(InitScheme::Glorot, InitScheme::Glorot, seed);
        Ok(s)
    };
    let a = random_search(make, &data, &base, &space, 17).unwrap();
    let b = random_search(make, &data, &base, &space, 17).unwrap();
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
    assert!(a.iter().enumerate().all(|(i, r)| r.index == i));
}
