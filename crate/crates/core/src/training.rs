//! SGD with momentum, gradient rescaling, learning-rate schedules and the
//! training / random-search loops.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Parameterized};
use crate::data::{make_lm_batches, make_padded_batches, make_padded_batches_in_order, shuffled_order, AlignedSequence, SequenceBatch};
use crate::error::{Error, Result};
use crate::metrics::{sequence_totals, FrameTotals, MetricsRow, Split};
use crate::normalization::Mode;
use crate::persistence::{save_checkpoint, write_atomic, Checkpoint};
use crate::recurrent::{LayerState, RecurrentStack};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Halve every epoch after epoch `k`.
    HalveAfter(usize),
    /// Divide by `factor` every epoch after epoch `after`.
    DivideBy { factor: f64, after: usize },
}

/// Learning rate for a 1-based `epoch`.
pub fn lr_at(schedule: LrSchedule, epoch: usize, base: f64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::HalveAfter(k) => base * 0.5f64.powi(epoch.saturating_sub(k) as i32),
        LrSchedule::DivideBy { factor, after } => base * factor.powi(-(epoch.saturating_sub(after) as i32)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub bptt_window: usize,
    pub grad_norm_threshold: Option<f64>,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 32,
            bptt_window: 20,
            grad_norm_threshold: None,
            schedule: LrSchedule::Constant,
            epochs: 10,
            seed: 0,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, each naming its field.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("train.lr must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("train.momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be >= 1".to_string());
        }
        if self.bptt_window == 0 {
            v.push("train.bptt must be >= 1".to_string());
        }
        if self.epochs == 0 {
            v.push("train.epochs must be >= 1".to_string());
        }
        if let Some(t) = self.grad_norm_threshold {
            if !(t > 0.0) {
                v.push(format!("train.clip must be > 0, got {t}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("train.dropout must lie in [0,1), got {}", self.dropout));
        }
        match self.schedule {
            LrSchedule::DivideBy { factor, .. } if !(factor > 0.0) => {
                v.push(format!("train.schedule factor must be > 0, got {factor}"))
            }
            _ => {}
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Velocity(pub BTreeMap<String, Tensor>);

/// Classical momentum: `v <- momentum·v - lr·g; θ <- θ + v`.
///
/// All gradients are checked before anything is modified, so a non-finite
/// gradient leaves the model untouched. Parameters without a gradient are
/// treated as having a zero gradient.
pub fn sgd_momentum_step(
    model: &mut impl Parameterized,
    grads: &Gradients,
    velocity: &mut Velocity,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    for p in model.parameters_mut() {
        let v = velocity.0.entry(p.name.clone()).or_insert_with(|| Tensor::zeros(p.value.shape()));
        if v.shape() != p.value.shape() {
            return Err(Error::dim(format!("velocity for `{}` has the wrong shape", p.name)));
        }
        let g = grads.get(&p.name);
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::dim(format!("gradient for `{}` has shape {:?}", p.name, g.shape())));
            }
        }
        let vd = v.data_mut();
        for (k, vk) in vd.iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g.data()[k]);
            *vk = momentum * *vk - lr * gk;
        }
        for (th, vk) in p.value.data_mut().iter_mut().zip(v.data()) {
            *th += vk;
        }
    }
    Ok(())
}

/// Global L2 norm over every gradient, summed in name order.
pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Scales all gradients by `threshold / N` when their global norm `N`
/// exceeds `threshold`. Returns `N`.
pub fn rescale_gradients(grads: &mut Gradients, threshold: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > threshold {
        let s = threshold / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Training and validation data.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    /// Token streams for next-symbol prediction.
    Lm { train: Vec<usize>, valid: Vec<usize> },
    /// Per-frame labelled sequences.
    Align { train: Vec<AlignedSequence>, valid: Vec<AlignedSequence> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunStatus::Completed => "completed",
            RunStatus::Diverged { .. } => "diverged",
        }
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<MetricsRow>,
    pub status: RunStatus,
    /// Loss of the very first training step.
    pub initial_loss: Option<f64>,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl RunRecord {
    pub fn split_rows(&self, split: Split) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn best_train(&self) -> Option<f64> {
        self.split_rows(Split::Train).map(|r| r.fce).reduce(f64::min)
    }
}

/// Where and how a run reports its progress.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for `metrics.csv`, `best.ckpt` and `last.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Stored verbatim in checkpoints.
    pub config_text: String,
    /// Record elapsed seconds; otherwise the column is 0 so reruns are
    /// byte-identical.
    pub wall_clock: bool,
    /// Called with the rows of each finished epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&[MetricsRow])>,
}

/// Number of consecutive epochs above twice the initial loss that count as
/// divergence.
pub const DIVERGENCE_EPOCHS: usize = 3;

/// Trains `model` in place.
pub fn train(model: &mut RecurrentStack, data: &TaskData, cfg: &TrainConfig, opts: RunOptions<'_>) -> Result<RunRecord> {
    cfg.validate()?;
    let RunOptions { out_dir, config_text, wall_clock, mut on_epoch } = opts;
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
    }
    model.config.dropout = cfg.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Velocity::default();
    let mut record =
        RunRecord { rows: Vec::new(), status: RunStatus::Completed, initial_loss: None, best_valid: None, best_epoch: None };
    let mut above = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(cfg.schedule, epoch, cfg.learning_rate);
        let outcome = run_epoch(model, data, cfg, lr, &mut velocity, &mut rng, &mut record.initial_loss);
        let train_totals = match outcome {
            Ok(t) => t,
            Err(EpochFailure::Diverged(reason)) => {
                record.status = RunStatus::Diverged { epoch, reason };
                break;
            }
            Err(EpochFailure::Error(e)) => return Err(e),
        };
        let valid_totals = evaluate(model, data, cfg.batch_size, cfg.bptt_window)?;
        let seconds = if wall_clock { started.elapsed().as_secs_f64() } else { 0.0 };
        let train_row = MetricsRow::from_totals(epoch, Split::Train, &train_totals, lr, seconds)?;
        let valid_row = MetricsRow::from_totals(epoch, Split::Valid, &valid_totals, lr, seconds)?;
        let (train_fce, valid_fce) = (train_row.fce, valid_row.fce);
        record.rows.push(train_row);
        record.rows.push(valid_row);

        if let Some(dir) = &out_dir {
            write_atomic(&dir.join("metrics.csv"), crate::metrics::metrics_csv(&record.rows).as_bytes())?;
            let ck = Checkpoint::capture(model, &config_text, epoch as u64, valid_fce);
            save_checkpoint(&ck, dir.join("last.ckpt"))?;
            if record.best_valid.map_or(true, |b| valid_fce < b) {
                save_checkpoint(&ck, dir.join("best.ckpt"))?;
            }
        }
        if record.best_valid.map_or(true, |b| valid_fce < b) {
            record.best_valid = Some(valid_fce);
            record.best_epoch = Some(epoch);
        }
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record.rows[record.rows.len() - 2..]);
        }

        let initial = record.initial_loss.unwrap_or(f64::INFINITY);
        if !valid_fce.is_finite() {
            record.status = RunStatus::Diverged { epoch, reason: "validation loss is not finite".into() };
            break;
        }
        if train_fce > 2.0 * initial {
            above += 1;
            if above >= DIVERGENCE_EPOCHS {
                record.status = RunStatus::Diverged {
                    epoch,
                    reason: format!("training loss above twice the initial {initial} for {above} epochs"),
                };
                break;
            }
        } else {
            above = 0;
        }
    }
    Ok(record)
}

enum EpochFailure {
    Diverged(String),
    Error(Error),
}

impl From<Error> for EpochFailure {
    fn from(e: Error) -> Self {
        EpochFailure::Error(e)
    }
}

fn run_epoch(
    model: &mut RecurrentStack,
    data: &TaskData,
    cfg: &TrainConfig,
    lr: f64,
    velocity: &mut Velocity,
    rng: &mut ChaCha8Rng,
    initial: &mut Option<f64>,
) -> std::result::Result<FrameTotals, EpochFailure> {
    let mut totals = FrameTotals::default();
    match data {
        TaskData::Align { train, .. } => {
            let order = shuffled_order(train.len(), rng);
            let batches = make_padded_batches_in_order(train, &order, cfg.batch_size, None)?.batches;
            for batch in &batches {
                train_step(model, batch, None, cfg, lr, velocity, rng, initial, &mut totals)?;
            }
        }
        TaskData::Lm { train, .. } => {
            let batches = make_lm_batches(train, cfg.batch_size, cfg.bptt_window)?;
            let mut carry: Option<Vec<LayerState>> = None;
            for batch in &batches {
                carry = Some(train_step(model, batch, carry.as_deref(), cfg, lr, velocity, rng, initial, &mut totals)?);
            }
        }
    }
    Ok(totals)
}

/// One forward/backward/update on `batch`; returns the final hidden states.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut RecurrentStack,
    batch: &SequenceBatch,
    carry: Option<&[LayerState]>,
    cfg: &TrainConfig,
    lr: f64,
    velocity: &mut Velocity,
    rng: &mut ChaCha8Rng,
    initial: &mut Option<f64>,
    totals: &mut FrameTotals,
) -> std::result::Result<Vec<LayerState>, EpochFailure> {
    let mut pass = model.build(batch, Mode::Train, carry, Some(rng))?;
    let loss = pass.loss_value();
    if !loss.is_finite() {
        return Err(EpochFailure::Diverged(format!("training loss became {loss}")));
    }
    initial.get_or_insert(loss);
    let logits = pass.graph.value(pass.logits)?;
    totals.merge(&FrameTotals::from_logits(logits, &batch.targets, &batch.mask)?);
    let mut grads = pass.backward()?;
    if let Some(t) = cfg.grad_norm_threshold {
        rescale_gradients(&mut grads, t);
    }
    match sgd_momentum_step(model, &grads, velocity, lr, cfg.momentum) {
        Err(Error::NonFiniteGradient(name)) => {
            return Err(EpochFailure::Diverged(format!("non-finite gradient for `{name}`")))
        }
        r => r?,
    }
    model.commit_statistics(&pass)?;
    Ok(pass.final_states()?)
}

/// Inference-mode totals on the validation split.
pub fn evaluate(model: &RecurrentStack, data: &TaskData, batch_size: usize, window: usize) -> Result<FrameTotals> {
    match data {
        TaskData::Align { valid, .. } => evaluate_sequences(model, valid, batch_size),
        TaskData::Lm { valid, .. } => evaluate_stream(model, valid, batch_size, window),
    }
}

/// Per-sequence totals in dataset order, accumulated sequence by sequence so
/// the result does not depend on `batch_size`.
pub fn sequence_metrics(model: &RecurrentStack, sequences: &[AlignedSequence], batch_size: usize) -> Result<Vec<FrameTotals>> {
    let batches = make_padded_batches(sequences, batch_size, None)?;
    let mut out = Vec::with_capacity(sequences.len());
    for batch in &batches.batches {
        let pass = model.build(batch, Mode::Infer, None, None)?;
        let logits = pass.graph.value(pass.logits)?;
        out.extend(sequence_totals(logits, &batch.targets, &batch.mask, batch.batch_size())?);
    }
    Ok(out)
}

pub fn evaluate_sequences(model: &RecurrentStack, sequences: &[AlignedSequence], batch_size: usize) -> Result<FrameTotals> {
    let mut total = FrameTotals::default();
    for t in sequence_metrics(model, sequences, batch_size)? {
        total.merge(&t);
    }
    Ok(total)
}

/// Streams the tokens through the model in `window`-sized chunks with the
/// hidden state carried across chunks.
pub fn evaluate_stream(model: &RecurrentStack, stream: &[usize], batch_size: usize, window: usize) -> Result<FrameTotals> {
    let m = batch_size.min(stream.len().saturating_sub(1) / window.max(1)).max(1);
    let batches = make_lm_batches(stream, m, window)?;
    let mut total = FrameTotals::default();
    let mut carry: Option<Vec<LayerState>> = None;
    for batch in &batches {
        let pass = model.build(batch, Mode::Infer, carry.as_deref(), None)?;
        let logits = pass.graph.value(pass.logits)?;
        total.merge(&FrameTotals::from_logits(logits, &batch.targets, &batch.mask)?);
        carry = Some(pass.final_states()?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    /// Log-uniform learning-rate interval.
    pub lr_range: (f64, f64),
    pub momenta: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub trials: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace { lr_range: (1e-4, 1.0), momenta: vec![0.5, 0.8, 0.9, 0.95, 0.995], batch_sizes: vec![32, 64, 128], trials: 10 }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.trials == 0 {
            v.push("sweep.trials must be >= 1".to_string());
        }
        let (lo, hi) = self.lr_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            v.push(format!("sweep learning-rate range [{lo}, {hi}] must be positive and non-empty"));
        }
        if self.momenta.is_empty() || self.momenta.iter().any(|m| !(0.0..1.0).contains(m)) {
            v.push("sweep momenta must be a non-empty set of values in [0,1)".to_string());
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            v.push("sweep batch sizes must be a non-empty set of positive integers".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Seed for the trial's initialization and shuffling.
    pub seed: u64,
}

/// Draws the trial hyperparameters; the same seed gives the same trials.
pub fn sample_trials(space: &SearchSpace, seed: u64) -> Result<Vec<TrialParams>> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (space.lr_range.0.ln(), space.lr_range.1.ln());
    Ok((0..space.trials)
        .map(|_| {
            let learning_rate = if lo == hi { space.lr_range.0 } else { rng.gen_range(lo..=hi).exp() };
            TrialParams {
                learning_rate: learning_rate.clamp(space.lr_range.0, space.lr_range.1),
                momentum: space.momenta[rng.gen_range(0..space.momenta.len())],
                batch_size: space.batch_sizes[rng.gen_range(0..space.batch_sizes.len())],
                seed: rng.gen(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub index: usize,
    pub params: TrialParams,
    pub best_train: Option<f64>,
    pub best_valid: Option<f64>,
    pub status: RunStatus,
}

pub const RESULTS_HEADER: &str = "trial,lr,momentum,batch_size,best_train_fce,best_valid_fce,status";

impl TrialResult {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.index,
            self.params.learning_rate,
            self.params.momentum,
            self.params.batch_size,
            opt(self.best_train),
            opt(self.best_valid),
            self.status.as_str()
        )
    }
}

/// Runs one training per sampled trial, in trial order. `make_model` builds
/// a freshly initialized model from a trial seed. Diverged trials are
/// recorded, not propagated.
pub fn random_search(
    mut make_model: impl FnMut(u64) -> Result<RecurrentStack>,
    data: &TaskData,
    base: &TrainConfig,
    space: &SearchSpace,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    let trials = sample_trials(space, seed)?;
    let mut out = Vec::with_capacity(trials.len());
    for (index, params) in trials.into_iter().enumerate() {
        let mut model = make_model(params.seed)?;
        let cfg = TrainConfig {
            learning_rate: params.learning_rate,
            momentum: params.momentum,
            batch_size: params.batch_size,
            seed: params.seed,
            ..base.clone()
        };
        let record = train(&mut model, data, &cfg, RunOptions::default())?;
        out.push(TrialResult {
            index,
            params,
            best_train: record.best_train(),
            best_valid: record.best_valid,
            status: record.status,
        });
    }
    Ok(out)
}

/// Sorts by best validation metric, missing or non-finite last, ties by
/// trial index.
pub fn sort_results(results: &mut [TrialResult]) {
    results.sort_by(|a, b| {
        let key = |r: &TrialResult| r.best_valid.filter(|v| v.is_finite()).unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b)).then(a.index.cmp(&b.index))
    });
}

pub fn results_csv(results: &[TrialResult]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in results {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Parameter;
    use proptest::prelude::*;

    struct Flat(Vec<Parameter>);

    impl Parameterized for Flat {
        fn parameters(&self) -> Vec<&Parameter> {
            self.0.iter().collect()
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            self.0.iter_mut().collect()
        }
    }

    fn grads(pairs: &[(&str, Vec<f64>)]) -> Gradients {
        pairs.iter().map(|(n, v)| (n.to_string(), Tensor::vector(v.clone()))).collect()
    }

    #[test]
    fn momentum_zero_is_plain_sgd() {
        let mut m = Flat(vec![Parameter::new("w", Tensor::vector(vec![1.0, 2.0]))]);
        let mut v = Velocity::default();
        sgd_momentum_step(&mut m, &grads(&[("w", vec![0.5, -1.0])]), &mut v, 0.1, 0.0).unwrap();
        assert_eq!(m.0[0].value.data(), &[1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn two_momentum_steps() {
        let mut m = Flat(vec![Parameter::new("w", Tensor::vector(vec![0.0]))]);
        let mut v = Velocity::default();
        let g = grads(&[("w", vec![1.0])]);
        sgd_momentum_step(&mut m, &g, &mut v, 0.1, 0.9).unwrap();
        sgd_momentum_step(&mut m, &g, &mut v, 0.1, 0.9).unwrap();
        assert!((m.0[0].value.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut m = Flat(vec![Parameter::new("w", Tensor::vector(vec![3.0]))]);
        let mut v = Velocity::default();
        sgd_momentum_step(&mut m, &grads(&[("w", vec![0.0])]), &mut v, 0.5, 0.9).unwrap();
        assert_eq!(m.0[0].value.data(), &[3.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_changes_nothing() {
        let mut m = Flat(vec![
            Parameter::new("a", Tensor::vector(vec![1.0])),
            Parameter::new("b", Tensor::vector(vec![1.0])),
        ]);
        let mut v = Velocity::default();
        let r = sgd_momentum_step(&mut m, &grads(&[("a", vec![1.0]), ("b", vec![f64::NAN])]), &mut v, 0.1, 0.0);
        assert!(matches!(r, Err(Error::NonFiniteGradient(n)) if n == "b"));
        assert_eq!(m.0[0].value.data(), &[1.0]);
    }

    #[test]
    fn rescale_examples() {
        let mut g = grads(&[("a", vec![12.0]), ("b", vec![16.0])]);
        assert_eq!(rescale_gradients(&mut g, 10.0), 20.0);
        assert_eq!(g["a"].data(), &[6.0]);
        assert_eq!(g["b"].data(), &[8.0]);

        let mut g = grads(&[("a", vec![3.0]), ("b", vec![4.0])]);
        let before = g.clone();
        rescale_gradients(&mut g, 10.0);
        assert_eq!(g, before);

        let mut g = grads(&[("a", vec![0.0, 0.0])]);
        rescale_gradients(&mut g, 10.0);
        assert_eq!(g["a"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn schedules() {
        assert_eq!(lr_at(LrSchedule::Constant, 9, 0.3), 0.3);
        assert_eq!(lr_at(LrSchedule::HalveAfter(6), 6, 1.0), 1.0);
        assert_eq!(lr_at(LrSchedule::HalveAfter(6), 8, 1.0), 0.25);
        assert!((lr_at(LrSchedule::DivideBy { factor: 1.2, after: 6 }, 7, 1.0) - 1.0 / 1.2).abs() < 1e-15);
        assert_eq!(lr_at(LrSchedule::DivideBy { factor: 1.15, after: 15 }, 3, 1.0), 1.0);
    }

    #[test]
    fn trial_sampling() {
        let space = SearchSpace { trials: 200, ..SearchSpace::default() };
        let a = sample_trials(&space, 4).unwrap();
        assert_eq!(a, sample_trials(&space, 4).unwrap());
        assert!(a.iter().all(|t| (1e-4..=1.0).contains(&t.learning_rate)));
        assert!(a.iter().all(|t| space.momenta.contains(&t.momentum)));
        assert!(a.iter().all(|t| space.batch_sizes.contains(&t.batch_size)));
        assert_eq!(sample_trials(&SearchSpace { trials: 1, ..space }, 0).unwrap().len(), 1);
    }

    #[test]
    fn invalid_config_lists_every_violation() {
        let cfg = TrainConfig { learning_rate: 0.0, momentum: 1.0, batch_size: 0, ..TrainConfig::default() };
        match cfg.validate() {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 3),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn rescale_is_idempotent(vals in prop::collection::vec(-100.0f64..100.0, 1..8), threshold in 0.1f64..50.0) {
            let mut g: Gradients = vals.iter().enumerate().map(|(i, &v)| (format!("p{i}"), Tensor::vector(vec![v]))).collect();
            rescale_gradients(&mut g, threshold);
            let once = g.clone();
            rescale_gradients(&mut g, threshold);
            for (k, v) in &once {
                let d = v.max_abs_diff(&g[k]);
                prop_assert!(d <= 1e-12 * v.data()[0].abs().max(1.0));
            }
            prop_assert!(global_norm(&once) <= threshold * (1.0 + 1e-12));
        }

        #[test]
        fn zero_lr_changes_nothing(vals in prop::collection::vec(-10.0f64..10.0, 3), g in prop::collection::vec(-10.0f64..10.0, 3)) {
            let mut m = Flat(vec![Parameter::new("w", Tensor::vector(vals.clone()))]);
            let mut v = Velocity::default();
            sgd_momentum_step(&mut m, &grads(&[("w", g)]), &mut v, 0.0, 0.9).unwrap();
            prop_assert_eq!(m.0[0].value.data(), &vals[..]);
        }
    }
}
