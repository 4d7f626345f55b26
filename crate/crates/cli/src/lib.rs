//! Command implementations behind the `rnnorm` binary.

pub mod presets;
pub mod spec;

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rnnorm::autodiff::GradCheckReport;
use rnnorm::data::{make_lm_batches, BatchInputs, make_padded_batches, synth_alignment_task, synth_char_text, AlignedSequence, CharCorpus, SequenceBatch};
use rnnorm::metrics::{FrameTotals, MetricsRow, Split};
use rnnorm::normalization::Axis;
use rnnorm::persistence::{write_atomic, Checkpoint};
use rnnorm::recurrent::{Placement, RecurrentStack};
use rnnorm::training::{
    evaluate_stream, lr_at, random_search, results_csv, sequence_metrics, sort_results, train, RunOptions, RunRecord,
    RunStatus, TaskData, TrialResult,
};
use rnnorm::{Error, Result, Tensor};

use crate::spec::{axis_name, placement_name, RunSpec, TaskSpec};

/// Largest hidden width and sequence length `gradcheck` accepts.
pub const GRADCHECK_MAX_HIDDEN: usize = 16;
pub const GRADCHECK_MAX_STEPS: usize = 8;

/// Data for a spec, plus the sizes the model needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: TaskData,
    /// Input features, or vocabulary size for token inputs.
    pub input: usize,
    pub classes: usize,
    /// Training sequences removed by the length cap.
    pub dropped: usize,
}

pub fn prepare(spec: &RunSpec) -> Result<Prepared> {
    match &spec.task {
        TaskSpec::CharLm { corpus, synth_chars, train_fraction } => {
            let text = match corpus {
                Some(path) => std::fs::read_to_string(path)
                    .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", path.display())))?,
                None => synth_char_text(spec.data_seed, *synth_chars),
            };
            let c = CharCorpus::from_text(&text, *train_fraction)?;
            let v = c.vocab.len();
            Ok(Prepared { data: TaskData::Lm { train: c.train, valid: c.valid }, input: v, classes: v, dropped: 0 })
        }
        TaskSpec::SynthAlign { generator, valid, max_frames } => {
            let ds = synth_alignment_task(spec.data_seed, generator)?;
            let (train, valid) = ds.split(*valid);
            let total = train.sequences.len();
            let kept: Vec<AlignedSequence> =
                train.sequences.into_iter().filter(|s| max_frames.map_or(true, |cap| s.len() <= cap)).collect();
            if kept.is_empty() {
                return Err(Error::Ingestion("the length cap dropped every training sequence".into()));
            }
            Ok(Prepared {
                input: generator.features,
                classes: generator.classes,
                dropped: total - kept.len(),
                data: TaskData::Align { train: kept, valid: valid.sequences },
            })
        }
    }
}

/// A freshly initialized model for `spec`.
pub fn build_model(spec: &RunSpec, prepared: &Prepared, seed: u64) -> Result<RecurrentStack> {
    let mut model = RecurrentStack::new(spec.stack_config(prepared.input, prepared.classes))?;
    model.init_parameters(spec.model.init, spec.model.embedding_init, seed);
    Ok(model)
}

/// One summary line for the train and valid rows of an epoch.
pub fn epoch_line(rows: &[MetricsRow]) -> String {
    let mut s = String::new();
    if let Some(r) = rows.first() {
        let _ = write!(s, "epoch {:>3}  lr {:.3e}", r.epoch, r.lr);
    }
    for r in rows {
        let _ = write!(s, "  {} fce {:.4} ppl {:.3} fer {:.4}", r.split.as_str(), r.fce, r.ppl, r.fer);
    }
    s
}

/// Trains per `spec`, writing `spec.ini`, `metrics.csv` and checkpoints to
/// `out_dir` and one line per epoch to `log`.
pub fn run_train(spec: &RunSpec, out_dir: &Path, log: &mut dyn Write) -> Result<RunRecord> {
    let prepared = prepare(spec)?;
    if prepared.dropped > 0 {
        let _ = writeln!(log, "dropped {} training sequences above the length cap", prepared.dropped);
    }
    let mut model = build_model(spec, &prepared, spec.train.seed)?;
    let text = spec.to_text();
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("spec.ini"), text.as_bytes())?;
    let mut echo = |rows: &[MetricsRow]| {
        let _ = writeln!(log, "{}", epoch_line(rows));
    };
    let opts = RunOptions {
        out_dir: Some(out_dir.to_path_buf()),
        config_text: text,
        wall_clock: spec.wall_clock,
        on_epoch: Some(&mut echo),
    };
    train(&mut model, &prepared.data, &spec.train, opts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub row: MetricsRow,
    /// Per-sequence totals in dataset order (sequence tasks only).
    pub sequences: Option<Vec<FrameTotals>>,
}

/// Inference-mode metrics of a checkpoint on one split of its task.
pub fn run_eval(checkpoint: &Checkpoint, spec: &RunSpec, split: Split, batch_size: usize) -> Result<EvalOutcome> {
    let model = checkpoint.restore()?;
    let prepared = prepare(spec)?;
    let expected = spec.stack_config(prepared.input, prepared.classes);
    if (expected.input, expected.classes) != (model.config.input, model.config.classes) {
        return Err(Error::Configuration(format!(
            "checkpoint expects input {:?} and {} classes, data provides {:?} and {}",
            model.config.input, model.config.classes, expected.input, expected.classes
        )));
    }
    let (totals, sequences) = match (&prepared.data, split) {
        (TaskData::Align { train, valid }, Split::Train | Split::Valid) => {
            let seqs = if split == Split::Train { train } else { valid };
            let per = sequence_metrics(&model, seqs, batch_size)?;
            let mut total = FrameTotals::default();
            for t in &per {
                total.merge(t);
            }
            (total, Some(per))
        }
        (TaskData::Lm { train, valid }, Split::Train | Split::Valid) => {
            let stream = if split == Split::Train { train } else { valid };
            (evaluate_stream(&model, stream, batch_size, spec.train.bptt_window)?, None)
        }
        (_, Split::Test) => return Err(Error::Configuration("tasks have no test split".into())),
    };
    let epoch = checkpoint.epoch as usize;
    let lr = lr_at(spec.train.schedule, epoch.max(1), spec.train.learning_rate);
    Ok(EvalOutcome { row: MetricsRow::from_totals(epoch, split, &totals, lr, 0.0)?, sequences })
}

pub const SEQUENCES_HEADER: &str = "sequence,frames,nll,errors";

pub fn sequences_csv(per: &[FrameTotals]) -> String {
    let mut s = String::from(SEQUENCES_HEADER);
    s.push('\n');
    for (i, t) in per.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{}", t.frames, t.nll, t.errors);
    }
    s
}

/// Sweep results for one BN placement, in trial order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepArm {
    pub placement: Placement,
    pub results: Vec<TrialResult>,
}

/// Runs the random search once per placement. Every arm draws the same
/// trial hyperparameters and initialization seeds.
pub fn run_sweep(spec: &RunSpec, placements: &[Placement]) -> Result<Vec<SweepArm>> {
    let prepared = prepare(spec)?;
    let mut arms = Vec::new();
    for &placement in placements {
        let mut arm_spec = spec.clone();
        arm_spec.bn.placement = placement;
        if placement == Placement::PreActivation && arm_spec.bn.axis == Axis::SequenceWise {
            arm_spec.bn.axis = Axis::FrameWise;
        }
        arm_spec.stack_config(prepared.input, prepared.classes).validate()?;
        let results = random_search(
            |seed| build_model(&arm_spec, &prepared, seed),
            &prepared.data,
            &arm_spec.train,
            &arm_spec.sweep,
            arm_spec.train.seed,
        )?;
        arms.push(SweepArm { placement, results });
    }
    Ok(arms)
}

fn best_valid(results: &[TrialResult]) -> Option<f64> {
    results.iter().filter_map(|r| r.best_valid).filter(|v| v.is_finite()).reduce(f64::min)
}

/// Paired comparison of the first arm against every other.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub reference: Placement,
    pub reference_best: Option<f64>,
    pub other: Placement,
    pub other_best: Option<f64>,
    /// `(trial, lr)` where the reference diverged and the other completed.
    pub rescued: Vec<(usize, f64)>,
}

pub fn compare(arms: &[SweepArm]) -> Vec<Comparison> {
    let Some(reference) = arms.first() else { return Vec::new() };
    arms[1..]
        .iter()
        .map(|arm| Comparison {
            reference: reference.placement,
            reference_best: best_valid(&reference.results),
            other: arm.placement,
            other_best: best_valid(&arm.results),
            rescued: reference
                .results
                .iter()
                .zip(&arm.results)
                .filter(|(a, b)| a.status.is_diverged() && b.status == RunStatus::Completed)
                .map(|(a, _)| (a.index, a.params.learning_rate))
                .collect(),
        })
        .collect()
}

pub fn comparison_report(arms: &[SweepArm]) -> String {
    let mut s = String::new();
    for arm in arms {
        let diverged = arm.results.iter().filter(|r| r.status.is_diverged()).count();
        let _ = writeln!(
            s,
            "{}: best valid fce {}, {diverged} of {} trials diverged",
            placement_name(arm.placement),
            best_valid(&arm.results).map_or("n/a".to_string(), |v| format!("{v:.4}")),
            arm.results.len()
        );
    }
    for c in compare(arms) {
        let lrs: Vec<String> = c.rescued.iter().map(|(i, lr)| format!("trial {i} lr {lr:.3e}")).collect();
        let _ = writeln!(
            s,
            "{} diverged where {} trained: {}",
            placement_name(c.reference),
            placement_name(c.other),
            if lrs.is_empty() { "none".to_string() } else { lrs.join(", ") }
        );
    }
    s
}

/// Writes sorted results tables and, for several arms, the comparison.
pub fn write_sweep(arms: &[SweepArm], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for arm in arms {
        let mut sorted = arm.results.clone();
        sort_results(&mut sorted);
        let name = if arms.len() == 1 { "results.csv".to_string() } else { format!("results-{}.csv", placement_name(arm.placement)) };
        write_atomic(&out_dir.join(name), results_csv(&sorted).as_bytes())?;
    }
    if arms.len() > 1 {
        write_atomic(&out_dir.join("comparison.txt"), comparison_report(arms).as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub label: String,
    pub report: GradCheckReport,
}

/// Placement/axis combinations a spec's task can use.
pub fn reachable_combinations(spec: &RunSpec) -> Vec<(Placement, Axis)> {
    let mut out = vec![(Placement::None, spec.bn.axis)];
    out.push((Placement::InputToHidden, Axis::FrameWise));
    if !spec.task.is_lm() {
        out.push((Placement::InputToHidden, Axis::SequenceWise));
    }
    out.push((Placement::PreActivation, Axis::FrameWise));
    out
}

/// A small full-length batch from the run's training data, features
/// rescaled to [-2, 2].
pub fn gradcheck_batch(spec: &RunSpec, prepared: &Prepared) -> Result<SequenceBatch> {
    let m = spec.train.batch_size.min(3);
    match &prepared.data {
        TaskData::Lm { train, .. } => make_lm_batches(train, m, spec.train.bptt_window)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Ingestion("stream too short for one batch".into())),
        TaskData::Align { train, .. } => {
            let picked = &train[..m.min(train.len())];
            let len = picked.iter().map(AlignedSequence::len).min().unwrap_or(0).min(GRADCHECK_MAX_STEPS);
            let cropped: Vec<AlignedSequence> = picked
                .iter()
                .map(|s| Ok(AlignedSequence { frames: s.frames.slice_outer(0, len)?, labels: s.labels[..len].to_vec() }))
                .collect::<Result<_>>()?;
            let mut batch = make_padded_batches(&cropped, cropped.len(), None)?.batches.remove(0);
            if let BatchInputs::Features(x) = &mut batch.inputs {
                rescale_features(x);
            }
            Ok(batch)
        }
    }
}

/// Maps each feature affinely onto [-2, 2], keeping finite differences well
/// above rounding noise.
fn rescale_features(x: &mut Tensor) {
    let f = x.last_dim();
    let mut lo = vec![f64::INFINITY; f];
    let mut hi = vec![f64::NEG_INFINITY; f];
    for row in x.data().chunks_exact(f) {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    for row in x.data_mut().chunks_exact_mut(f) {
        for (j, v) in row.iter_mut().enumerate() {
            let span = hi[j] - lo[j];
            *v = if span > 0.0 { 4.0 * (*v - lo[j]) / span - 2.0 } else { 0.0 };
        }
    }
}

/// Gradient check of every reachable placement/axis combination.
pub fn run_gradcheck(spec: &RunSpec, corrupt_backward: bool, tolerance: f64) -> Result<Vec<GradcheckCase>> {
    let steps = match &spec.task {
        TaskSpec::CharLm { .. } => spec.train.bptt_window,
        TaskSpec::SynthAlign { generator, .. } => generator.max_len,
    };
    let mut errs = Vec::new();
    if spec.model.hidden > GRADCHECK_MAX_HIDDEN {
        errs.push(format!("model.hidden: gradcheck needs <= {GRADCHECK_MAX_HIDDEN}, got {}", spec.model.hidden));
    }
    if steps > GRADCHECK_MAX_STEPS {
        let field = if spec.task.is_lm() { "train.bptt" } else { "task.max_len" };
        errs.push(format!("{field}: gradcheck needs <= {GRADCHECK_MAX_STEPS} steps, got {steps}"));
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let prepared = prepare(spec)?;
    let batch = gradcheck_batch(spec, &prepared)?;
    let mut out = Vec::new();
    for (placement, axis) in reachable_combinations(spec) {
        let mut s = spec.clone();
        s.bn.placement = placement;
        s.bn.axis = axis;
        let mut model = build_model(&s, &prepared, spec.train.seed)?;
        model.corrupt_backward = corrupt_backward;
        let report = model.check_gradients(&batch, 1e-3, tolerance)?;
        let label = if placement == Placement::None {
            "none".to_string()
        } else {
            format!("{}/{}", placement_name(placement), axis_name(axis))
        };
        out.push(GradcheckCase { label, report });
    }
    Ok(out)
}
