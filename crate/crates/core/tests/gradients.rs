use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnorm::data::{make_padded_batches, AlignedSequence, SequenceBatch};
use rnnorm::normalization::Axis;
use rnnorm::recurrent::{Activation, BnConfig, CellKind, InitScheme, InputSpec, Placement, RecurrentStack, StackConfig};
use rnnorm::Tensor;

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-3;

fn batch(lengths: &[usize], f: usize, classes: usize, seed: u64) -> SequenceBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs: Vec<AlignedSequence> = lengths
        .iter()
        .map(|&len| AlignedSequence {
            frames: Tensor::new(vec![len, f], (0..len * f).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap(),
            labels: (0..len).map(|_| rng.gen_range(0..classes)).collect(),
        })
        .collect();
    make_padded_batches(&seqs, lengths.len(), None).unwrap().batches.remove(0)
}

fn stack(cell: CellKind, placement: Placement, axis: Axis, bidirectional: bool, layers: usize) -> RecurrentStack {
    let cfg = StackConfig {
        cell,
        input: InputSpec::Features(3),
        layers,
        hidden: 5,
        bidirectional,
        classes: 4,
        activation: Activation::Tanh,
        bn: BnConfig { placement, axis, ..BnConfig::default() },
        dropout: 0.0,
    };
    let mut s = RecurrentStack::new(cfg).unwrap();
    s.init_parameters(InitScheme::Uniform(0.5), InitScheme::Gaussian(1.0), 7);
    // non-trivial gamma/beta and peepholes
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for bn in s.bn_layers_mut() {
        for v in bn.gamma.value.data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in bn.beta.value.data_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    s
}

fn combos() -> Vec<(CellKind, Placement, Axis)> {
    let mut out = Vec::new();
    for cell in [CellKind::Rnn, CellKind::Lstm] {
        out.push((cell, Placement::None, Axis::SequenceWise));
        out.push((cell, Placement::InputToHidden, Axis::FrameWise));
        out.push((cell, Placement::InputToHidden, Axis::SequenceWise));
        out.push((cell, Placement::PreActivation, Axis::FrameWise));
    }
    out
}

#[test]
fn every_combination_matches_finite_differences() {
    for seed in 0..3 {
        let b = batch(&[4, 4, 4], 3, 4, seed);
        for (cell, placement, axis) in combos() {
            let mut s = stack(cell, placement, axis, false, 1);
            let report = s.check_gradients(&b, STEP, TOL).unwrap();
            assert!(
                report.passed(),
                "{cell:?}/{placement:?}/{axis:?} seed {seed}: max rel error {:e} ({:?})",
                report.max_rel_error(),
                report.failures().map(|p| &p.name).collect::<Vec<_>>()
            );
        }
    }
}

// Padding leaves frame-wise layers with one or two live rows at late steps,
// where normalization is nearly flat in some directions and very steep in
// others; finite differences there bottom out around 1e-5.
#[test]
fn padded_batches_match_finite_differences() {
    let b = batch(&[4, 3, 2], 3, 4, 5);
    for (cell, placement, axis) in combos() {
        let mut s = stack(cell, placement, axis, false, 1);
        let report = s.check_gradients(&b, 1e-4, 1e-4).unwrap();
        assert!(report.passed(), "{cell:?}/{placement:?}/{axis:?}: {:e}", report.max_rel_error());
    }
}

#[test]
fn stacked_bidirectional_gradients() {
    let b = batch(&[4, 4, 4], 3, 4, 8);
    for (cell, placement, axis) in [
        (CellKind::Lstm, Placement::InputToHidden, Axis::SequenceWise),
        (CellKind::Rnn, Placement::PreActivation, Axis::FrameWise),
        (CellKind::Lstm, Placement::None, Axis::SequenceWise),
    ] {
        let mut s = stack(cell, placement, axis, true, 2);
        let report = s.check_gradients(&b, STEP, TOL).unwrap();
        assert!(report.passed(), "{cell:?}/{placement:?}: {:e}", report.max_rel_error());
    }
}

#[test]
fn corrupted_backward_is_detected() {
    let b = batch(&[4, 4, 4], 3, 4, 5);
    for placement in [Placement::InputToHidden, Placement::None] {
        let mut s = stack(CellKind::Lstm, placement, Axis::SequenceWise, false, 1);
        s.corrupt_backward = true;
        let report = s.check_gradients(&b, STEP, TOL).unwrap();
        assert!(report.max_rel_error() > 100.0 * TOL);
    }
}
