//! Named run specifications shipped with the binary.

const APPENDIX_A_BASELINE: &str = "\
; character-level language model: 250-wide lookup table, three simple
; recurrent layers of 250, softmax over the character set
[task]
kind = char-lm
synth_chars = 500000
train_fraction = 0.9

[model]
cell = rnn
layers = 3
hidden = 250
embedding = 250
activation = tanh
init = glorot
embedding_init = gaussian:1

[bn]
placement = none
axis = frame-wise

[train]
lr = 0.00078
momentum = 0.5
batch_size = 64
bptt = 100
clip = none
schedule = constant
epochs = 20

[sweep]
trials = 26
lr_min = 0.0001
lr_max = 1
momenta = 0.5,0.8,0.9,0.95,0.995
batch_sizes = 32,64,128
";

const PTB_SMALL: &str = "\
; two LSTM layers of 200; desk scale: --set model.hidden=64 --set task.synth_chars=200000
[task]
kind = char-lm
synth_chars = 1000000
train_fraction = 0.9

[model]
cell = lstm
layers = 2
hidden = 200
embedding = 200
init = uniform:0.1
embedding_init = uniform:0.1

[bn]
placement = none
axis = frame-wise

[train]
lr = 1
momentum = 0
batch_size = 32
bptt = 20
clip = 10
schedule = halve-after:6
epochs = 15
dropout = 0
";

const PTB_MEDIUM: &str = "\
; two LSTM layers of 650; desk scale: --set model.hidden=128 --set train.epochs=10
[task]
kind = char-lm
synth_chars = 1000000
train_fraction = 0.9

[model]
cell = lstm
layers = 2
hidden = 650
embedding = 650
init = uniform:0.05
embedding_init = uniform:0.05

[bn]
placement = none
axis = frame-wise

[train]
lr = 1
momentum = 0
batch_size = 32
bptt = 35
clip = 5
schedule = divide-by:1.2:6
epochs = 40
dropout = 0.5
";

const PTB_LARGE: &str = "\
; two LSTM layers of 1500; desk scale: --set model.hidden=256 --set train.epochs=10
[task]
kind = char-lm
synth_chars = 1000000
train_fraction = 0.9

[model]
cell = lstm
layers = 2
hidden = 1500
embedding = 1500
init = uniform:0.04
embedding_init = uniform:0.04

[bn]
placement = none
axis = frame-wise

[train]
lr = 1
momentum = 0
batch_size = 32
bptt = 35
clip = 5
schedule = divide-by:1.15:15
epochs = 55
dropout = 0.5
";

const WSJ_LIKE: &str = "\
; five bidirectional LSTM layers of 250 on the synthetic alignment task
[task]
kind = synth-align
sequences = 2000
features = 8
classes = 6
min_len = 10
max_len = 40
valid = 200

[model]
cell = lstm
layers = 5
hidden = 250
bidirectional = true
init = glorot

[bn]
placement = input-to-hidden
axis = sequence-wise

[train]
lr = 0.0001
momentum = 0.9
batch_size = 24
clip = none
schedule = constant
epochs = 20
";

/// `(name, spec text)` of every preset.
pub fn presets() -> Vec<(&'static str, String)> {
    let bn = |base: &str, placement: &str, axis: &str| {
        base.replace("placement = none", &format!("placement = {placement}"))
            .replace("axis = frame-wise", &format!("axis = {axis}"))
    };
    vec![
        ("appendix-a-baseline", APPENDIX_A_BASELINE.to_string()),
        ("appendix-a-bn", bn(APPENDIX_A_BASELINE, "pre-activation", "frame-wise")),
        ("ptb-small", PTB_SMALL.to_string()),
        ("ptb-medium", PTB_MEDIUM.to_string()),
        ("ptb-large", PTB_LARGE.to_string()),
        ("wsj-like", WSJ_LIKE.to_string()),
        ("wsj-like-baseline", WSJ_LIKE.replace("placement = input-to-hidden", "placement = none")),
    ]
}

pub fn preset(name: &str) -> Option<String> {
    presets().into_iter().find(|(n, _)| *n == name).map(|(_, t)| t)
}

pub fn preset_names() -> Vec<&'static str> {
    presets().into_iter().map(|(n, _)| n).collect()
}
