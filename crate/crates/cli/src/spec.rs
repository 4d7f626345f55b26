//! Run specifications: a sectioned key-value file, overridable key by key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::Ini;
use rnnorm::data::AlignmentTaskConfig;
use rnnorm::normalization::{Axis, DEFAULT_EPS, DEFAULT_MOMENTUM};
use rnnorm::recurrent::{Activation, BnConfig, CellKind, InitScheme, Placement};
use rnnorm::training::{LrSchedule, SearchSpace, TrainConfig};
use rnnorm::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum TaskSpec {
    CharLm {
        /// Text file; a synthetic corpus of `synth_chars` characters is used
        /// when absent.
        corpus: Option<PathBuf>,
        synth_chars: usize,
        train_fraction: f64,
    },
    SynthAlign {
        generator: AlignmentTaskConfig,
        /// Sequences held out for validation.
        valid: usize,
        /// Training sequences longer than this are dropped.
        max_frames: Option<usize>,
    },
}

impl TaskSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskSpec::CharLm { .. } => "char-lm",
            TaskSpec::SynthAlign { .. } => "synth-align",
        }
    }

    pub fn is_lm(&self) -> bool {
        matches!(self, TaskSpec::CharLm { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub cell: CellKind,
    pub layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    /// Lookup-table width for token inputs.
    pub embedding: usize,
    pub activation: Activation,
    pub init: InitScheme,
    pub embedding_init: InitScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub task: TaskSpec,
    /// Seed of the data generators.
    pub data_seed: u64,
    pub model: ModelSpec,
    pub bn: BnConfig,
    pub train: TrainConfig,
    pub sweep: SearchSpace,
    pub out_dir: Option<PathBuf>,
    pub wall_clock: bool,
}

const KEYS: &[(&str, &[&str])] = &[
    ("task", &["kind", "corpus", "synth_chars", "train_fraction", "seed", "sequences", "features", "classes", "min_len", "max_len", "valid", "max_frames"]),
    ("model", &["cell", "layers", "hidden", "bidirectional", "embedding", "activation", "init", "embedding_init"]),
    ("bn", &["placement", "axis", "eps", "momentum"]),
    ("train", &["lr", "momentum", "batch_size", "bptt", "clip", "schedule", "epochs", "seed", "dropout"]),
    ("sweep", &["trials", "lr_min", "lr_max", "momenta", "batch_sizes"]),
    ("output", &["dir", "wall_clock"]),
];

/// Raw `section.key -> value` pairs before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawSpec {
    entries: BTreeMap<(String, String), String>,
}

impl RawSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Validation(vec![format!("spec syntax: {e}")]))?;
        let mut raw = RawSpec::default();
        let mut errs = Vec::new();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                match section {
                    Some(s) => {
                        raw.entries.insert((s.to_string(), key.to_string()), value.trim().to_string());
                    }
                    None => errs.push(format!("{key}: keys must appear inside a [section]")),
                }
            }
        }
        if errs.is_empty() {
            Ok(raw)
        } else {
            Err(Error::Validation(errs))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(vec![format!("cannot read spec {}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.entries.insert((section.to_string(), key.to_string()), value.into());
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let bad = || Error::Validation(vec![format!("override `{assignment}` is not of the form section.key=value")]);
        let (path, value) = assignment.split_once('=').ok_or_else(bad)?;
        let (section, key) = path.trim().split_once('.').ok_or_else(bad)?;
        if section.is_empty() || key.is_empty() {
            return Err(bad());
        }
        self.set(section, key, value.trim());
        Ok(())
    }
}

struct Reader<'a> {
    raw: &'a RawSpec,
    errs: Vec<String>,
}

impl Reader<'_> {
    fn value<T>(&mut self, section: &str, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> T {
        match self.raw.get(section, key) {
            None => default,
            Some(v) => parse(v).unwrap_or_else(|e| {
                self.errs.push(format!("{section}.{key}: {e}"));
                default
            }),
        }
    }

    fn num<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> T {
        self.value(section, key, default, |v| v.parse::<T>().map_err(|_| format!("`{v}` is not a valid number")))
    }

    fn check(&mut self, ok: bool, field: &str, msg: impl std::fmt::Display) {
        if !ok {
            self.errs.push(format!("{field}: {msg}"));
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

pub fn parse_placement(v: &str) -> std::result::Result<Placement, String> {
    match v {
        "none" => Ok(Placement::None),
        "input-to-hidden" => Ok(Placement::InputToHidden),
        "pre-activation" => Ok(Placement::PreActivation),
        _ => Err(format!("`{v}` is not one of none, input-to-hidden, pre-activation")),
    }
}

pub fn placement_name(p: Placement) -> &'static str {
    match p {
        Placement::None => "none",
        Placement::InputToHidden => "input-to-hidden",
        Placement::PreActivation => "pre-activation",
    }
}

fn parse_axis(v: &str) -> std::result::Result<Axis, String> {
    match v {
        "frame-wise" => Ok(Axis::FrameWise),
        "sequence-wise" => Ok(Axis::SequenceWise),
        _ => Err(format!("`{v}` is not one of frame-wise, sequence-wise")),
    }
}

pub fn axis_name(a: Axis) -> &'static str {
    match a {
        Axis::FrameWise => "frame-wise",
        Axis::SequenceWise => "sequence-wise",
    }
}

fn parse_init(v: &str) -> std::result::Result<InitScheme, String> {
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number"));
    match v.split_once(':') {
        None if v == "glorot" => Ok(InitScheme::Glorot),
        Some(("uniform", r)) => Ok(InitScheme::Uniform(num(r)?)),
        Some(("gaussian", s)) => Ok(InitScheme::Gaussian(num(s)?)),
        _ => Err(format!("`{v}` is not one of glorot, uniform:<range>, gaussian:<std>")),
    }
}

fn init_name(i: InitScheme) -> String {
    match i {
        InitScheme::Glorot => "glorot".into(),
        InitScheme::Uniform(r) => format!("uniform:{r}"),
        InitScheme::Gaussian(s) => format!("gaussian:{s}"),
    }
}

fn parse_schedule(v: &str) -> std::result::Result<LrSchedule, String> {
    let parts: Vec<&str> = v.split(':').collect();
    let err = || format!("`{v}` is not one of constant, halve-after:<epoch>, divide-by:<factor>:<epoch>");
    match parts.as_slice() {
        ["constant"] => Ok(LrSchedule::Constant),
        ["halve-after", k] => Ok(LrSchedule::HalveAfter(k.parse().map_err(|_| err())?)),
        ["divide-by", f, k] => Ok(LrSchedule::DivideBy {
            factor: f.parse().map_err(|_| err())?,
            after: k.parse().map_err(|_| err())?,
        }),
        _ => Err(err()),
    }
}

fn schedule_name(s: LrSchedule) -> String {
    match s {
        LrSchedule::Constant => "constant".into(),
        LrSchedule::HalveAfter(k) => format!("halve-after:{k}"),
        LrSchedule::DivideBy { factor, after } => format!("divide-by:{factor}:{after}"),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| format!("`{}` in list `{v}` is not a valid number", s.trim())))
        .collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunSpec {
    /// Types and validates every entry, reporting all problems at once.
    pub fn from_raw(raw: &RawSpec) -> Result<Self> {
        let mut r = Reader { raw, errs: Vec::new() };
        for (section, key) in raw.entries.keys() {
            match KEYS.iter().find(|(s, _)| s == section) {
                None => r.errs.push(format!("[{section}]: unknown section")),
                Some((_, keys)) if !keys.contains(&key.as_str()) => r.errs.push(format!("{section}.{key}: unknown key")),
                _ => {}
            }
        }

        let kind = r.value("task", "kind", "synth-align".to_string(), |v| match v {
            "char-lm" | "synth-align" => Ok(v.to_string()),
            _ => Err(format!("`{v}` is not one of char-lm, synth-align")),
        });
        let data_seed = r.num("task", "seed", 1u64);
        let task = if kind == "char-lm" {
            let corpus = raw.get("task", "corpus").filter(|s| !s.is_empty()).map(PathBuf::from);
            let synth_chars = r.num("task", "synth_chars", 200_000usize);
            let train_fraction = r.num("task", "train_fraction", 0.9f64);
            r.check(train_fraction > 0.0 && train_fraction < 1.0, "task.train_fraction", format!("must lie in (0,1), got {train_fraction}"));
            r.check(corpus.is_some() || synth_chars >= 2, "task.synth_chars", "must be >= 2");
            TaskSpec::CharLm { corpus, synth_chars, train_fraction }
        } else {
            let generator = AlignmentTaskConfig {
                sequences: r.num("task", "sequences", 400usize),
                features: r.num("task", "features", 8usize),
                classes: r.num("task", "classes", 6usize),
                min_len: r.num("task", "min_len", 10usize),
                max_len: r.num("task", "max_len", 30usize),
            };
            let valid = r.num("task", "valid", generator.sequences / 10);
            let max_frames = r.value("task", "max_frames", None, |v| {
                if v == "none" {
                    Ok(None)
                } else {
                    v.parse::<usize>().map(Some).map_err(|_| format!("`{v}` is neither `none` nor a positive integer"))
                }
            });
            r.check(generator.features >= 1, "task.features", "must be >= 1");
            r.check(generator.classes >= 2, "task.classes", "must be >= 2");
            r.check(generator.min_len >= 1, "task.min_len", "must be >= 1");
            r.check(generator.min_len <= generator.max_len, "task.max_len", format!("must be >= task.min_len ({})", generator.min_len));
            r.check(
                valid >= 1 && valid < generator.sequences,
                "task.valid",
                format!("must lie in [1, task.sequences) = [1, {}), got {valid}", generator.sequences),
            );
            if let Some(cap) = max_frames {
                r.check(cap >= generator.min_len, "task.max_frames", format!("{cap} would drop every sequence (task.min_len = {})", generator.min_len));
            }
            TaskSpec::SynthAlign { generator, valid, max_frames }
        };

        let model = ModelSpec {
            cell: r.value("model", "cell", CellKind::Lstm, |v| match v {
                "rnn" => Ok(CellKind::Rnn),
                "lstm" => Ok(CellKind::Lstm),
                _ => Err(format!("`{v}` is not one of rnn, lstm")),
            }),
            layers: r.num("model", "layers", 1usize),
            hidden: r.num("model", "hidden", 32usize),
            bidirectional: r.value("model", "bidirectional", false, parse_bool),
            embedding: r.num("model", "embedding", 32usize),
            activation: r.value("model", "activation", Activation::Tanh, |v| match v {
                "tanh" => Ok(Activation::Tanh),
                "sigmoid" => Ok(Activation::Sigmoid),
                _ => Err(format!("`{v}` is not one of tanh, sigmoid")),
            }),
            init: r.value("model", "init", InitScheme::Glorot, parse_init),
            embedding_init: r.value("model", "embedding_init", InitScheme::Gaussian(1.0), parse_init),
        };
        r.check(model.embedding >= 1, "model.embedding", "must be >= 1");
        for (field, init) in [("model.init", model.init), ("model.embedding_init", model.embedding_init)] {
            match init {
                InitScheme::Uniform(x) | InitScheme::Gaussian(x) => {
                    r.check(x > 0.0 && x.is_finite(), field, format!("scale must be > 0, got {x}"))
                }
                InitScheme::Glorot => {}
            }
        }

        let default_axis = if task.is_lm() { Axis::FrameWise } else { Axis::SequenceWise };
        let bn = BnConfig {
            placement: r.value("bn", "placement", Placement::None, parse_placement),
            axis: r.value("bn", "axis", default_axis, parse_axis),
            eps: r.num("bn", "eps", DEFAULT_EPS),
            momentum: r.num("bn", "momentum", DEFAULT_MOMENTUM),
        };
        if task.is_lm() {
            r.check(
                bn.axis != Axis::SequenceWise,
                "bn.axis",
                "sequence-wise statistics need the whole sequence; task.kind = char-lm predicts the next symbol without future frames",
            );
            r.check(!model.bidirectional, "model.bidirectional", "a backward pass would see the symbols being predicted in task.kind = char-lm");
        }

        let train = TrainConfig {
            learning_rate: r.num("train", "lr", 0.1f64),
            momentum: r.num("train", "momentum", if task.is_lm() { 0.0 } else { 0.9 }),
            batch_size: r.num("train", "batch_size", 32usize),
            bptt_window: r.num("train", "bptt", 20usize),
            grad_norm_threshold: r.value("train", "clip", None, |v| {
                if v == "none" {
                    Ok(None)
                } else {
                    v.parse::<f64>().map(Some).map_err(|_| format!("`{v}` is neither `none` nor a number"))
                }
            }),
            schedule: r.value("train", "schedule", LrSchedule::Constant, parse_schedule),
            epochs: r.num("train", "epochs", 10usize),
            seed: r.num("train", "seed", 0u64),
            dropout: r.num("train", "dropout", 0.0f64),
        };
        r.errs.extend(train.violations());

        let defaults = SearchSpace::default();
        let sweep = SearchSpace {
            lr_range: (r.num("sweep", "lr_min", defaults.lr_range.0), r.num("sweep", "lr_max", defaults.lr_range.1)),
            momenta: r.value("sweep", "momenta", defaults.momenta.clone(), parse_list),
            batch_sizes: r.value("sweep", "batch_sizes", defaults.batch_sizes.clone(), parse_list),
            trials: r.num("sweep", "trials", defaults.trials),
        };
        if let Err(Error::Validation(v)) = sweep.validate() {
            r.errs.extend(v);
        }

        let out_dir = raw.get("output", "dir").filter(|s| !s.is_empty()).map(PathBuf::from);
        let wall_clock = r.value("output", "wall_clock", false, parse_bool);

        let spec = RunSpec { task, data_seed, model, bn, train, sweep, out_dir, wall_clock };
        // structural checks shared with the model itself
        if let Err(Error::Validation(v)) = spec.stack_config(2, 2).validate() {
            r.errs.extend(v.into_iter().filter(|m| !m.contains("classes") && !m.starts_with("train.")));
        }
        if r.errs.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Validation(r.errs))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawSpec::parse(text)?)
    }

    /// Model shape for a given input vocabulary/feature count and class
    /// count.
    pub fn stack_config(&self, input: usize, classes: usize) -> rnnorm::recurrent::StackConfig {
        use rnnorm::recurrent::{InputSpec, StackConfig};
        StackConfig {
            cell: self.model.cell,
            input: if self.task.is_lm() {
                InputSpec::Tokens { vocab: input, embedding: self.model.embedding }
            } else {
                InputSpec::Features(input)
            },
            layers: self.model.layers,
            hidden: self.model.hidden,
            bidirectional: self.model.bidirectional,
            classes,
            activation: self.model.activation,
            bn: self.bn,
            dropout: self.train.dropout,
        }
    }

    /// Canonical text form; parsing it yields an equal spec.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[task]\nkind = {}\nseed = {}", self.task.kind(), self.data_seed);
        match &self.task {
            TaskSpec::CharLm { corpus, synth_chars, train_fraction } => {
                if let Some(c) = corpus {
                    let _ = writeln!(s, "corpus = {}", c.display());
                }
                let _ = writeln!(s, "synth_chars = {synth_chars}\ntrain_fraction = {train_fraction}");
            }
            TaskSpec::SynthAlign { generator: g, valid, max_frames } => {
                let _ = writeln!(
                    s,
                    "sequences = {}\nfeatures = {}\nclasses = {}\nmin_len = {}\nmax_len = {}\nvalid = {valid}\nmax_frames = {}",
                    g.sequences,
                    g.features,
                    g.classes,
                    g.min_len,
                    g.max_len,
                    max_frames.map_or("none".to_string(), |c| c.to_string())
                );
            }
        }
        let m = &self.model;
        let _ = writeln!(
            s,
            "\n[model]\ncell = {}\nlayers = {}\nhidden = {}\nbidirectional = {}\nembedding = {}\nactivation = {}\ninit = {}\nembedding_init = {}",
            match m.cell {
                CellKind::Rnn => "rnn",
                CellKind::Lstm => "lstm",
            },
            m.layers,
            m.hidden,
            m.bidirectional,
            m.embedding,
            match m.activation {
                Activation::Tanh => "tanh",
                Activation::Sigmoid => "sigmoid",
            },
            init_name(m.init),
            init_name(m.embedding_init)
        );
        let _ = writeln!(
            s,
            "\n[bn]\nplacement = {}\naxis = {}\neps = {}\nmomentum = {}",
            placement_name(self.bn.placement),
            axis_name(self.bn.axis),
            self.bn.eps,
            self.bn.momentum
        );
        let t = &self.train;
        let _ = writeln!(
            s,
            "\n[train]\nlr = {}\nmomentum = {}\nbatch_size = {}\nbptt = {}\nclip = {}\nschedule = {}\nepochs = {}\nseed = {}\ndropout = {}",
            t.learning_rate,
            t.momentum,
            t.batch_size,
            t.bptt_window,
            t.grad_norm_threshold.map_or("none".to_string(), |c| c.to_string()),
            schedule_name(t.schedule),
            t.epochs,
            t.seed,
            t.dropout
        );
        let w = &self.sweep;
        let _ = writeln!(
            s,
            "\n[sweep]\ntrials = {}\nlr_min = {}\nlr_max = {}\nmomenta = {}\nbatch_sizes = {}",
            w.trials,
            w.lr_range.0,
            w.lr_range.1,
            join(&w.momenta),
            join(&w.batch_sizes)
        );
        let _ = writeln!(s, "\n[output]");
        if let Some(d) = &self.out_dir {
            let _ = writeln!(s, "dir = {}", d.display());
        }
        let _ = writeln!(s, "wall_clock = {}", self.wall_clock);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn errors(text: &str) -> Vec<String> {
        match RunSpec::parse(text) {
            Err(Error::Validation(v)) => v,
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn empty_spec_uses_defaults() {
        let s = RunSpec::parse("").unwrap();
        assert_eq!(s.task.kind(), "synth-align");
        assert_eq!(s.bn.placement, Placement::None);
    }

    #[test]
    fn text_form_round_trips() {
        let s = RunSpec::parse(
            "[task]\nkind = char-lm\n[model]\ncell = rnn\ninit = uniform:0.1\n[bn]\nplacement = pre-activation\n[train]\nclip = 5\nschedule = divide-by:1.2:6\n",
        )
        .unwrap();
        assert_eq!(RunSpec::parse(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn char_lm_rejects_sequence_wise_and_bidirectional_together() {
        let e = errors("[task]\nkind = char-lm\n[model]\nbidirectional = true\n[bn]\naxis = sequence-wise\n");
        assert!(e.iter().any(|m| m.starts_with("bn.axis")), "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("model.bidirectional")), "{e:?}");
    }

    #[test]
    fn every_problem_is_reported() {
        let e = errors("[train]\nlr = -1\nmomentum = 1.5\nbatch_size = x\n[model]\nhidden = 0\nfoo = 1\n[extra]\na = b\n");
        for field in ["train.lr", "train.momentum", "train.batch_size", "model.foo", "[extra]"] {
            assert!(e.iter().any(|m| m.starts_with(field)), "{field} missing from {e:?}");
        }
        assert!(e.iter().any(|m| m.contains("hidden")), "{e:?}");
    }

    #[test]
    fn pre_activation_needs_frame_wise() {
        let e = errors("[bn]\nplacement = pre-activation\naxis = sequence-wise\n");
        assert!(!e.is_empty());
    }

    #[test]
    fn overrides() {
        let mut raw = RawSpec::parse("[train]\nlr = 0.5\n").unwrap();
        raw.apply_override("train.lr=0.25").unwrap();
        raw.apply_override("bn.placement = input-to-hidden").unwrap();
        let s = RunSpec::from_raw(&raw).unwrap();
        assert_eq!(s.train.learning_rate, 0.25);
        assert_eq!(s.bn.placement, Placement::InputToHidden);
        assert!(raw.apply_override("nodot=1").is_err());
    }
}
