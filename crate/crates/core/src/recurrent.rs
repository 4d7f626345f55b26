//! Vanilla RNN and LSTM cells, bidirectional and stacked composition.
//!
//! Hidden states are row vectors: `h_t = φ(h_{t-1}·W_h + x_t·W_x)` with
//! `W_h: [H×H]` and `W_x: [F×H]`. Batch normalization can be placed
//!
//! * nowhere ([`Placement::None`]), in which case the cell carries biases;
//! * on the input-to-hidden product only ([`Placement::InputToHidden`]):
//!   `φ(h·W_h + BN(x·W_x))`;
//! * around the whole pre-activation ([`Placement::PreActivation`]):
//!   `φ(BN(h·W_h + x·W_x))`, which needs per-step statistics.
//!
//! When BN covers a term its `beta` plays the role of the bias, so no
//! separate bias parameter exists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{check_gradients, GradCheckReport, Gradients, Graph, Parameter, Parameterized, Var};
use crate::data::{BatchInputs, SequenceBatch};
use crate::error::{Error, Result};
use crate::normalization::{Axis, BatchNormLayer, Mode, PendingUpdate};
use crate::tensor::{Tensor, Unary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Rnn,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Tanh => Unary::Tanh,
            Activation::Sigmoid => Unary::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    None,
    InputToHidden,
    PreActivation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub placement: Placement,
    pub axis: Axis,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        BnConfig {
            placement: Placement::None,
            axis: Axis::SequenceWise,
            eps: crate::normalization::DEFAULT_EPS,
            momentum: crate::normalization::DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Glorot,
    /// Uniform in `±r`.
    Uniform(f64),
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
}

impl InitScheme {
    fn sample(self, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            InitScheme::Glorot => {
                let b = glorot_bound(fan_in, fan_out);
                rng.gen_range(-b..=b)
            }
            InitScheme::Uniform(r) => rng.gen_range(-r..=r),
            InitScheme::Gaussian(s) => s * rng.sample::<f64, _>(StandardNormal),
        }
    }

    fn fill(self, t: &mut Tensor, rng: &mut ChaCha8Rng) {
        let (fan_in, fan_out) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (*n, *n),
            s => (s.iter().product(), s.iter().product()),
        };
        for v in t.data_mut() {
            *v = self.sample(rng, fan_in, fan_out);
        }
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// What the first layer reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    Features(usize),
    Tokens { vocab: usize, embedding: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub cell: CellKind,
    pub input: InputSpec,
    pub layers: usize,
    pub hidden: usize,
    pub bidirectional: bool,
    pub classes: usize,
    pub activation: Activation,
    pub bn: BnConfig,
    pub dropout: f64,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.layers == 0 {
            errs.push("model.layers must be >= 1".to_string());
        }
        if self.hidden == 0 {
            errs.push("model.hidden must be >= 1".to_string());
        }
        if self.classes < 2 {
            errs.push("model.classes must be >= 2".to_string());
        }
        match self.input {
            InputSpec::Features(0) => errs.push("input feature width must be >= 1".to_string()),
            InputSpec::Tokens { vocab, embedding } if vocab == 0 || embedding == 0 => {
                errs.push("vocabulary and embedding sizes must be >= 1".to_string())
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("train.dropout must lie in [0,1), got {}", self.dropout));
        }
        if self.bn.placement != Placement::None {
            if !(self.bn.eps > 0.0) {
                errs.push(format!("bn.eps must be > 0, got {}", self.bn.eps));
            }
            if !(self.bn.momentum > 0.0 && self.bn.momentum < 1.0) {
                errs.push(format!("bn.momentum must lie in (0,1), got {}", self.bn.momentum));
            }
            if self.bn.placement == Placement::PreActivation && self.bn.axis == Axis::SequenceWise {
                errs.push(
                    "bn.axis: pre-activation placement needs frame-wise statistics; the recurrent \
                     pre-activation is not available for the whole sequence in advance"
                        .to_string(),
                );
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            match self.input {
                InputSpec::Features(f) => f,
                InputSpec::Tokens { embedding, .. } => embedding,
            }
        } else {
            self.output_width()
        }
    }

    /// Width of every layer's output: `2H` for bidirectional layers.
    pub fn output_width(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }
}

/// BN updates recorded while building a graph, keyed by layer name.
type Pending = Vec<(String, PendingUpdate)>;

fn rows_mask(mask: Option<&[f64]>, rows: usize, width: usize) -> Option<Tensor> {
    mask.map(|m| {
        let mut data = Vec::with_capacity(rows * width);
        for &v in m {
            data.extend(std::iter::repeat(v).take(width));
        }
        Tensor::new(vec![rows, width], data).expect("mask shape")
    })
}

fn apply_bn(
    g: &mut Graph,
    bn: &BatchNormLayer,
    x: Var,
    mask: Option<&[f64]>,
    mode: Mode,
    t: Option<usize>,
    pending: &mut Pending,
) -> Result<Var> {
    let (y, p) = bn.node(g, x, mask.map(<[f64]>::to_vec), mode, t)?;
    if let Some(p) = p {
        pending.push((bn.name.clone(), p));
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnCell {
    pub name: String,
    pub w_h: Parameter,
    pub w_x: Parameter,
    pub bias: Option<Parameter>,
    pub activation: Activation,
    pub placement: Placement,
    pub bn: Option<BatchNormLayer>,
}

const GATES: [&str; 4] = ["i", "f", "c", "o"];
const GATE_I: usize = 0;
const GATE_F: usize = 1;
const GATE_C: usize = 2;
const GATE_O: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub name: String,
    /// Recurrent weights for the input, forget, candidate and output gates.
    pub w_h: [Parameter; 4],
    /// Input weights in the same gate order.
    pub w_x: [Parameter; 4],
    /// Diagonal peephole from the new cell state into the output gate.
    pub w_co: Parameter,
    pub bias: Option<[Parameter; 4]>,
    pub placement: Placement,
    /// One layer per gate when placement is not `None`.
    pub bn: Vec<BatchNormLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Rnn(RnnCell),
    Lstm(LstmCell),
}

/// Graph handles for a cell's recurrent parameters, bound once per graph.
struct CellVars {
    w_h: Vec<Var>,
    w_co: Option<Var>,
}

impl RnnCell {
    pub fn new(name: &str, input: usize, hidden: usize, activation: Activation, bn: BnConfig) -> Result<Self> {
        let bn_layer = match bn.placement {
            Placement::None => None,
            _ => Some(BatchNormLayer::new(format!("{name}.bn"), hidden, bn.axis, bn.eps, bn.momentum)?),
        };
        Ok(RnnCell {
            name: name.to_string(),
            w_h: Parameter::new(format!("{name}.W_h"), Tensor::zeros(&[hidden, hidden])),
            w_x: Parameter::new(format!("{name}.W_x"), Tensor::zeros(&[input, hidden])),
            bias: (bn.placement == Placement::None)
                .then(|| Parameter::new(format!("{name}.b"), Tensor::zeros(&[hidden]))),
            activation,
            placement: bn.placement,
            bn: bn_layer,
        })
    }

    fn bn_layer(&self) -> Result<&BatchNormLayer> {
        self.bn.as_ref().ok_or_else(|| {
            Error::Configuration(format!("{}: placement {:?} requires a batch-norm layer", self.name, self.placement))
        })
    }

    /// One time step on concrete tensors: returns `h_t`.
    pub fn step(&mut self, h_prev: &Tensor, x_t: &Tensor, mode: Mode, t: Option<usize>) -> Result<Tensor> {
        let (h, _, pending, g) = Cell::Rnn(self.clone()).single_step(h_prev, None, x_t, mode, t)?;
        if let Some(bn) = self.bn.as_mut() {
            for (_, p) in pending {
                bn.commit(&g, p)?;
            }
        }
        Ok(h)
    }
}

impl LstmCell {
    pub fn new(name: &str, input: usize, hidden: usize, bn: BnConfig) -> Result<Self> {
        let mk = |prefix: &str, shape: &[usize]| -> [Parameter; 4] {
            GATES.map(|g| Parameter::new(format!("{name}.{prefix}{g}"), Tensor::zeros(shape)))
        };
        let bn_layers = match bn.placement {
            Placement::None => Vec::new(),
            _ => GATES
                .iter()
                .map(|g| BatchNormLayer::new(format!("{name}.bn_{g}"), hidden, bn.axis, bn.eps, bn.momentum))
                .collect::<Result<_>>()?,
        };
        Ok(LstmCell {
            name: name.to_string(),
            w_h: mk("W_h", &[hidden, hidden]),
            w_x: mk("W_x", &[input, hidden]),
            w_co: Parameter::new(format!("{name}.W_co"), Tensor::zeros(&[hidden])),
            bias: (bn.placement == Placement::None).then(|| mk("b_", &[hidden])),
            placement: bn.placement,
            bn: bn_layers,
        })
    }

    fn gate_bn(&self, gate: usize) -> Result<&BatchNormLayer> {
        self.bn.get(gate).ok_or_else(|| {
            Error::Configuration(format!("{}: placement {:?} requires per-gate batch norm", self.name, self.placement))
        })
    }

    /// One time step on concrete tensors: returns `(h_t, c_t)`.
    pub fn step(
        &mut self,
        h_prev: &Tensor,
        c_prev: &Tensor,
        x_t: &Tensor,
        mode: Mode,
        t: Option<usize>,
    ) -> Result<(Tensor, Tensor)> {
        let (h, c, pending, g) = Cell::Lstm(self.clone()).single_step(h_prev, Some(c_prev), x_t, mode, t)?;
        for (name, p) in pending {
            if let Some(bn) = self.bn.iter_mut().find(|b| b.name == name) {
                bn.commit(&g, p)?;
            }
        }
        Ok((h, c.expect("lstm cell state")))
    }
}

impl Cell {
    pub fn hidden(&self) -> usize {
        match self {
            Cell::Rnn(c) => c.w_h.value.shape()[0],
            Cell::Lstm(c) => c.w_h[0].value.shape()[0],
        }
    }

    pub fn placement(&self) -> Placement {
        match self {
            Cell::Rnn(c) => c.placement,
            Cell::Lstm(c) => c.placement,
        }
    }

    pub fn bn_layers(&self) -> Vec<&BatchNormLayer> {
        match self {
            Cell::Rnn(c) => c.bn.iter().collect(),
            Cell::Lstm(c) => c.bn.iter().collect(),
        }
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        match self {
            Cell::Rnn(c) => c.bn.iter_mut().collect(),
            Cell::Lstm(c) => c.bn.iter_mut().collect(),
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        match self {
            Cell::Rnn(c) => {
                out.push(&c.w_x);
                out.push(&c.w_h);
                out.extend(c.bias.iter());
            }
            Cell::Lstm(c) => {
                out.extend(c.w_x.iter());
                out.extend(c.w_h.iter());
                out.push(&c.w_co);
                if let Some(b) = &c.bias {
                    out.extend(b.iter());
                }
            }
        }
        for bn in self.bn_layers() {
            out.extend(bn.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        match self {
            Cell::Rnn(c) => {
                out.push(&mut c.w_x);
                out.push(&mut c.w_h);
                out.extend(c.bias.iter_mut());
                out.extend(c.bn.iter_mut().flat_map(|b| b.parameters_mut()));
            }
            Cell::Lstm(c) => {
                out.extend(c.w_x.iter_mut());
                out.extend(c.w_h.iter_mut());
                out.push(&mut c.w_co);
                if let Some(b) = &mut c.bias {
                    out.extend(b.iter_mut());
                }
                out.extend(c.bn.iter_mut().flat_map(|b| b.parameters_mut()));
            }
        }
        out
    }

    fn init(&mut self, scheme: InitScheme, rng: &mut ChaCha8Rng) {
        match self {
            Cell::Rnn(c) => {
                scheme.fill(&mut c.w_x.value, rng);
                scheme.fill(&mut c.w_h.value, rng);
            }
            Cell::Lstm(c) => {
                for p in c.w_x.iter_mut().chain(c.w_h.iter_mut()) {
                    scheme.fill(&mut p.value, rng);
                }
                // the diagonal peephole has no fan-in/fan-out; it starts at
                // zero unless the scheme is a plain uniform/Gaussian draw
                match scheme {
                    InitScheme::Glorot => c.w_co.value = Tensor::zeros(c.w_co.value.shape()),
                    s => s.fill(&mut c.w_co.value, rng),
                }
            }
        }
    }

    fn bind(&self, g: &mut Graph) -> CellVars {
        match self {
            Cell::Rnn(c) => CellVars { w_h: vec![g.param(c.w_h.name.clone(), &c.w_h.value)], w_co: None },
            Cell::Lstm(c) => CellVars {
                w_h: c.w_h.iter().map(|p| g.param(p.name.clone(), &p.value)).collect(),
                w_co: Some(g.param(c.w_co.name.clone(), &c.w_co.value)),
            },
        }
    }

    /// Input projections for every frame at once, one `[N×H]` node per gate.
    /// Biases (placement `None`) and sequence-wise input-to-hidden BN are
    /// applied here; frame-wise BN is applied per step.
    fn project(&self, g: &mut Graph, x_all: Var, mask: Option<&[f64]>, mode: Mode, pending: &mut Pending) -> Result<Vec<Var>> {
        let (w_x, bias): (Vec<&Parameter>, Vec<&Parameter>) = match self {
            Cell::Rnn(c) => (vec![&c.w_x], c.bias.iter().collect()),
            Cell::Lstm(c) => (c.w_x.iter().collect(), c.bias.iter().flat_map(|b| b.iter()).collect()),
        };
        let mut out = Vec::with_capacity(w_x.len());
        for (gate, w) in w_x.iter().enumerate() {
            let wv = g.param(w.name.clone(), &w.value);
            let mut p = g.matmul(x_all, wv);
            match self.placement() {
                Placement::None => {
                    let b = bias[gate];
                    let bv = g.param(b.name.clone(), &b.value);
                    p = g.add(p, bv);
                }
                Placement::InputToHidden => {
                    let bn = self.gate_bn(gate)?;
                    if bn.axis() == Axis::SequenceWise {
                        p = apply_bn(g, bn, p, mask, mode, None, pending)?;
                    }
                }
                Placement::PreActivation => {}
            }
            out.push(p);
        }
        Ok(out)
    }

    fn gate_bn(&self, gate: usize) -> Result<&BatchNormLayer> {
        match self {
            Cell::Rnn(c) => c.bn_layer(),
            Cell::Lstm(c) => c.gate_bn(gate),
        }
    }

    /// `h·W_h + x_proj`, with frame-wise input BN or pre-activation BN as the
    /// placement requires.
    #[allow(clippy::too_many_arguments)]
    fn gate_preactivation(
        &self,
        g: &mut Graph,
        gate: usize,
        h: Var,
        w_h: Var,
        x_proj: Var,
        peephole: Option<(Var, Var)>,
        mask: Option<&[f64]>,
        mode: Mode,
        t: usize,
        pending: &mut Pending,
    ) -> Result<Var> {
        let mut xp = x_proj;
        if self.placement() == Placement::InputToHidden {
            let bn = self.gate_bn(gate)?;
            if bn.axis() == Axis::FrameWise {
                xp = apply_bn(g, bn, xp, mask, mode, Some(t), pending)?;
            }
        }
        let hw = g.matmul(h, w_h);
        let mut pre = g.add(hw, xp);
        if let Some((c, w_co)) = peephole {
            let pc = g.mul(c, w_co);
            pre = g.add(pre, pc);
        }
        if self.placement() == Placement::PreActivation {
            let bn = self.gate_bn(gate)?;
            pre = apply_bn(g, bn, pre, mask, mode, Some(t), pending)?;
        }
        Ok(pre)
    }

    /// One recurrent step given the projected inputs for this step.
    #[allow(clippy::too_many_arguments)]
    fn step_node(
        &self,
        g: &mut Graph,
        vars: &CellVars,
        x_proj: &[Var],
        h: Var,
        c: Option<Var>,
        mask: Option<&[f64]>,
        mode: Mode,
        t: usize,
        pending: &mut Pending,
    ) -> Result<(Var, Option<Var>)> {
        let width = self.hidden();
        let mask_tensor = |m: Option<&[f64]>| rows_mask(m, m.map_or(0, <[f64]>::len), width);
        match self {
            Cell::Rnn(cell) => {
                let pre = self.gate_preactivation(g, 0, h, vars.w_h[0], x_proj[0], None, mask, mode, t, pending)?;
                let mut h_new = g.unary(cell.activation.unary(), pre);
                if let Some(mt) = mask_tensor(mask) {
                    h_new = g.mul_const(h_new, mt);
                }
                Ok((h_new, None))
            }
            Cell::Lstm(_) => {
                let c_prev = c.expect("lstm needs a cell state");
                let mut pre = [h; 3];
                for gate in [GATE_I, GATE_F, GATE_C] {
                    pre[gate] = self.gate_preactivation(
                        g, gate, h, vars.w_h[gate], x_proj[gate], None, mask, mode, t, pending,
                    )?;
                }
                let i = g.sigmoid(pre[GATE_I]);
                let f = g.sigmoid(pre[GATE_F]);
                let cand = g.tanh(pre[GATE_C]);
                let keep = g.mul(f, c_prev);
                let write = g.mul(i, cand);
                let mut c_new = g.add(keep, write);
                if let Some(mt) = mask_tensor(mask) {
                    c_new = g.mul_const(c_new, mt);
                }
                let pre_o = self.gate_preactivation(
                    g,
                    GATE_O,
                    h,
                    vars.w_h[GATE_O],
                    x_proj[GATE_O],
                    Some((c_new, vars.w_co.unwrap())),
                    mask,
                    mode,
                    t,
                    pending,
                )?;
                let o = g.sigmoid(pre_o);
                let squashed = g.tanh(c_new);
                let mut h_new = g.mul(o, squashed);
                if let Some(mt) = mask_tensor(mask) {
                    h_new = g.mul_const(h_new, mt);
                }
                Ok((h_new, Some(c_new)))
            }
        }
    }

    /// Evaluates a single step on concrete tensors. Returns the new state,
    /// pending BN updates and the evaluated graph.
    fn single_step(
        &self,
        h_prev: &Tensor,
        c_prev: Option<&Tensor>,
        x_t: &Tensor,
        mode: Mode,
        t: Option<usize>,
    ) -> Result<(Tensor, Option<Tensor>, Pending, Graph)> {
        let needs_t = self.bn_layers().iter().any(|b| b.axis() == Axis::FrameWise);
        if needs_t && t.is_none() {
            return Err(Error::Configuration("frame-wise batch norm needs a time index".into()));
        }
        let mut g = Graph::new();
        let mut pending = Pending::new();
        let x = g.constant(x_t.clone());
        let h = g.constant(h_prev.clone());
        let c = c_prev.map(|c| g.constant(c.clone()));
        let vars = self.bind(&mut g);
        let proj = self.project(&mut g, x, None, mode, &mut pending)?;
        let (h_new, c_new) =
            self.step_node(&mut g, &vars, &proj, h, c, None, mode, t.unwrap_or(0), &mut pending)?;
        g.forward(&Default::default())?;
        let h_out = g.value(h_new)?.clone();
        let c_out = c_new.map(|v| g.value(v).cloned()).transpose()?;
        Ok((h_out, c_out, pending, g))
    }
}

/// Dense layer `y = φ(x·W + b)`, or `y = φ(BN(x·W))` when batch normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub bn: Option<BatchNormLayer>,
    pub activation: Option<Activation>,
}

impl Dense {
    pub fn new(name: &str, input: usize, output: usize, activation: Option<Activation>) -> Self {
        Dense {
            weight: Parameter::new(format!("{name}.W"), Tensor::zeros(&[input, output])),
            bias: Some(Parameter::new(format!("{name}.b"), Tensor::zeros(&[output]))),
            bn: None,
            activation,
        }
    }

    /// Batch-normalized variant; the bias is dropped since the mean
    /// subtraction cancels it.
    pub fn with_batch_norm(name: &str, input: usize, output: usize, activation: Option<Activation>, eps: f64, momentum: f64) -> Result<Self> {
        Ok(Dense {
            weight: Parameter::new(format!("{name}.W"), Tensor::zeros(&[input, output])),
            bias: None,
            bn: Some(BatchNormLayer::new(format!("{name}.bn"), output, Axis::SequenceWise, eps, momentum)?),
            activation,
        })
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.weight];
        out.extend(self.bias.iter());
        if let Some(bn) = &self.bn {
            out.extend(bn.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.weight];
        out.extend(self.bias.iter_mut());
        if let Some(bn) = &mut self.bn {
            out.extend(bn.parameters_mut());
        }
        out
    }

    fn node(&self, g: &mut Graph, x: Var, mask: Option<&[f64]>, mode: Mode, pending: &mut Pending) -> Result<Var> {
        let w = g.param(self.weight.name.clone(), &self.weight.value);
        let mut y = g.matmul(x, w);
        if let Some(b) = &self.bias {
            let bv = g.param(b.name.clone(), &b.value);
            y = g.add(y, bv);
        }
        if let Some(bn) = &self.bn {
            y = apply_bn(g, bn, y, mask, mode, None, pending)?;
        }
        if let Some(a) = self.activation {
            y = g.unary(a.unary(), y);
        }
        Ok(y)
    }

    /// Applies the layer to a `[rows×in]` tensor.
    pub fn apply(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut pending = Pending::new();
        let xv = g.constant(x.clone());
        let y = self.node(&mut g, xv, None, mode, &mut pending)?;
        g.forward(&Default::default())?;
        if let Some(bn) = &mut self.bn {
            for (_, p) in pending {
                bn.commit(&g, p)?;
            }
        }
        Ok(g.value(y)?.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Unidirectional(Cell),
    Bidirectional { forward: Cell, backward: Cell },
}

impl Layer {
    pub fn cells(&self) -> Vec<&Cell> {
        match self {
            Layer::Unidirectional(c) => vec![c],
            Layer::Bidirectional { forward, backward } => vec![forward, backward],
        }
    }

    pub fn cells_mut(&mut self) -> Vec<&mut Cell> {
        match self {
            Layer::Unidirectional(c) => vec![c],
            Layer::Bidirectional { forward, backward } => vec![forward, backward],
        }
    }
}

/// Recurrent state carried into a layer: `h` and, for LSTMs, `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

/// An evaluated forward pass.
pub struct Pass {
    pub graph: Graph,
    /// `[T·m × C]` logits, time-major.
    pub logits: Var,
    /// Mean cross-entropy over masked-in frames; the graph root.
    pub loss: Var,
    /// `[T·m × width]` output of every layer.
    pub layer_outputs: Vec<Var>,
    /// Final `(h, c)` of each unidirectional layer.
    pub final_states: Vec<(Var, Option<Var>)>,
    pending: Pending,
}

impl Pass {
    pub fn loss_value(&self) -> f64 {
        self.graph.value(self.loss).map(|t| t.data()[0]).unwrap_or(f64::NAN)
    }

    pub fn final_states(&self) -> Result<Vec<LayerState>> {
        self.final_states
            .iter()
            .map(|(h, c)| {
                Ok(LayerState {
                    h: self.graph.value(*h)?.clone(),
                    c: c.map(|c| self.graph.value(c).cloned()).transpose()?,
                })
            })
            .collect()
    }

    pub fn backward(&mut self) -> Result<Gradients> {
        self.graph.backward(Tensor::scalar(1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentStack {
    pub config: StackConfig,
    pub embedding: Option<Parameter>,
    pub layers: Vec<Layer>,
    pub output: Dense,
    /// Fault injection for gradient-check sanity tests; never persisted.
    pub corrupt_backward: bool,
}

impl RecurrentStack {
    /// Builds a stack with all weights zero; call
    /// [`init_parameters`](Self::init_parameters) before training.
    pub fn new(config: StackConfig) -> Result<Self> {
        config.validate()?;
        let embedding = match config.input {
            InputSpec::Tokens { vocab, embedding } => {
                Some(Parameter::new("embedding", Tensor::zeros(&[vocab, embedding])))
            }
            InputSpec::Features(_) => None,
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = config.layer_input_width(l);
            let make = |name: &str| -> Result<Cell> {
                Ok(match config.cell {
                    CellKind::Rnn => Cell::Rnn(RnnCell::new(name, input, config.hidden, config.activation, config.bn)?),
                    CellKind::Lstm => Cell::Lstm(LstmCell::new(name, input, config.hidden, config.bn)?),
                })
            };
            let prefix = format!("layer{}", l + 1);
            layers.push(if config.bidirectional {
                Layer::Bidirectional {
                    forward: make(&format!("{prefix}.fwd"))?,
                    backward: make(&format!("{prefix}.bwd"))?,
                }
            } else {
                Layer::Unidirectional(make(&prefix)?)
            });
        }
        let output = Dense::new("output", config.output_width(), config.classes, None);
        Ok(RecurrentStack { config, embedding, layers, output, corrupt_backward: false })
    }

    /// Draws every weight matrix from `scheme` and the embedding table from
    /// `embedding_scheme`. Biases and `beta` start at zero, `gamma` at one.
    pub fn init_parameters(&mut self, scheme: InitScheme, embedding_scheme: InitScheme, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(e) = &mut self.embedding {
            embedding_scheme.fill(&mut e.value, &mut rng);
        }
        for layer in &mut self.layers {
            for cell in layer.cells_mut() {
                cell.init(scheme, &mut rng);
                for bn in cell.bn_layers_mut() {
                    bn.gamma.value = Tensor::ones(bn.gamma.value.shape());
                    bn.beta.value = Tensor::zeros(bn.beta.value.shape());
                }
            }
        }
        scheme.fill(&mut self.output.weight.value, &mut rng);
        for p in self.parameters_mut() {
            if p.name.ends_with(".b") || p.name.contains(".b_") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
    }

    pub fn bn_layers(&self) -> Vec<&BatchNormLayer> {
        self.layers.iter().flat_map(|l| l.cells()).flat_map(|c| c.bn_layers()).collect()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        self.layers.iter_mut().flat_map(|l| l.cells_mut()).flat_map(|c| c.bn_layers_mut()).collect()
    }

    /// Total number of running-statistics updates across all BN layers.
    pub fn statistics_updates(&self) -> u64 {
        self.bn_layers().iter().map(|b| b.stats.update_count()).sum()
    }

    fn new_graph(&self) -> Graph {
        if self.corrupt_backward {
            Graph::with_corrupt_backward()
        } else {
            Graph::new()
        }
    }

    fn dropout(&self, g: &mut Graph, x: Var, rows: usize, width: usize, rng: Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let data = (0..rows * width).map(|_| if rng.gen_bool(p) { 0.0 } else { keep }).collect();
                g.mul_const(x, Tensor::new(vec![rows, width], data).expect("dropout mask"))
            }
            _ => x,
        }
    }

    /// Builds and evaluates the graph for `batch`.
    ///
    /// `init` supplies carried hidden states for unidirectional stacks.
    /// `dropout_rng` enables inter-layer dropout (training only).
    pub fn build(
        &self,
        batch: &SequenceBatch,
        mode: Mode,
        init: Option<&[LayerState]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Pass> {
        let steps = batch.steps();
        let m = batch.batch_size();
        let rows = steps * m;
        let full = batch.is_full();
        let mask_all = (!full).then_some(batch.mask.as_slice());
        if mode == Mode::Infer {
            dropout_rng = None;
        }

        let mut g = self.new_graph();
        let mut pending = Pending::new();

        let mut x = match (&batch.inputs, &self.embedding) {
            (BatchInputs::Features(t), None) => {
                let f = t.last_dim();
                if InputSpec::Features(f) != self.config.input {
                    return Err(Error::dim(format!(
                        "batch has {f} features, model expects {:?}",
                        self.config.input
                    )));
                }
                g.constant(t.reshape(&[rows, f])?)
            }
            (BatchInputs::Tokens(tok), Some(table)) => {
                let tv = g.param(table.name.clone(), &table.value);
                let e = g.gather(tv, tok.clone());
                let width = table.value.shape()[1];
                self.dropout(&mut g, e, rows, width, dropout_rng.as_deref_mut())
            }
            _ => return Err(Error::Configuration("batch input kind does not match the model input".into())),
        };

        if let Some(states) = init {
            if self.config.bidirectional || states.len() != self.layers.len() {
                return Err(Error::Configuration(
                    "carried state needs one entry per layer of a unidirectional stack".into(),
                ));
            }
        }

        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut final_states = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                x = self.dropout(&mut g, x, rows, self.config.output_width(), dropout_rng.as_deref_mut());
            }
            match layer {
                Layer::Unidirectional(cell) => {
                    let start = init.map(|s| &s[l]);
                    let (outs, state) = run_direction(&mut g, cell, x, steps, m, mask_all, false, start, mode, &mut pending)?;
                    final_states.push(state);
                    x = g.concat_outer(&outs);
                }
                Layer::Bidirectional { forward, backward } => {
                    let (fo, _) = run_direction(&mut g, forward, x, steps, m, mask_all, false, None, mode, &mut pending)?;
                    let (bo, _) = run_direction(&mut g, backward, x, steps, m, mask_all, true, None, mode, &mut pending)?;
                    let f_all = g.concat_outer(&fo);
                    let b_all = g.concat_outer(&bo);
                    x = g.concat_last(&[f_all, b_all]);
                }
            }
            layer_outputs.push(x);
        }
        let top = self.dropout(&mut g, x, rows, self.config.output_width(), dropout_rng.as_deref_mut());
        let logits = self.output.node(&mut g, top, mask_all, mode, &mut pending)?;
        let loss = g.softmax_cross_entropy(logits, batch.targets.clone(), batch.mask.clone());
        g.forward(&Default::default())?;
        Ok(Pass { graph: g, logits, loss, layer_outputs, final_states, pending })
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages of every BN layer it touched.
    pub fn commit_statistics(&mut self, pass: &Pass) -> Result<()> {
        for (name, p) in &pass.pending {
            let layer = self
                .bn_layers_mut()
                .into_iter()
                .find(|b| &b.name == name)
                .ok_or_else(|| Error::State(format!("unknown batch-norm layer `{name}`")))?;
            layer.commit(&pass.graph, *p)?;
        }
        Ok(())
    }

    /// Unrolls the stack over `batch` and returns `[T×m×C]` logits. In
    /// training mode the BN running statistics are updated.
    pub fn run_sequence(&mut self, batch: &SequenceBatch, mode: Mode) -> Result<Tensor> {
        let pass = self.build(batch, mode, None, None)?;
        if mode == Mode::Train {
            self.commit_statistics(&pass)?;
        }
        pass.graph
            .value(pass.logits)?
            .reshape(&[batch.steps(), batch.batch_size(), self.config.classes])
    }

    /// Loss and parameter gradients with no side effects (no dropout, no
    /// statistics update).
    pub fn loss_and_grads(&self, batch: &SequenceBatch, mode: Mode) -> Result<(f64, Gradients)> {
        let mut pass = self.build(batch, mode, None, None)?;
        let loss = pass.loss_value();
        let grads = pass.backward()?;
        Ok((loss, grads))
    }

    /// Central-difference gradient check of the training-mode loss on
    /// `batch`.
    pub fn check_gradients(&mut self, batch: &SequenceBatch, step: f64, tolerance: f64) -> Result<GradCheckReport> {
        check_gradients(self, |m: &RecurrentStack| m.loss_and_grads(batch, Mode::Train), step, tolerance, 100, 0)
    }
}

impl Parameterized for RecurrentStack {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out: Vec<&Parameter> = self.embedding.iter().collect();
        for layer in &self.layers {
            for cell in layer.cells() {
                out.extend(cell.parameters());
            }
        }
        out.extend(self.output.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.embedding.iter_mut().collect();
        for layer in &mut self.layers {
            for cell in layer.cells_mut() {
                out.extend(cell.parameters_mut());
            }
        }
        out.extend(self.output.parameters_mut());
        out
    }
}

/// Runs one direction of one layer over all steps. Returns per-step outputs
/// in time order and the final state.
#[allow(clippy::too_many_arguments)]
fn run_direction(
    g: &mut Graph,
    cell: &Cell,
    x_all: Var,
    steps: usize,
    m: usize,
    mask: Option<&[f64]>,
    reverse: bool,
    init: Option<&LayerState>,
    mode: Mode,
    pending: &mut Pending,
) -> Result<(Vec<Var>, (Var, Option<Var>))> {
    let hidden = cell.hidden();
    let vars = cell.bind(g);
    let proj = cell.project(g, x_all, mask, mode, pending)?;
    let lstm = matches!(cell, Cell::Lstm(_));
    let (mut h, mut c) = match init {
        Some(s) => {
            if s.h.shape() != [m, hidden] {
                return Err(Error::dim(format!("carried state {:?} does not match [{m}×{hidden}]", s.h.shape())));
            }
            let c = match (&s.c, lstm) {
                (Some(c), true) => Some(g.constant(c.clone())),
                (None, false) => None,
                _ => return Err(Error::Configuration("carried state does not match the cell type".into())),
            };
            (g.constant(s.h.clone()), c)
        }
        None => {
            let h = g.constant(Tensor::zeros(&[m, hidden]));
            let c = lstm.then(|| g.constant(Tensor::zeros(&[m, hidden])));
            (h, c)
        }
    };
    let mut outputs = vec![h; steps];
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..steps).rev()) } else { Box::new(0..steps) };
    for t in order {
        let xs: Vec<Var> = proj.iter().map(|&p| g.slice_outer(p, t * m, m)).collect();
        let mask_t = mask.map(|mk| &mk[t * m..(t + 1) * m]);
        let (h_new, c_new) = cell.step_node(g, &vars, &xs, h, c, mask_t, mode, t, pending)?;
        h = h_new;
        c = c_new;
        outputs[t] = h;
    }
    Ok((outputs, (h, c)))
}
