//! Batch normalization for recurrent networks.
//!
//! Two statistics axes are supported:
//!
//! * [`Axis::FrameWise`]: one mean/variance per feature *per time step*,
//!   estimated from the mini-batch at that step. The running statistics keep
//!   a separate entry for every step seen during training, while `gamma` and
//!   `beta` are shared across steps.
//! * [`Axis::SequenceWise`]: one mean/variance per feature estimated jointly
//!   over the time and batch axes, counting only unpadded frames.
//!
//! Variances are biased (divisor `n`) in both training and stored statistics.

use crate::autodiff::{BnStatistics, Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    FrameWise,
    SequenceWise,
}

impl Axis {
    pub fn tag(self) -> u8 {
        match self {
            Axis::FrameWise => 0,
            Axis::SequenceWise => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Axis> {
        match tag {
            0 => Some(Axis::FrameWise),
            1 => Some(Axis::SequenceWise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Per-feature mean and biased variance plus the number of rows they were
/// computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// Mean and biased variance of each column of `x` viewed as `[rows×F]`.
pub fn batch_statistics(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = masked_statistics(x, None)?;
    Ok((Tensor::vector(s.mean), Tensor::vector(s.var)))
}

/// Like [`batch_statistics`] but only rows whose mask entry is nonzero
/// contribute, and the divisor is the number of such rows.
pub fn masked_statistics(x: &Tensor, mask: Option<&[f64]>) -> Result<BatchStats> {
    let f = x.last_dim();
    let rows = x.rows();
    if let Some(m) = mask {
        if m.len() != rows {
            return Err(Error::dim(format!("mask has {} entries for {rows} rows", m.len())));
        }
    }
    let live = |r: usize| mask.map_or(true, |m| m[r] != 0.0);
    let n = (0..rows).filter(|&r| live(r)).count();
    if n == 0 {
        return Err(Error::Degenerate("batch statistics over zero unpadded frames".into()));
    }
    let mut mean = vec![0.0; f];
    for (r, row) in x.data().chunks_exact(f).enumerate() {
        if live(r) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
        }
    }
    let nf = n as f64;
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; f];
    for (r, row) in x.data().chunks_exact(f).enumerate() {
        if live(r) {
            for k in 0..f {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    Ok(BatchStats { mean, var, count: n })
}

/// `(x - mean) / sqrt(var + eps)` column by column.
pub fn standardize(x: &Tensor, mean: &Tensor, var: &Tensor, eps: f64) -> Result<Tensor> {
    if eps <= 0.0 {
        return Err(Error::Configuration(format!("eps must be positive, got {eps}")));
    }
    let inv = var.map_with(|v| 1.0 / (v + eps).sqrt());
    x.sub(mean)?.mul(&inv)
}

/// Exponential running average of batch statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl RunningStats {
    pub fn empty(width: usize) -> Self {
        RunningStats { mean: vec![0.0; width], var: vec![0.0; width], count: 0 }
    }

    pub fn has_statistics(&self) -> bool {
        self.count > 0
    }

    /// `running <- momentum * running + (1 - momentum) * batch`; the first
    /// update copies the batch statistics.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) -> Result<()> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Configuration(format!("running momentum {momentum} outside (0,1)")));
        }
        if batch_mean.len() != self.mean.len() || batch_var.len() != self.var.len() {
            return Err(Error::dim(format!(
                "statistics of width {} cannot update a store of width {}",
                batch_mean.len(),
                self.mean.len()
            )));
        }
        if self.count == 0 {
            self.mean.copy_from_slice(batch_mean);
            self.var.copy_from_slice(batch_var);
        } else {
            for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, &b) in self.var.iter_mut().zip(batch_var) {
                *r = (momentum * *r + (1.0 - momentum) * b).max(0.0);
            }
        }
        self.count += 1;
        Ok(())
    }
}

/// Inference-time statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub enum StatisticsStore {
    /// One entry per time step, grown on demand. An entry with `count == 0`
    /// has never been updated.
    FrameWise { width: usize, steps: Vec<RunningStats> },
    SequenceWise(RunningStats),
}

impl StatisticsStore {
    pub fn new(axis: Axis, width: usize) -> Self {
        match axis {
            Axis::FrameWise => StatisticsStore::FrameWise { width, steps: Vec::new() },
            Axis::SequenceWise => StatisticsStore::SequenceWise(RunningStats::empty(width)),
        }
    }

    pub fn axis(&self) -> Axis {
        match self {
            StatisticsStore::FrameWise { .. } => Axis::FrameWise,
            StatisticsStore::SequenceWise(_) => Axis::SequenceWise,
        }
    }

    /// Total number of updates across all entries.
    pub fn update_count(&self) -> u64 {
        match self {
            StatisticsStore::FrameWise { steps, .. } => steps.iter().map(|s| s.count).sum(),
            StatisticsStore::SequenceWise(s) => s.count,
        }
    }

    /// Statistics for time step `t` (ignored for sequence-wise stores), or
    /// `None` when that entry has never been updated.
    pub fn lookup(&self, t: Option<usize>) -> Option<&RunningStats> {
        match self {
            StatisticsStore::FrameWise { steps, .. } => {
                steps.get(t?).filter(|s| s.has_statistics())
            }
            StatisticsStore::SequenceWise(s) => Some(s).filter(|s| s.has_statistics()),
        }
    }

    pub fn update(
        &mut self,
        t: Option<usize>,
        batch_mean: &[f64],
        batch_var: &[f64],
        momentum: f64,
    ) -> Result<()> {
        match self {
            StatisticsStore::FrameWise { width, steps } => {
                let t = t.ok_or_else(|| {
                    Error::Configuration("frame-wise statistics need a time index".into())
                })?;
                while steps.len() <= t {
                    steps.push(RunningStats::empty(*width));
                }
                steps[t].update(batch_mean, batch_var, momentum)
            }
            StatisticsStore::SequenceWise(s) => s.update(batch_mean, batch_var, momentum),
        }
    }
}

/// Standalone running-average update.
pub fn update_running(
    store: &mut StatisticsStore,
    t: Option<usize>,
    batch_mean: &[f64],
    batch_var: &[f64],
    momentum: f64,
) -> Result<()> {
    store.update(t, batch_mean, batch_var, momentum)
}

/// A batch-norm layer: learnable `gamma`/`beta` shared across time steps,
/// plus inference statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub name: String,
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
    pub momentum: f64,
    pub stats: StatisticsStore,
}

/// A training-mode batch-norm node whose batch statistics must be folded into
/// the running averages once the graph has been evaluated.
#[derive(Debug, Clone, Copy)]
pub struct PendingUpdate {
    pub node: Var,
    pub time_index: Option<usize>,
}

impl BatchNormLayer {
    pub fn new(name: impl Into<String>, width: usize, axis: Axis, eps: f64, momentum: f64) -> Result<Self> {
        let name = name.into();
        if !(eps > 0.0) {
            return Err(Error::Configuration(format!("{name}: eps must be positive, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Configuration(format!(
                "{name}: running momentum must lie in (0,1), got {momentum}"
            )));
        }
        Ok(BatchNormLayer {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(&[width])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[width])),
            name,
            eps,
            momentum,
            stats: StatisticsStore::new(axis, width),
        })
    }

    pub fn axis(&self) -> Axis {
        self.stats.axis()
    }

    pub fn width(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn time_key(&self, time_index: Option<usize>) -> Result<Option<usize>> {
        match self.axis() {
            Axis::FrameWise => time_index.map(Some).ok_or_else(|| {
                Error::Configuration(format!("{}: frame-wise batch norm needs a time index", self.name))
            }),
            Axis::SequenceWise => Ok(None),
        }
    }

    fn stored(&self, t: Option<usize>) -> Result<BnStatistics> {
        let s = self.stats.lookup(t).ok_or_else(|| match t {
            Some(t) => Error::MissingStatistics(format!(
                "layer `{}` has no statistics for time step {t}",
                self.name
            )),
            None => Error::MissingStatistics(format!("layer `{}` has no statistics", self.name)),
        })?;
        Ok(BnStatistics::Fixed { mean: s.mean.clone(), var: s.var.clone() })
    }

    /// Adds this layer to `graph` applied to `x` (viewed as `[rows×F]`).
    ///
    /// Frame-wise layers expect the rows of a single time step; sequence-wise
    /// layers expect every frame of the batch together with a per-row mask.
    /// In training mode the returned [`PendingUpdate`] must be passed to
    /// [`commit`](Self::commit) after the graph has been evaluated.
    pub fn node(
        &self,
        graph: &mut Graph,
        x: Var,
        mask: Option<Vec<f64>>,
        mode: Mode,
        time_index: Option<usize>,
    ) -> Result<(Var, Option<PendingUpdate>)> {
        let t = self.time_key(time_index)?;
        let gamma = graph.param(self.gamma.name.clone(), &self.gamma.value);
        let beta = graph.param(self.beta.name.clone(), &self.beta.value);
        match mode {
            Mode::Train => {
                let y = graph.batch_norm(x, gamma, beta, mask, self.eps, BnStatistics::Batch);
                Ok((y, Some(PendingUpdate { node: y, time_index: t })))
            }
            Mode::Infer => {
                let stats = self.stored(t)?;
                Ok((graph.batch_norm(x, gamma, beta, mask, self.eps, stats), None))
            }
        }
    }

    /// Folds the batch statistics of an evaluated training node into the
    /// running averages.
    pub fn commit(&mut self, graph: &Graph, pending: PendingUpdate) -> Result<()> {
        let stats = graph
            .bn_statistics(pending.node)
            .ok_or_else(|| Error::State(format!("{}: batch norm node was not evaluated", self.name)))?;
        self.stats.update(pending.time_index, &stats.mean, &stats.var, self.momentum)
    }

    /// Applies the layer directly to a tensor.
    ///
    /// * Frame-wise: `x` is `[m×F]`, `mask` (optional) is `[m]`, and
    ///   `time_index` is required.
    /// * Sequence-wise: `x` is `[T×m×F]` and `mask` is `[T×m]`.
    ///
    /// Training mode normalizes with the batch statistics and updates the
    /// running averages; inference mode uses the stored statistics and leaves
    /// the layer untouched. Masked-out rows come out as zeros.
    pub fn apply(
        &mut self,
        x: &Tensor,
        mask: Option<&Tensor>,
        mode: Mode,
        time_index: Option<usize>,
    ) -> Result<Tensor> {
        let f = self.width();
        match self.axis() {
            Axis::FrameWise if x.rank() != 2 => {
                return Err(Error::dim(format!("frame-wise input must be [m×F], got {:?}", x.shape())))
            }
            Axis::SequenceWise if x.rank() != 3 => {
                return Err(Error::dim(format!("sequence-wise input must be [T×m×F], got {:?}", x.shape())))
            }
            _ => {}
        }
        if x.last_dim() != f {
            return Err(Error::dim(format!("input width {} does not match layer width {f}", x.last_dim())));
        }
        let rows = x.rows();
        let row_mask = match mask {
            Some(m) => {
                if m.numel() != rows || m.shape() != &x.shape()[..x.rank() - 1] {
                    return Err(Error::dim(format!(
                        "mask shape {:?} does not match input {:?}",
                        m.shape(),
                        x.shape()
                    )));
                }
                Some(m.data().to_vec())
            }
            None if self.axis() == Axis::SequenceWise => Some(vec![1.0; rows]),
            None => None,
        };
        let mut g = Graph::new();
        let xv = g.constant(x.reshape(&[rows, f])?);
        let (y, pending) = self.node(&mut g, xv, row_mask, mode, time_index)?;
        g.forward(&Default::default())?;
        let out = g.value(y)?.reshape(x.shape())?;
        if let Some(p) = pending {
            self.commit(&g, p)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn statistics_of_small_batch() {
        let (mean, var) = batch_statistics(&t2(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(mean.data(), &[2.0, 3.0]);
        assert_eq!(var.data(), &[1.0, 1.0]);
    }

    #[test]
    fn constant_and_single_row_batches_have_zero_variance() {
        let (mean, var) = batch_statistics(&t2(&[&[5.0], &[5.0], &[5.0]])).unwrap();
        assert_eq!((mean.data(), var.data()), (&[5.0][..], &[0.0][..]));
        let (mean, var) = batch_statistics(&t2(&[&[7.0, 8.0]])).unwrap();
        assert_eq!((mean.data(), var.data()), (&[7.0, 8.0][..], &[0.0, 0.0][..]));
    }

    #[test]
    fn fully_masked_batch_is_degenerate() {
        let x = t2(&[&[1.0], &[2.0]]);
        assert!(matches!(masked_statistics(&x, Some(&[0.0, 0.0])), Err(Error::Degenerate(_))));
    }

    #[test]
    fn standardize_cases() {
        let c = t2(&[&[5.0], &[5.0]]);
        let (m, v) = batch_statistics(&c).unwrap();
        assert!(standardize(&c, &m, &v, 1e-5).unwrap().data().iter().all(|&x| x == 0.0));

        let x = t2(&[&[1.0], &[3.0]]);
        let (m, v) = batch_statistics(&x).unwrap();
        let s = standardize(&x, &m, &v, 1e-300).unwrap();
        assert_eq!(s.data(), &[-1.0, 1.0]);

        // zero variance: eps alone sets the scale
        let s = standardize(&t2(&[&[1e-3]]), &Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.0]), 1e-5).unwrap();
        assert!((s.data()[0] - 0.316_227_766_016_837_9).abs() < 1e-12);

        assert!(standardize(&x, &m, &v, 0.0).is_err());
    }

    #[test]
    fn running_average_updates() {
        let mut s = RunningStats::empty(1);
        s.update(&[3.0], &[1.0], 0.9).unwrap();
        assert_eq!(s.mean, vec![3.0]);

        let mut s = RunningStats { mean: vec![0.0], var: vec![0.0], count: 1 };
        s.update(&[10.0], &[0.0], 0.9).unwrap();
        assert!((s.mean[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.count, 2);

        assert!(matches!(s.update(&[1.0, 2.0], &[0.0, 0.0], 0.9), Err(Error::Dimension(_))));
        assert!(s.update(&[1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn running_average_converges_on_stationary_batches() {
        // after the first (copying) update from 0, the gap shrinks by 0.9 per step
        let mut s = RunningStats { mean: vec![0.0], var: vec![0.0], count: 1 };
        for _ in 0..200 {
            s.update(&[4.0], &[2.0], 0.9).unwrap();
        }
        // 4 * 0.9^200 ≈ 2.8e-9
        assert!((s.mean[0] - 4.0).abs() < 1e-6);
        assert!((s.var[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn unseen_frame_reports_no_statistics() {
        let mut store = StatisticsStore::new(Axis::FrameWise, 2);
        store.update(Some(2), &[1.0, 1.0], &[1.0, 1.0], 0.9).unwrap();
        assert!(store.lookup(Some(0)).is_none());
        assert!(store.lookup(Some(2)).is_some());
        assert!(store.lookup(Some(3)).is_none());
        assert_eq!(store.update_count(), 1);
    }

    #[test]
    fn layer_validation() {
        assert!(BatchNormLayer::new("bn", 3, Axis::FrameWise, 0.0, 0.9).is_err());
        assert!(BatchNormLayer::new("bn", 3, Axis::FrameWise, 1e-5, 0.0).is_err());
        let l = BatchNormLayer::new("bn", 3, Axis::SequenceWise, 1e-5, 0.9).unwrap();
        assert_eq!(l.gamma.value.data(), &[1.0; 3]);
        assert_eq!(l.beta.value.data(), &[0.0; 3]);
        assert_eq!(l.gamma.name, "bn.gamma");
    }

    #[test]
    fn identity_scale_shift_equals_standardize() {
        let x = t2(&[&[1.0, -2.0], &[3.0, 0.5], &[0.0, 4.0]]);
        let mut l = BatchNormLayer::new("bn", 2, Axis::FrameWise, 1e-5, 0.9).unwrap();
        let y = l.apply(&x, None, Mode::Train, Some(0)).unwrap();
        let (m, v) = batch_statistics(&x).unwrap();
        let s = standardize(&x, &m, &v, 1e-5).unwrap();
        assert!(y.max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn frame_wise_needs_time_index_and_stored_stats() {
        let x = t2(&[&[1.0], &[2.0]]);
        let mut l = BatchNormLayer::new("bn", 1, Axis::FrameWise, 1e-5, 0.9).unwrap();
        assert!(matches!(l.apply(&x, None, Mode::Train, None), Err(Error::Configuration(_))));
        let err = l.apply(&x, None, Mode::Infer, Some(0)).unwrap_err();
        assert!(matches!(err, Error::MissingStatistics(_)));
        assert!(err.to_string().contains("bn"));
        l.apply(&x, None, Mode::Train, Some(0)).unwrap();
        l.apply(&x, None, Mode::Infer, Some(0)).unwrap();
        assert!(matches!(l.apply(&x, None, Mode::Infer, Some(1)), Err(Error::MissingStatistics(_))));
    }

    #[test]
    fn masked_sequence_example() {
        // lengths 3 and 1, time-major [T=3, m=2, F=1]
        let x = Tensor::new(vec![3, 2, 1], vec![1.0, 4.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let mask = Tensor::new(vec![3, 2], vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let s = masked_statistics(&x.reshape(&[6, 1]).unwrap(), Some(mask.data())).unwrap();
        assert_eq!(s.count, 4);
        assert_eq!(s.mean, vec![2.5]);
        assert_eq!(s.var, vec![1.25]);

        let mut l = BatchNormLayer::new("bn", 1, Axis::SequenceWise, 1e-5, 0.9).unwrap();
        let y = l.apply(&x, Some(&mask), Mode::Train, None).unwrap();
        assert_eq!(y.data()[3], 0.0);
        assert_eq!(y.data()[5], 0.0);
        assert_eq!(l.stats.update_count(), 1);
    }

    #[test]
    fn inference_is_pure() {
        let x = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        let mut l = BatchNormLayer::new("bn", 1, Axis::SequenceWise, 1e-5, 0.9).unwrap();
        l.apply(&x, None, Mode::Train, None).unwrap();
        let before = l.clone();
        let a = l.apply(&x, None, Mode::Infer, None).unwrap();
        let b = l.apply(&x, None, Mode::Infer, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(l, before);
    }
}
