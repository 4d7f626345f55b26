//! Frame-level classification metrics and the metrics CSV.

use std::fmt::Write as _;

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,split,fce,ppl,fer,lr,seconds";

fn check(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<usize> {
    let c = logits.last_dim();
    let rows = logits.rows();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::dim(format!(
            "{rows} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&t) = targets.iter().zip(mask).find(|(&t, &w)| w != 0.0 && t >= c).map(|(t, _)| t) {
        return Err(Error::dim(format!("target {t} out of range for {c} classes")));
    }
    Ok(c)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Negative log-likelihood of `target` under `softmax(row)`.
pub fn frame_nll(row: &[f64], target: usize) -> f64 {
    log_sum_exp(row) - row[target]
}

/// Mean cross-entropy in nats over masked-in frames. `logits` is
/// `[T×m×C]` (or any shape whose leading axes flatten to the frames).
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<f64> {
    let t = FrameTotals::from_logits(logits, targets, mask)?;
    t.cross_entropy()
}

/// Fraction of masked-in frames whose argmax differs from the target.
pub fn frame_error_rate(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<f64> {
    let t = FrameTotals::from_logits(logits, targets, mask)?;
    t.frame_error_rate()
}

pub fn perplexity(cross_entropy: f64) -> f64 {
    cross_entropy.exp()
}

/// Running sums behind the frame metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameTotals {
    pub nll: f64,
    pub errors: u64,
    pub frames: u64,
}

impl FrameTotals {
    pub fn from_logits(logits: &Tensor, targets: &[usize], mask: &[f64]) -> Result<Self> {
        let c = check(logits, targets, mask)?;
        let mut t = FrameTotals::default();
        for ((row, &target), &w) in logits.data().chunks_exact(c).zip(targets).zip(mask) {
            if w != 0.0 {
                t.add_frame(row, target);
            }
        }
        Ok(t)
    }

    pub fn add_frame(&mut self, row: &[f64], target: usize) {
        self.nll += frame_nll(row, target);
        self.errors += u64::from(argmax(row) != target);
        self.frames += 1;
    }

    pub fn merge(&mut self, other: &FrameTotals) {
        self.nll += other.nll;
        self.errors += other.errors;
        self.frames += other.frames;
    }

    pub fn cross_entropy(&self) -> Result<f64> {
        if self.frames == 0 {
            return Err(Error::Degenerate("no masked-in frames".into()));
        }
        Ok(self.nll / self.frames as f64)
    }

    pub fn frame_error_rate(&self) -> Result<f64> {
        if self.frames == 0 {
            return Err(Error::Degenerate("no masked-in frames".into()));
        }
        Ok(self.errors as f64 / self.frames as f64)
    }
}

/// Per-sequence totals of a time-major `[T×m×C]` batch, one entry per
/// column `i < m`, each summed in time order.
pub fn sequence_totals(logits: &Tensor, targets: &[usize], mask: &[f64], m: usize) -> Result<Vec<FrameTotals>> {
    let c = check(logits, targets, mask)?;
    if m == 0 || logits.rows() % m != 0 {
        return Err(Error::dim(format!("{} rows do not split into {m} sequences", logits.rows())));
    }
    let steps = logits.rows() / m;
    let mut out = vec![FrameTotals::default(); m];
    for t in 0..steps {
        for (i, totals) in out.iter_mut().enumerate() {
            let r = t * m + i;
            if mask[r] != 0.0 {
                totals.add_frame(&logits.data()[r * c..(r + 1) * c], targets[r]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub fce: f64,
    pub ppl: f64,
    pub fer: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricsRow {
    pub fn from_totals(epoch: usize, split: Split, totals: &FrameTotals, lr: f64, seconds: f64) -> Result<Self> {
        let fce = totals.cross_entropy()?;
        Ok(MetricsRow { epoch, split, fce, ppl: perplexity(fce), fer: totals.frame_error_rate()?, lr, seconds })
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.split.as_str(),
            self.fce,
            self.ppl,
            self.fer,
            self.lr,
            self.seconds
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}
