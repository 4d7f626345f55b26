//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RNCK" | version u32 | model config
//! param count u32 | { name-len u32, name, rank u32, dims u64*, f64* }
//! stats count u32 | { name-len u32, name, axis u8, width u32, entries u32,
//!                     { updates u64, mean f64*, var f64* } }
//! text-len u32 | config text | epoch u64 | metric f64 | crc32 u32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Parameterized;
use crate::error::{Error, Result};
use crate::normalization::{Axis, RunningStats, StatisticsStore};
use crate::recurrent::{Activation, BnConfig, CellKind, InputSpec, Placement, RecurrentStack, StackConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RNCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: StackConfig,
    pub params: Vec<(String, Tensor)>,
    pub statistics: Vec<(String, StatisticsStore)>,
    /// Free-form run description, stored verbatim.
    pub config_text: String,
    pub epoch: u64,
    pub metric: f64,
}

impl Checkpoint {
    pub fn capture(model: &RecurrentStack, config_text: &str, epoch: u64, metric: f64) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.parameters().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            statistics: model.bn_layers().iter().map(|b| (b.name.clone(), b.stats.clone())).collect(),
            config_text: config_text.to_string(),
            epoch,
            metric,
        }
    }

    /// Rebuilds the model. Every parameter and statistics store must be
    /// present with matching shape; extras are rejected.
    pub fn restore(&self) -> Result<RecurrentStack> {
        let mut model = RecurrentStack::new(self.config.clone())?;
        {
            let mut params = model.parameters_mut();
            if params.len() != self.params.len() {
                return Err(Error::Configuration(format!(
                    "checkpoint has {} parameters, model expects {}",
                    self.params.len(),
                    params.len()
                )));
            }
            for p in params.iter_mut() {
                let (_, value) = self
                    .params
                    .iter()
                    .find(|(n, _)| *n == p.name)
                    .ok_or_else(|| Error::Configuration(format!("checkpoint lacks parameter `{}`", p.name)))?;
                if value.shape() != p.value.shape() {
                    return Err(Error::dim(format!(
                        "parameter `{}` has shape {:?} in the checkpoint, {:?} in the model",
                        p.name,
                        value.shape(),
                        p.value.shape()
                    )));
                }
                p.value = value.clone();
            }
        }
        let mut layers = model.bn_layers_mut();
        if layers.len() != self.statistics.len() {
            return Err(Error::Configuration("checkpoint statistics do not match the model".into()));
        }
        for layer in layers.iter_mut() {
            let (_, stats) = self
                .statistics
                .iter()
                .find(|(n, _)| *n == layer.name)
                .ok_or_else(|| Error::Configuration(format!("checkpoint lacks statistics for `{}`", layer.name)))?;
            if stats.axis() != layer.axis() {
                return Err(Error::Configuration(format!("statistics axis mismatch for `{}`", layer.name)));
            }
            layer.stats = stats.clone();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        write_config(&mut w, &self.config);
        put_u32(&mut w, self.params.len() as u32);
        for (name, t) in &self.params {
            put_str(&mut w, name);
            put_u32(&mut w, t.rank() as u32);
            for &d in t.shape() {
                put_u64(&mut w, d as u64);
            }
            for &v in t.data() {
                put_f64(&mut w, v);
            }
        }
        put_u32(&mut w, self.statistics.len() as u32);
        for (name, store) in &self.statistics {
            put_str(&mut w, name);
            w.push(store.axis().tag());
            let (width, entries): (usize, Vec<&RunningStats>) = match store {
                StatisticsStore::FrameWise { width, steps } => (*width, steps.iter().collect()),
                StatisticsStore::SequenceWise(s) => (s.mean.len(), vec![s]),
            };
            put_u32(&mut w, width as u32);
            put_u32(&mut w, entries.len() as u32);
            for e in entries {
                put_u64(&mut w, e.count);
                for &v in e.mean.iter().chain(&e.var) {
                    put_f64(&mut w, v);
                }
            }
        }
        put_str(&mut w, &self.config_text);
        put_u64(&mut w, self.epoch);
        put_f64(&mut w, self.metric);
        let crc = crc32fast::hash(&w);
        put_u32(&mut w, crc);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(integrity(0, "not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(integrity(4, format!("unsupported format version {version}")));
        }
        if bytes.len() < 12 {
            return Err(integrity(bytes.len(), "file truncated"));
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        let config = read_config(&mut r)?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let at = r.pos;
            let numel = numel.filter(|&k| k <= r.remaining() / 8).ok_or_else(|| integrity(at, "file truncated"))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| integrity(at, e.to_string()))?;
            params.push((name, t));
        }
        let n = r.u32()? as usize;
        let mut statistics = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.string()?;
            let at = r.pos;
            let axis = Axis::from_tag(r.u8()?).ok_or_else(|| integrity(at, "unknown axis tag"))?;
            let width = r.u32()? as usize;
            let entries = r.u32()? as usize;
            let mut stats = Vec::with_capacity(entries.min(4096));
            for _ in 0..entries {
                let count = r.u64()?;
                let mean = (0..width).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                let var = (0..width).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                stats.push(RunningStats { mean, var, count });
            }
            let store = match axis {
                Axis::FrameWise => StatisticsStore::FrameWise { width, steps: stats },
                Axis::SequenceWise => {
                    if stats.len() != 1 {
                        return Err(integrity(at, "sequence-wise statistics need exactly one entry"));
                    }
                    StatisticsStore::SequenceWise(stats.pop().unwrap())
                }
            };
            statistics.push((name, store));
        }
        let config_text = r.string()?;
        let epoch = r.u64()?;
        let metric = r.f64()?;
        if r.pos != body_len {
            return Err(integrity(r.pos, "unexpected bytes before checksum"));
        }
        let crc = crc32fast::hash(&bytes[..body_len]);
        if crc != stored {
            return Err(integrity(body_len, format!("checksum mismatch (stored {stored:08x}, computed {crc:08x})")));
        }
        Ok(Checkpoint { config, params, statistics, config_text, epoch, metric })
    }
}

/// Writes to a temporary sibling and renames it into place.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn integrity(offset: usize, reason: impl Into<String>) -> Error {
    Error::Integrity { offset, reason: reason.into() }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn write_config(w: &mut Vec<u8>, c: &StackConfig) {
    w.push(match c.cell {
        CellKind::Rnn => 0,
        CellKind::Lstm => 1,
    });
    match c.input {
        InputSpec::Features(f) => {
            w.push(0);
            put_u64(w, f as u64);
            put_u64(w, 0);
        }
        InputSpec::Tokens { vocab, embedding } => {
            w.push(1);
            put_u64(w, vocab as u64);
            put_u64(w, embedding as u64);
        }
    }
    put_u64(w, c.layers as u64);
    put_u64(w, c.hidden as u64);
    w.push(u8::from(c.bidirectional));
    put_u64(w, c.classes as u64);
    w.push(match c.activation {
        Activation::Tanh => 0,
        Activation::Sigmoid => 1,
    });
    w.push(match c.bn.placement {
        Placement::None => 0,
        Placement::InputToHidden => 1,
        Placement::PreActivation => 2,
    });
    w.push(c.bn.axis.tag());
    put_f64(w, c.bn.eps);
    put_f64(w, c.bn.momentum);
    put_f64(w, c.dropout);
}

fn read_config(r: &mut Reader) -> Result<StackConfig> {
    let at = r.pos;
    let bad = |what: &str| integrity(at, format!("invalid model config ({what})"));
    let cell = match r.u8()? {
        0 => CellKind::Rnn,
        1 => CellKind::Lstm,
        _ => return Err(bad("cell")),
    };
    let kind = r.u8()?;
    let (a, b) = (r.u64()? as usize, r.u64()? as usize);
    let input = match kind {
        0 => InputSpec::Features(a),
        1 => InputSpec::Tokens { vocab: a, embedding: b },
        _ => return Err(bad("input")),
    };
    let layers = r.u64()? as usize;
    let hidden = r.u64()? as usize;
    let bidirectional = r.u8()? != 0;
    let classes = r.u64()? as usize;
    let activation = match r.u8()? {
        0 => Activation::Tanh,
        1 => Activation::Sigmoid,
        _ => return Err(bad("activation")),
    };
    let placement = match r.u8()? {
        0 => Placement::None,
        1 => Placement::InputToHidden,
        2 => Placement::PreActivation,
        _ => return Err(bad("placement")),
    };
    let axis = Axis::from_tag(r.u8()?).ok_or_else(|| bad("axis"))?;
    let eps = r.f64()?;
    let momentum = r.f64()?;
    let dropout = r.f64()?;
    Ok(StackConfig {
        cell,
        input,
        layers,
        hidden,
        bidirectional,
        classes,
        activation,
        bn: BnConfig { placement, axis, eps, momentum },
        dropout,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len().saturating_sub(self.pos)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if n > self.remaining() {
            return Err(integrity(self.pos, format!("file truncated (needed {n} more bytes)")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| integrity(at, "invalid UTF-8 in name"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrent::InitScheme;

    fn model() -> RecurrentStack {
        let cfg = StackConfig {
            cell: CellKind::Lstm,
            input: InputSpec::Tokens { vocab: 6, embedding: 3 },
            layers: 2,
            hidden: 4,
            bidirectional: false,
            classes: 6,
            activation: Activation::Tanh,
            bn: BnConfig { placement: Placement::InputToHidden, axis: Axis::FrameWise, ..BnConfig::default() },
            dropout: 0.1,
        };
        let mut m = RecurrentStack::new(cfg).unwrap();
        m.init_parameters(InitScheme::Uniform(0.1), InitScheme::Gaussian(1.0), 5);
        let stream: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 6).collect();
        let batch = crate::data::make_lm_batches(&stream, 2, 5).unwrap().remove(0);
        m.run_sequence(&batch, crate::normalization::Mode::Train).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let ck = Checkpoint::capture(&m, "[model]\ncell = lstm\n", 3, 1.25);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.restore().unwrap(), m);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = Checkpoint::capture(&model(), "", 0, 0.0).to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Integrity { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn corruption_fails_checksum() {
        let mut bytes = Checkpoint::capture(&model(), "", 0, 0.0).to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Integrity { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = Checkpoint::capture(&model(), "", 0, 0.0).to_bytes();
        bytes[4] = 9;
        match Checkpoint::from_bytes(&bytes) {
            Err(Error::Integrity { offset: 4, reason }) => assert!(reason.contains("version")),
            other => panic!("{other:?}"),
        }
    }
}
