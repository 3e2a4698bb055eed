//! The `DBRW` checkpoint format.
//!
//! Layout, all integers little-endian: magic `DBRW`, u16 version, config
//! block (u8 variant code, u16 base channels, u8 residual blocks, u8 channel
//! multiplier), u32 tensor count, then per tensor a u16 name length, the
//! UTF-8 name, u8 rank, rank x u32 dims and the f32 values row-major.
//!
//! Besides the network tensors a checkpoint may carry auxiliary entries
//! whose names start with `optim.` or `train.`; the trainer stores its
//! optimizer moments and counters there.

use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use super::{DeblurNet, ModelConfig, ModelError, Variant};
use crate::autodiff::Element;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DBRW";
pub const CHECKPOINT_VERSION: u16 = 1;
const AUX_PREFIXES: [&str; 2] = ["optim.", "train."];
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("tensor {0:?} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {0:?} appears more than once")]
    DuplicateTensor(String),
    #[error("tensor {0:?} does not belong to the network")]
    UnexpectedTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeConflict { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint holds {found:?}, expected {expected:?}")]
    ConfigMismatch { expected: ModelConfig, found: ModelConfig },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    entries: Vec<Entry>,
}

fn is_aux(name: &str) -> bool {
    AUX_PREFIXES.iter().any(|p| name.starts_with(p))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("two bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Checkpoint { config, entries: Vec::new() }
    }

    /// Every tensor of `net`, converted to f32.
    pub fn capture<T: Element>(net: &DeblurNet<T>) -> Self {
        let mut ck = Checkpoint::new(*net.config());
        for (name, t) in net.named_tensors() {
            let values = t.data().iter().map(|v| v.as_f32()).collect();
            ck.entries.push(Entry { name, shape: t.shape().to_vec(), values });
        }
        ck
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Adds an entry, replacing any entry of the same name.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) {
        let entry = Entry { name: name.into(), shape, values };
        debug_assert_eq!(entry.values.len(), entry.shape.iter().product::<usize>());
        match self.entries.iter_mut().find(|e| e.name == entry.name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    /// Stores an integer exactly, as four 16-bit limbs (least significant
    /// first), each representable in f32.
    pub fn insert_u64(&mut self, name: impl Into<String>, v: u64) {
        let limbs = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect();
        self.insert(name, vec![4], limbs);
    }

    pub fn get_u64(&self, name: &str) -> Option<u64> {
        let e = self.get(name)?;
        if e.shape != [4] {
            return None;
        }
        e.values.iter().enumerate().try_fold(0u64, |acc, (i, &l)| {
            ((0.0..=65535.0).contains(&l) && l.fract() == 0.0).then(|| acc | ((l as u64) << (16 * i)))
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.config.variant.code());
        out.extend_from_slice(&(self.config.base_channels as u16).to_le_bytes());
        out.push(self.config.n_resblocks as u8);
        out.push(self.config.channel_multiplier as u8);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. Duplicate names are rejected here; whether the
    /// entries fit a network is checked by [`restore_into`](Self::restore_into).
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: bytes, pos: 0 };
        if c.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = c.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let code = c.u8("config")?;
        let variant =
            Variant::from_code(code).ok_or_else(|| CheckpointError::Format(format!("unknown variant code {code}")))?;
        let config = ModelConfig {
            variant,
            base_channels: c.u16("config")? as usize,
            n_resblocks: c.u8("config")? as usize,
            channel_multiplier: c.u8("config")? as usize,
        };
        config.validate()?;
        let count = c.u32("tensor count")? as usize;
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len = c.u16("tensor name")? as usize;
            let name = std::str::from_utf8(c.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::DuplicateTensor(name));
            }
            let rank = c.u8("tensor rank")? as usize;
            if rank > MAX_RANK {
                return Err(CheckpointError::Format(format!("tensor {name:?} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| c.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = match numel {
                Some(n) if n.checked_mul(4).is_some_and(|b| b <= c.remaining()) => n,
                _ => return Err(CheckpointError::Truncated("tensor values")),
            };
            let values =
                c.take(4 * numel, "tensor values")?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            entries.push(Entry { name, shape, values });
        }
        if c.remaining() != 0 {
            return Err(CheckpointError::Format(format!("{} trailing bytes", c.remaining())));
        }
        Ok(Checkpoint { config, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every network tensor into `net`, which must have been built
    /// with the same configuration.
    pub fn restore_into<T: Element>(&self, net: &DeblurNet<T>) -> Result<()> {
        if *net.config() != self.config {
            return Err(CheckpointError::ConfigMismatch { expected: *net.config(), found: self.config });
        }
        let named = net.named_tensors();
        let known: HashSet<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(e) = self.entries.iter().find(|e| !is_aux(&e.name) && !known.contains(e.name.as_str())) {
            return Err(CheckpointError::UnexpectedTensor(e.name.clone()));
        }
        // validate everything before mutating anything
        let mut plan = Vec::with_capacity(named.len());
        for (name, t) in &named {
            let e = self.get(name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if e.shape != t.shape() {
                return Err(CheckpointError::ShapeConflict {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: e.shape.clone(),
                });
            }
            plan.push((t, e));
        }
        for (t, e) in plan {
            t.data_mut().iter_mut().zip(&e.values).for_each(|(d, &v)| *d = T::of(f64::from(v)));
        }
        Ok(())
    }

    /// A fresh network with this checkpoint's configuration and tensors.
    pub fn to_net<T: Element>(&self) -> Result<DeblurNet<T>> {
        let net = DeblurNet::new(self.config, 0)?;
        self.restore_into(&net)?;
        Ok(net)
    }
}

pub fn save_checkpoint<T: Element>(net: &DeblurNet<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::capture(net).save(path)
}

pub fn load_checkpoint<T: Element>(path: impl AsRef<Path>) -> Result<DeblurNet<T>> {
    Checkpoint::load(path)?.to_net()
}

#[cfg(test)]
mod tests {
    use super::super::Mode;
    use super::*;
    use crate::autodiff::Tensor;
    use crate::raw::CfaPattern;

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig { variant, base_channels: 2, n_resblocks: 2, channel_multiplier: 1 }
    }

    fn trained_like(variant: Variant, seed: u64) -> DeblurNet<f32> {
        let net = DeblurNet::new(config(variant), seed).unwrap();
        // give the head and running statistics non-default values
        for (i, v) in net.head.weight.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin() * 0.01;
        }
        let x = Tensor::new((0..256).map(|i| (i % 17) as f32 / 17.0).collect(), &[1, 1, 16, 16]).unwrap();
        net.forward(&x, CfaPattern::Rggb, Mode::Train).unwrap();
        net
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.dbrw");
        let net = trained_like(Variant::TwoBranchBca, 3);
        save_checkpoint(&net, &path).unwrap();
        let back: DeblurNet<f32> = load_checkpoint(&path).unwrap();
        for ((na, a), (nb, b)) in net.named_tensors().iter().zip(back.named_tensors().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let x = Tensor::new((0..512).map(|i| (i % 29) as f32 / 29.0).collect(), &[2, 1, 16, 16]).unwrap();
        let ya = net.forward(&x, CfaPattern::Gbrg, Mode::Eval).unwrap().to_vec();
        let yb = back.forward(&x, CfaPattern::Gbrg, Mode::Eval).unwrap().to_vec();
        assert_eq!(ya, yb);
        assert_eq!(std::fs::read(&path).unwrap(), Checkpoint::capture(&back).to_bytes());
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::new(config(Variant::ColorOnly));
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"DBRW");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..11], &[1, 2, 0, 2, 1]);
        assert_eq!(&b[11..15], &[0, 0, 0, 0]);
        let mut ck = ck;
        ck.insert("train.x", vec![2], vec![1.0, -2.0]);
        let b = ck.to_bytes();
        assert_eq!(&b[15..17], &[7, 0]);
        assert_eq!(&b[17..24], b"train.x");
        assert_eq!(b[24], 1);
        assert_eq!(&b[25..29], &[2, 0, 0, 0]);
        assert_eq!(&b[29..33], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 37);
    }

    #[test]
    fn integers_round_trip_exactly() {
        let mut ck = Checkpoint::new(config(Variant::TwoBranch));
        for v in [0, 1, 65535, 65536, u64::MAX, 0x1234_5678_9ABC_DEF0] {
            ck.insert_u64("train.seed", v);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            assert_eq!(back.get_u64("train.seed"), Some(v));
        }
        assert_eq!(ck.get_u64("train.none"), None);
    }

    #[test]
    fn distinct_errors() {
        let net = trained_like(Variant::TwoBranchBca, 1);
        let good = Checkpoint::capture(&net);
        let bytes = good.to_bytes();

        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::VersionMismatch { found: 2, .. })));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE\x01\x00"), Err(CheckpointError::BadMagic)));
        for cut in [3, 10, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
        }

        let mut dup = good.clone();
        dup.entries.push(dup.entries[0].clone());
        let name = dup.entries[0].name.clone();
        assert!(matches!(Checkpoint::from_bytes(&dup.to_bytes()), Err(CheckpointError::DuplicateTensor(n)) if n == name));

        let mut missing = good.clone();
        let gone = missing.entries.remove(5).name;
        assert!(matches!(missing.restore_into(&net), Err(CheckpointError::MissingTensor(n)) if n == gone));

        let mut bad_shape = good.clone();
        bad_shape.entries[0].shape = vec![bad_shape.entries[0].values.len()];
        assert!(matches!(bad_shape.restore_into(&net), Err(CheckpointError::ShapeConflict { .. })));

        let mut stray = good.clone();
        stray.insert("mystery", vec![1], vec![0.0]);
        assert!(matches!(stray.restore_into(&net), Err(CheckpointError::UnexpectedTensor(_))));
        let mut aux = good.clone();
        aux.insert("optim.step", vec![1], vec![3.0]);
        assert!(aux.restore_into(&net).is_ok());

        let other = DeblurNet::<f32>::new(config(Variant::SpatialOnly), 0).unwrap();
        assert!(matches!(good.restore_into(&other), Err(CheckpointError::ConfigMismatch { .. })));
    }
}
