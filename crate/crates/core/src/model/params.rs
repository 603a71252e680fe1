//! Named learnable tensors, their Adam moments, and checkpoint files.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "GGPFNCKP" | version u32 | config_len u32 | config (TOML, UTF-8)
//! epoch u64 | tensor_count u32
//! per tensor: name_len u32 | name | rank u32 | extents u32×rank | step u64
//!             | value f32×n | first moment f32×n | second moment f32×n
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::GgpfnConfig;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GGPFNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A learnable tensor with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Adam first moment.
    pub m: Tensor<T>,
    /// Adam second moment.
    pub v: Tensor<T>,
    /// Number of Adam updates applied to this tensor.
    pub step: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape().to_vec());
        Self { m: zeros.clone(), v: zeros, value, step: 0 }
    }
}

/// Which sub-network a parameter belongs to, for staged training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// The global guidance branch and its supervision heads.
    Global,
    /// The progressive fusion network: encoder, decoder and scale heads.
    Pfn,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("glob.") {
            ParamGroup::Global
        } else {
            ParamGroup::Pfn
        }
    }
}

/// Insertion-ordered map from parameter name to [`Param`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Param<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, param));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, p)| (n.clone(), Param { value: p.value.cast(), m: p.m.cast(), v: p.v.cast(), step: p.step }))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every parameter on `tape`: as a tracked leaf when `trainable`
    /// accepts its name, otherwise as a constant.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> BoundParams<'t, T> {
        let vars = self
            .entries
            .iter()
            .map(|(n, p)| {
                let var = if trainable(n) { tape.leaf(p.value.clone()) } else { tape.constant(p.value.clone()) };
                (n.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct BoundParams<'t, T: Scalar> {
    vars: Vec<(String, Var<'t, T>)>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    /// Wraps variables that are already on a tape, e.g. perturbed copies.
    pub fn from_vars(vars: Vec<(String, Var<'t, T>)>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Usage(format!("missing parameter '{name}'")))
    }

    pub fn weight(&self, layer: &str) -> Result<Var<'t, T>> {
        self.var(&format!("{layer}.w"))
    }

    pub fn bias(&self, layer: &str) -> Result<Var<'t, T>> {
        self.var(&format!("{layer}.b"))
    }

    /// Tracked parameter variables, in store order.
    pub fn tracked(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().filter(|(_, v)| v.tracked()).map(|(n, v)| (n.as_str(), *v))
    }
}

/// A serialized network with its configuration and training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: GgpfnConfig,
    /// Epochs completed across the whole schedule.
    pub epoch: u64,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.extend_from_slice(&p.step.to_le_bytes());
            for t in [&p.value, &p.m, &p.v] {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let config_len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::Parse("checkpoint config is not UTF-8".into()))?;
        let config: GgpfnConfig =
            toml::from_str(config_text).map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
        let epoch = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Parse("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Parse(format!("parameter '{name}' has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let step = r.u64()?;
            let mut read = || -> Result<Tensor<f32>> {
                let raw = r.take(4 * n)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                Tensor::new(shape.clone(), data).map_err(|e| Error::Parse(e.to_string()))
            };
            let (value, m, v) = (read()?, read()?, read()?);
            params.insert(name, Param { value, m, v, step }).map_err(|e| Error::Parse(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self { config, epoch, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Parse(format!("checkpoint truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
