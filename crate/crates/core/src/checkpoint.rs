//! Model checkpoints: named tensors, optional optimizer moments and the run
//! configuration that produced them.
//!
//! # File layout (little-endian)
//!
//! ```text
//! magic     8 bytes "SGJCKPT\0"
//! version   u32
//! digest    u16 len + ascii   architecture digest
//! config    u32 len + utf8    RunConfig JSON
//! step      u64
//! count     u32
//! tensors   count x { name u16 len + utf8, ndim u32, dims u32[ndim], dtype u8, values }
//! moments   u8 flag; if 1: adam step u64, then count first moments and
//!           count second moments, each { ndim u32, dims u32[ndim], dtype u8, values }
//! checksum  32 bytes sha256 of everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::data::Reader;
use crate::error::{shape_err, Error, Result};
use crate::model::JointModel;
use crate::optim::AdamState;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGJCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub config: RunConfig,
    pub arch_digest: String,
    pub step: u64,
    pub params: Vec<(String, Tensor<T>)>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn capture(config: &RunConfig, model: &JointModel<T>, step: u64, adam: Option<&AdamState<T>>) -> Self {
        ModelCheckpoint {
            config: config.clone(),
            arch_digest: model.arch.digest(),
            step,
            params: model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: adam.cloned(),
        }
    }

    /// Rebuilds the model described by the embedded config and loads the weights.
    pub fn restore(&self) -> Result<JointModel<T>> {
        let arch = self.config.architecture();
        if arch.digest() != self.arch_digest {
            return Err(Error::Invalid("checkpoint digest does not match its embedded config".into()));
        }
        let mut model = JointModel::new(arch, 0)?;
        if model.store.len() != self.params.len() {
            return Err(shape_err("restore", format!("{} tensors for {} parameters", self.params.len(), model.store.len())));
        }
        for ((name, _), (want, _)) in self.params.iter().zip(model.store.iter()) {
            if name != want {
                return Err(Error::Invalid(format!("checkpoint tensor {name} where {want} expected")));
            }
        }
        model.store.assign(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> ModelCheckpoint<U> {
        ModelCheckpoint {
            config: self.config.clone(),
            arch_digest: self.arch_digest.clone(),
            step: self.step,
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            adam: self.adam.as_ref().map(|a| AdamState {
                m: a.m.iter().map(Tensor::cast).collect(),
                v: a.v.iter().map(Tensor::cast).collect(),
                step: a.step,
            }),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch_digest.len() as u16).to_le_bytes());
        out.extend_from_slice(self.arch_digest.as_bytes());
        let json = serde_json::to_string(&self.config).expect("run config serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t);
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for t in a.m.iter().chain(&a.v) {
                    write_tensor(&mut out, t);
                }
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format { offset: 0, detail: "not a checkpoint file (bad magic)".into() });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Format { offset: at, detail: format!("unsupported checkpoint version {version}") });
        }
        let n = r.u16("digest length")?;
        let arch_digest = r.string(n, "digest")?;
        let n = r.u32("config length")?;
        let at = r.pos;
        let json = r.string(n, "config")?;
        let config: RunConfig =
            serde_json::from_str(&json).map_err(|e| Error::Format { offset: at, detail: format!("config: {e}") })?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")?;
        let mut params = Vec::with_capacity(count.min(1 << 12));
        for _ in 0..count {
            let n = r.u16("name length")?;
            let name = r.string(n, "tensor name")?;
            params.push((name, read_tensor(&mut r)?));
        }
        let at = r.pos;
        let adam = match r.take(1, "moment flag")?[0] {
            0 => None,
            1 => {
                let astep = r.u64("adam step")?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for _ in 0..count {
                    m.push(read_tensor(&mut r)?);
                }
                for _ in 0..count {
                    v.push(read_tensor(&mut r)?);
                }
                Some(AdamState { m, v, step: astep })
            }
            other => return Err(Error::Format { offset: at, detail: format!("bad moment flag {other}") }),
        };
        r.checksum()?;
        Ok(ModelCheckpoint { config, arch_digest, step, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Invalid(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>) -> Result<Tensor<T>> {
    let ndim = r.u32("tensor rank")?;
    if ndim > 8 {
        return Err(r.err(format!("tensor rank {ndim} implausible")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32("tensor extent")?);
    }
    let at = r.pos;
    let dtype = DType::from_tag(r.take(1, "dtype")?[0]).ok_or_else(|| Error::Format { offset: at, detail: "unknown dtype tag".into() })?;
    let n: usize = shape.iter().product();
    let raw = r.take(n * dtype.width(), "tensor values")?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

/// Parameter-wise mean; optimizer state is dropped and config/step come from the last input.
pub fn average_checkpoints<T: Scalar>(ckpts: &[ModelCheckpoint<T>]) -> Result<ModelCheckpoint<T>> {
    let Some(last) = ckpts.last() else {
        return Err(Error::Invalid("no checkpoints to average".into()));
    };
    for c in ckpts {
        if c.arch_digest != last.arch_digest {
            return Err(Error::Invalid(format!("architecture digests differ: {} vs {}", c.arch_digest, last.arch_digest)));
        }
        if c.params.len() != last.params.len() {
            return Err(shape_err("average_checkpoints", "tensor counts differ"));
        }
        for ((na, ta), (nb, tb)) in c.params.iter().zip(&last.params) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(shape_err("average_checkpoints", format!("{na} {:?} vs {nb} {:?}", ta.shape(), tb.shape())));
            }
        }
    }
    let k = T::from_usize(ckpts.len()).unwrap();
    let params = last
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut sum = vec![T::zero(); t.len()];
            for c in ckpts {
                for (s, &v) in sum.iter_mut().zip(c.params[i].1.data()) {
                    *s += v;
                }
            }
            let data = sum.into_iter().map(|s| s / k).collect();
            (name.clone(), Tensor::new(t.shape(), data).expect("shape preserved"))
        })
        .collect();
    Ok(ModelCheckpoint { config: last.config.clone(), arch_digest: last.arch_digest.clone(), step: last.step, params, adam: None })
}
