//! Checkpoint files.
//!
//! Layout: `b"DCKP"`, version byte, then little-endian: u64 length + UTF-8
//! model config (`key=value` lines), u64 length + UTF-8 metadata lines, u64
//! step, u64 seed, u32 tensor count, and per tensor a u32 name length, the
//! name and one tensor record in the `DTNS` format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::net::{param_specs, Model};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor, DType};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u8 = 1;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Free-form `key=value` entries (training hyperparameters, metrics).
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn fmt_err(m: impl Into<String>) -> Error {
    Error::Format(m.into())
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => fmt_err("truncated checkpoint"),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r, 8)?.try_into().unwrap()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().unwrap()))
}

fn read_text<R: Read>(r: &mut R, len: usize) -> Result<String> {
    String::from_utf8(read_bytes(r, len)?).map_err(|_| fmt_err("checkpoint text is not UTF-8"))
}

impl Checkpoint {
    /// Captures weights and buffers of `model`.
    pub fn from_model(model: &Model, step: u64, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        for (n, t) in model.store.params() {
            tensors.insert(format!("{PARAM}{n}"), t.detach());
        }
        for (n, t) in model.store.buffers() {
            tensors.insert(format!("{BUFFER}{n}"), t.detach());
        }
        Self {
            config: model.config.clone(),
            step,
            seed,
            meta: BTreeMap::new(),
            tensors,
        }
    }

    /// Rebuilds the model, checking every declared parameter is present with
    /// the declared shape.
    pub fn to_model(&self) -> Result<Model> {
        self.config.validate()?;
        let mut store = ParamStore::default();
        for spec in param_specs(&self.config) {
            let t = self
                .tensors
                .get(&format!("{PARAM}{}", spec.name))
                .ok_or_else(|| fmt_err(format!("checkpoint lacks parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(fmt_err(format!("parameter {} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
            store.insert(&spec.name, Tensor::param(t.shape(), t.to_vec())?);
        }
        for (n, t) in &self.tensors {
            if let Some(b) = n.strip_prefix(BUFFER) {
                store.set_buffer(b, t.clone());
            }
        }
        let model = Model { config: self.config.clone(), store };
        model.running_stats()?;
        Ok(model)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        let cfg = self.config.to_kv();
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        for text in [&cfg, &meta] {
            w.write_all(&(text.len() as u64).to_le_bytes())?;
            w.write_all(text.as_bytes())?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let count = u32::try_from(self.tensors.len()).map_err(|_| fmt_err("too many tensors"))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t, DType::F64)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let head = read_bytes(r, 5)?;
        if &head[..4] != MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        if head[4] != VERSION {
            return Err(fmt_err(format!("unsupported checkpoint version {}", head[4])));
        }
        let n = read_u64(r)? as usize;
        let config = ModelConfig::from_kv(&read_text(r, n)?)?;
        let n = read_u64(r)? as usize;
        let mut meta = BTreeMap::new();
        for line in read_text(r, n)?.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| fmt_err(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let step = read_u64(r)?;
        let seed = read_u64(r)?;
        let count = read_u32(r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let name = read_text(r, len)?;
            let (t, _) = read_tensor(r)?;
            tensors.insert(name, t);
        }
        Ok(Self { config, step, seed, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
