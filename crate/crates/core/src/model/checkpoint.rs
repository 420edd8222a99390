//! Binary checkpoint file.
//!
//! ```text
//! magic        8 bytes  "CITRNET1"
//! header_len   u32 LE
//! header       UTF-8 "key=value\n" lines: model config keys, then
//!              "meta.<key>=<value>" run metadata
//! count        u32 LE   number of tensor records
//! records      sorted by name, each:
//!   name_len   u32 LE, name bytes (UTF-8)
//!   rank       u32 LE, then rank × u32 LE extents
//!   data       product(extents) × f32 LE
//! ```
//!
//! Parameters use their model names; batch-norm running statistics are
//! stored as `<norm>.running_mean` / `<norm>.running_var`. Other
//! components (the optimizer) add records under their own prefix.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{Citrinet, CitrinetConfig, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"CITRNET1";

pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CitrinetConfig,
    pub meta: CheckpointMeta,
    tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Citrinet<T>, meta: CheckpointMeta) -> Self {
        let mut ckpt = Self {
            config: model.config().clone(),
            meta,
            tensors: BTreeMap::new(),
        };
        for (_, p) in model.store().iter() {
            ckpt.insert(&p.name, p.tensor.shape(), p.tensor.data());
        }
        for rs in model.running_stats() {
            ckpt.insert(&format!("{}.running_mean", rs.name), &[rs.mean.len()], &rs.mean);
            ckpt.insert(&format!("{}.running_var", rs.name), &[rs.var.len()], &rs.var);
        }
        ckpt
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        self.tensors.insert(
            name.to_string(),
            TensorRecord {
                shape: shape.to_vec(),
                data: data.iter().map(|v| v.as_f64() as f32).collect(),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    fn take<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let rec = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
        Ok((rec.shape.clone(), rec.data.iter().map(|&v| T::lit(v as f64)).collect()))
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model<T: Scalar>(&self) -> Result<Citrinet<T>> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = Citrinet::<T>::build(self.config.clone(), &mut rng)?;
        let mut store = ParamStore::new();
        for (_, p) in template.store().iter() {
            let (shape, data) = self.take::<T>(&p.name)?;
            store.add(p.name.clone(), Tensor::new(&shape, data)?, p.decay)?;
        }
        let stats = template
            .running_stats()
            .iter()
            .map(|rs| {
                Ok(RunningStats {
                    name: rs.name.clone(),
                    mean: self.take::<T>(&format!("{}.running_mean", rs.name))?.1,
                    var: self.take::<T>(&format!("{}.running_var", rs.name))?.1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Citrinet::from_parts(self.config.clone(), store, stats)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        for (k, v) in self.config.to_pairs() {
            header.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, rec) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
            for &d in &rec.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &rec.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let header_len = read_u32(&mut bytes)? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut bytes, &mut header)?;
        let header = String::from_utf8(header).map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
        let mut config = CitrinetConfig::default();
        let mut meta = CheckpointMeta::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("checkpoint", format!("bad header line {line:?}")))?;
            if let Some(mk) = k.strip_prefix("meta.") {
                meta.insert(mk.to_string(), v.to_string());
            } else if !config.set(k, v)? {
                return Err(Error::format("checkpoint", format!("unknown config key {k}")));
            }
        }
        let count = read_u32(&mut bytes)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut bytes)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut bytes, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let rank = read_u32(&mut bytes)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(&mut bytes).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            read_exact(&mut bytes, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, TensorRecord { shape, data });
        }
        if !bytes.is_empty() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { config, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(bytes: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    bytes
        .read_exact(buf)
        .map_err(|_| Error::format("checkpoint", "unexpected end of file"))
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(bytes, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
