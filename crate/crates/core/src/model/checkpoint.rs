//! Versioned binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"AGNC"
//! u32     version (= 1)
//! u32     config length, then that many bytes of UTF-8 `key=value` lines
//! u64     seed
//! u32     epoch counter
//! u64     step counter
//! u32     tensor count, then per tensor:
//!           u32 name length, name bytes (UTF-8)
//!           u32 rank, rank × u32 dims
//!           prod(dims) × f32 values, row-major
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AgNetParams, Model, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AGNC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: u32,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, seed: u64, epoch: u32, step: u64) -> Self {
        Self {
            config,
            seed,
            epoch,
            step,
            tensors: Vec::new(),
        }
    }

    /// Appends every tensor of `params`, with names prefixed by `prefix`.
    pub fn push_params(&mut self, prefix: &str, params: &AgNetParams<f32>) {
        for p in params.params() {
            self.tensors.push(NamedTensor {
                name: format!("{prefix}{}", p.name),
                shape: p.shape,
                data: p.data.to_vec(),
            });
        }
    }

    pub fn from_model(model: &Model<f32>, seed: u64, epoch: u32, step: u64) -> Self {
        let mut ckpt = Self::new(model.config().clone(), seed, epoch, step);
        ckpt.push_params("", &model.params);
        ckpt
    }

    /// Rebuilds a parameter set from the tensors stored under `prefix`.
    pub fn restore_params(&self, prefix: &str) -> Result<AgNetParams<f32>> {
        let mut params = Model::<f32>::new(self.config.clone())?.params;
        let wanted: Vec<(String, Vec<usize>)> = params.params().into_iter().map(|p| (p.name, p.shape)).collect();
        for ((name, shape), (_, dst)) in wanted.into_iter().zip(params.params_mut()) {
            let full = format!("{prefix}{name}");
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{full}`")))?;
            if t.shape != shape {
                return Err(Error::Checkpoint(format!("tensor `{full}` has shape {:?}, expected {shape:?}", t.shape)));
            }
            dst.copy_from_slice(&t.data);
        }
        Ok(params)
    }

    /// Loads the model stored in this checkpoint, optionally checking it was
    /// written for `expected`.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<Model<f32>> {
        if let Some(cfg) = expected {
            if cfg != &self.config {
                return Err(Error::Checkpoint(format!(
                    "config mismatch: checkpoint has\n{}but run expects\n{}",
                    self.config.to_kv(),
                    cfg.to_kv()
                )));
            }
        }
        Model::from_params(self.config.clone(), self.restore_params("")?)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let cfg = self.config.to_kv();
        w.write_u32::<LittleEndian>(cfg.len() as u32)?;
        w.write_all(cfg.as_bytes())?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.epoch)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            w.write_u32::<LittleEndian>(t.name.len() as u32)?;
            w.write_all(t.name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
            for &d in &t.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cfg = read_string(&mut r)?;
        let config = ModelConfig::from_kv(&cfg)?;
        let seed = r.read_u64::<LittleEndian>()?;
        let epoch = r.read_u32::<LittleEndian>()?;
        let step = r.read_u64::<LittleEndian>()?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let rank = r.read_u32::<LittleEndian>()?;
            let shape = (0..rank)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            config,
            seed,
            epoch,
            step,
            tensors,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// replaces a valid checkpoint with a truncated one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        {
            let file = File::create(&tmp)?;
            self.write_to(BufWriter::new(file))?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
}
