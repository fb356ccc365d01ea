//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  b"PCLMCKPT"
//! version          u32      currently 1
//! config_len       u32      followed by that many bytes of key=value text
//! training_step    u64
//! n_tensors        u32
//!   per tensor:    name_len u32, name bytes, ndim u32, dims u64 × ndim,
//!                  offset u64 (floats, from data start), numel u64
//! opt_flag         u8       0 = none, 1 = optimizer state present
//!   if present:    opt_step u64, n_entries u32,
//!                  per entry: name_len u32, name, decay u8,
//!                             exp_avg offset u64, exp_avg_sq offset u64, numel u64
//! data             raw little-endian f32
//! ```
//!
//! Tensor order is the canonical parameter order, so save → load → save
//! reproduces files byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{build_model, parse_kv_text, Model, ModelConfig, ModelError};

const MAGIC: &[u8; 8] = b"PCLMCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("embedded config invalid: {0}")]
    Config(String),
    #[error("tensor {name}: stored shape {got:?} disagrees with config shape {expected:?}")]
    ShapeDisagreement {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint contains unknown tensor {0}")]
    UnknownTensor(String),
    #[error("optimizer state missing for parameter {0}")]
    MissingOptimizerState(String),
}

/// Adam moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerEntry {
    pub name: String,
    pub decay: bool,
    pub exp_avg: Vec<f32>,
    pub exp_avg_sq: Vec<f32>,
}

/// Optimizer state carried inside a checkpoint: step counter plus
/// per-parameter moments and group membership.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub entries: Vec<OptimizerEntry>,
}

/// In-memory checkpoint: config, named tensors in canonical order, training
/// step, and optional optimizer state.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub training_step: u64,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        training_step: u64,
        optimizer: Option<OptimizerSnapshot>,
    ) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|p| (p.name, p.tensor.shape().to_vec(), p.tensor.to_vec()))
            .collect();
        Checkpoint {
            config: model.cfg.clone(),
            training_step,
            tensors,
            optimizer,
        }
    }

    /// Rebuilds a model, verifying that every stored tensor matches the shape
    /// the embedded config implies and that none are missing or unexpected.
    pub fn to_model(&self) -> Result<Model<f32>, CheckpointError> {
        let model = build_model::<f32>(&self.config, 0)
            .map_err(|e| CheckpointError::Config(e.to_string()))?;
        let params = model.params();
        let mut expected: std::collections::BTreeMap<String, crate::tensor::Tensor<f32>> =
            params.into_iter().map(|p| (p.name, p.tensor)).collect();
        for (name, shape, data) in &self.tensors {
            let Some(target) = expected.remove(name) else {
                return Err(CheckpointError::UnknownTensor(name.clone()));
            };
            if target.shape() != shape.as_slice() {
                return Err(CheckpointError::ShapeDisagreement {
                    name: name.clone(),
                    got: shape.clone(),
                    expected: target.shape().to_vec(),
                });
            }
            target.leaf_data_mut().copy_from_slice(data);
        }
        if let Some((name, _)) = expected.into_iter().next() {
            return Err(CheckpointError::MissingTensor(name));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let config_text = self.config.to_kv_text();
        w.write_all(&(config_text.len() as u32).to_le_bytes())?;
        w.write_all(config_text.as_bytes())?;
        w.write_all(&self.training_step.to_le_bytes())?;

        // Directory first, then one contiguous data region.
        let mut offset: u64 = 0;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.tensors {
            write_name(&mut w, name)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            w.write_all(&(data.len() as u64).to_le_bytes())?;
            offset += data.len() as u64;
        }
        match &self.optimizer {
            None => w.write_all(&[0u8])?,
            Some(opt) => {
                w.write_all(&[1u8])?;
                w.write_all(&opt.step.to_le_bytes())?;
                w.write_all(&(opt.entries.len() as u32).to_le_bytes())?;
                for e in &opt.entries {
                    write_name(&mut w, &e.name)?;
                    w.write_all(&[e.decay as u8])?;
                    w.write_all(&offset.to_le_bytes())?;
                    offset += e.exp_avg.len() as u64;
                    w.write_all(&offset.to_le_bytes())?;
                    offset += e.exp_avg_sq.len() as u64;
                    w.write_all(&(e.exp_avg.len() as u64).to_le_bytes())?;
                }
            }
        }
        for (_, _, data) in &self.tensors {
            write_f32s(&mut w, data)?;
        }
        if let Some(opt) = &self.optimizer {
            for e in &opt.entries {
                write_f32s(&mut w, &e.exp_avg)?;
                write_f32s(&mut w, &e.exp_avg_sq)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = Reader {
            inner: BufReader::new(File::open(path)?),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_len = r.u32("config length")? as usize;
        let mut config_bytes = vec![0u8; config_len];
        r.read_exact(&mut config_bytes, "config text")?;
        let config_text =
            String::from_utf8(config_bytes).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let config = parse_config(&config_text)?;
        let training_step = r.u64("training step")?;

        let n_tensors = r.u32("tensor count")? as usize;
        struct Dir {
            name: String,
            shape: Vec<usize>,
            offset: u64,
            numel: u64,
        }
        let mut dirs = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.name()?;
            let ndim = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("tensor dim")? as usize);
            }
            let offset = r.u64("tensor offset")?;
            let numel = r.u64("tensor size")?;
            dirs.push(Dir {
                name,
                shape,
                offset,
                numel,
            });
        }

        struct OptDir {
            name: String,
            decay: bool,
            avg_offset: u64,
            sq_offset: u64,
            numel: u64,
        }
        let opt_flag = r.u8("optimizer flag")?;
        let mut opt_step = 0u64;
        let mut opt_dirs: Vec<OptDir> = Vec::new();
        if opt_flag == 1 {
            opt_step = r.u64("optimizer step")?;
            let n = r.u32("optimizer entry count")? as usize;
            for _ in 0..n {
                let name = r.name()?;
                let decay = r.u8("decay flag")? != 0;
                let avg_offset = r.u64("exp_avg offset")?;
                let sq_offset = r.u64("exp_avg_sq offset")?;
                let numel = r.u64("moment size")?;
                opt_dirs.push(OptDir {
                    name,
                    decay,
                    avg_offset,
                    sq_offset,
                    numel,
                });
            }
        }

        let total: u64 = dirs.iter().map(|d| d.numel).sum::<u64>()
            + opt_dirs.iter().map(|d| 2 * d.numel).sum::<u64>();
        let data = r.f32s(total as usize, "tensor data")?;
        let slice = |offset: u64, numel: u64| -> Result<Vec<f32>, CheckpointError> {
            let start = offset as usize;
            let end = start + numel as usize;
            data.get(start..end)
                .map(<[f32]>::to_vec)
                .ok_or(CheckpointError::Truncated("tensor data"))
        };

        let mut tensors = Vec::with_capacity(dirs.len());
        for d in dirs {
            let expected: usize = d.shape.iter().product();
            if expected as u64 != d.numel {
                return Err(CheckpointError::ShapeDisagreement {
                    name: d.name,
                    got: d.shape,
                    expected: vec![d.numel as usize],
                });
            }
            let data = slice(d.offset, d.numel)?;
            tensors.push((d.name, d.shape, data));
        }
        let optimizer = if opt_flag == 1 {
            let mut entries = Vec::with_capacity(opt_dirs.len());
            for d in opt_dirs {
                entries.push(OptimizerEntry {
                    exp_avg: slice(d.avg_offset, d.numel)?,
                    exp_avg_sq: slice(d.sq_offset, d.numel)?,
                    name: d.name,
                    decay: d.decay,
                });
            }
            Some(OptimizerSnapshot {
                step: opt_step,
                entries,
            })
        } else {
            None
        };

        Ok(Checkpoint {
            config,
            training_step,
            tensors,
            optimizer,
        })
    }
}

fn parse_config(text: &str) -> Result<ModelConfig, CheckpointError> {
    let map = parse_kv_text(text).map_err(config_err)?;
    ModelConfig::from_kv(&map, ModelConfig::desk()).map_err(config_err)
}

fn config_err(e: ModelError) -> CheckpointError {
    CheckpointError::Config(e.to_string())
}

fn write_name<W: Write>(w: &mut W, name: &str) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
        self.inner
            .read_exact(buf)
            .map_err(|_| CheckpointError::Truncated(what))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32("name length")? as usize;
        let mut bytes = vec![0u8; len];
        self.read_exact(&mut bytes, "name")?;
        String::from_utf8(bytes).map_err(|_| CheckpointError::Truncated("name"))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}
