//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! `MAGIC`, u32 format version, then length-prefixed (u32) UTF-8 strings for
//! the code version, the run config (TOML) and the class names (JSON), a u64
//! training step, a u32 parameter count, and per parameter: name, u32 rank,
//! u64 dims, f32 values.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::RunConfig;
use crate::data::ClassCatalog;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"DSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub code_version: String,
    pub config: RunConfig,
    /// Config text exactly as stored.
    pub config_text: String,
    pub catalog: ClassCatalog,
    pub step: u64,
    pub params: Vec<ParamBlock>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Result<Self> {
        let params = model
            .store()
            .named_vars()
            .into_iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                Ok(ParamBlock {
                    name,
                    dims: t.dims().to_vec(),
                    values: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            code_version: crate::VERSION.to_string(),
            config: model.config().clone(),
            config_text: model.config().to_toml(),
            catalog: model.catalog().clone(),
            step,
            params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.code_version);
        put_str(&mut out, &self.config_text);
        put_str(&mut out, &serde_json::to_string(self.catalog.names()).expect("names serialize"));
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
            for &d in &p.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and refuses files written by a different code version.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_bytes_expecting(bytes, crate::VERSION)
    }

    pub fn from_bytes_expecting(bytes: &[u8], expected: &str) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: format!("format {format}"),
                expected: format!("format {FORMAT_VERSION}"),
            });
        }
        let code_version = r.string()?;
        if code_version != expected {
            return Err(Error::VersionMismatch {
                found: code_version,
                expected: expected.to_string(),
            });
        }
        let config_text = r.string()?;
        let config = RunConfig::from_toml(&config_text)?;
        let names: Vec<String> = serde_json::from_str(&r.string()?)?;
        let catalog = ClassCatalog::new(names)?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = r.take(count * 4)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(ParamBlock { name, dims, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            code_version,
            config,
            config_text,
            catalog,
            step,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and overwrites every parameter with stored values.
    pub fn to_model(&self, device: &Device) -> Result<Model> {
        let model = Model::new(&self.config, self.catalog.clone(), device)?;
        let expected = model.store().named_vars();
        if expected.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                expected.len()
            )));
        }
        for p in &self.params {
            let var = model
                .store()
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {}", p.name)))?;
            if var.as_tensor().dims() != p.dims.as_slice() {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    p.dims,
                    var.as_tensor().dims()
                )));
            }
            let t = Tensor::from_vec(p.values.clone(), p.dims.as_slice(), device)?;
            model.store().set(&p.name, &t)?;
        }
        Ok(model)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("checkpoint string is not UTF-8".into()))
    }
}
