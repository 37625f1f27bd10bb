//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes  "MITSEGCK"
//! version      u32      (currently 1)
//! iteration    u64      optimizer steps completed
//! seed         u64
//! model        u32 length + UTF-8 TOML (resolved ModelConfig)
//! run          u32 length + UTF-8 TOML (RunConfig snapshot, may be empty)
//! tensors      u32 count, then per tensor:
//!                u32 length + UTF-8 name
//!                u32 rank, rank × u64 extents
//!                numel × f32 values
//! optimizer    u8 flag (0 absent, 1 present); when present:
//!                u64 step count t
//!                per tensor in table order: numel × f32 first moment,
//!                then numel × f32 second moment
//! ```

use std::path::Path;

use crate::config::RunConfig;
use crate::decoder::{ModelConfig, SegModel};
use crate::error::{Error, Result};
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MITSEGCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub iteration: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub run: Option<RunConfig>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamWState<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &SegModel<f32>, seed: u64) -> Self {
        Self {
            iteration: 0,
            seed,
            model: model.cfg.clone(),
            run: None,
            params: model.params.clone(),
            optimizer: None,
        }
    }

    pub fn build_model(&self) -> Result<SegModel<f32>> {
        SegModel::from_params(&self.model, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.params.numel() * if self.optimizer.is_some() { 3 } else { 1 });
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &toml::to_string(&self.model).expect("model config serializes"));
        put_str(&mut out, &self.run.as_ref().map(RunConfig::to_toml).unwrap_or_default());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(s) => {
                out.push(1);
                out.extend_from_slice(&s.t.to_le_bytes());
                for (m, v) in s.m.iter().zip(&s.v) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let model_text = r.string()?;
        let model: ModelConfig =
            toml::from_str(&model_text).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let run_text = r.string()?;
        let run = if run_text.is_empty() {
            None
        } else {
            Some(RunConfig::parse(&run_text).map_err(|e| Error::Checkpoint(format!("run config: {e}")))?)
        };
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f32s(n)?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            params.register(name, t);
            sizes.push(n);
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut m = Vec::with_capacity(count);
                let mut v = Vec::with_capacity(count);
                for &n in &sizes {
                    m.push(r.f32s(n)?);
                    v.push(r.f32s(n)?);
                }
                Some(AdamWState { t, m, v })
            }
            f => return Err(Error::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { iteration, seed, model, run, params, optimizer })
    }

    /// Write atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
