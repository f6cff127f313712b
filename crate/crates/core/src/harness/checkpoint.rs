//! Binary checkpoint: config echo, progress counters, loss trace, and every
//! parameter with its momentum buffer.
//!
//! Layout (little-endian): `b"LCKP"`, version `u8`, three zero bytes,
//! `u32` config length + UTF-8 config text, `u32` epoch, `u64` episodes
//! consumed from the training stream, `u32` trace length + `f64` losses,
//! `u32` parameter count, then per parameter `u16` name length + name and
//! two length-prefixed (`u64`) `LTSR` blobs: value and velocity.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::episodes::format;
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::harness::model::Lerenet;
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LCKP";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub epoch: usize,
    /// Position in the training episode stream, the sampler's only state.
    pub episodes_done: u64,
    pub loss_trace: Vec<f64>,
    pub params: Vec<(String, Tensor<f32>)>,
    pub velocity: Vec<Tensor<f32>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Format {
            field,
            detail: "truncated".into(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, field: &'static str) -> Result<usize> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")) as usize)
    }

    fn u32(&mut self, field: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize, field: &'static str) -> Result<String> {
        String::from_utf8(self.take(len, field)?.to_vec()).map_err(|e| Error::Format {
            field,
            detail: e.to_string(),
        })
    }

    fn tensor(&mut self, field: &'static str) -> Result<Tensor<f32>> {
        let len = self.u64(field)?;
        let len = usize::try_from(len).map_err(|_| Error::Format {
            field,
            detail: "length overflows".into(),
        })?;
        format::decode(self.take(len, field)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, field: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format {
        field,
        detail: format!("{v} exceeds u32"),
    })?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    let blob = format::encode(t)?;
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(&blob);
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[VERSION, 0, 0, 0]);
        let text = self.config.to_text();
        put_u32(&mut out, text.len(), "config")?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.epoch, "epoch")?;
        out.extend_from_slice(&self.episodes_done.to_le_bytes());
        put_u32(&mut out, self.loss_trace.len(), "loss_trace")?;
        for v in &self.loss_trace {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if self.velocity.len() != self.params.len() {
            return Err(Error::Validation("velocity count differs from parameter count".into()));
        }
        put_u32(&mut out, self.params.len(), "params")?;
        for ((name, value), vel) in self.params.iter().zip(&self.velocity) {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format {
                field: "name",
                detail: "parameter name too long".into(),
            })?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            put_tensor(&mut out, value)?;
            put_tensor(&mut out, vel)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format {
                field: "magic",
                detail: "not a checkpoint".into(),
            });
        }
        let header = r.take(4, "version")?;
        if header[0] != VERSION {
            return Err(Error::Format {
                field: "version",
                detail: format!("unsupported version {}", header[0]),
            });
        }
        let text_len = r.u32("config")?;
        let config = Config::parse(&r.string(text_len, "config")?)?;
        let epoch = r.u32("epoch")?;
        let episodes_done = r.u64("episodes_done")?;
        let trace_len = r.u32("loss_trace")?;
        let loss_trace = (0..trace_len)
            .map(|_| r.u64("loss_trace").map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        let count = r.u32("params")?;
        let mut params = Vec::with_capacity(count);
        let mut velocity = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16("name")?;
            let name = r.string(len, "name")?;
            let value = r.tensor("value")?;
            let vel = r.tensor("velocity")?;
            if vel.shape() != value.shape() {
                return Err(Error::Format {
                    field: "velocity",
                    detail: format!("shape differs for {name}"),
                });
            }
            params.push((name, value));
            velocity.push(vel);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                field: "trailer",
                detail: format!("{} unexpected trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint {
            config,
            epoch,
            episodes_done,
            loss_trace,
            params,
            velocity,
        })
    }

    /// Write via a temporary file and rename, so readers never see a
    /// partially written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild the model and a store holding the saved values. Names and
    /// shapes must match what the config builds.
    pub fn restore(&self) -> Result<(Lerenet, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Lerenet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &self.config)?;
        if store.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, config builds {}",
                self.params.len(),
                store.len()
            )));
        }
        for (p, (name, value)) in store.iter_mut().zip(&self.params) {
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {name} {:?} does not match {} {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok((model, store))
    }
}
