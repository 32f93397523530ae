//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"CAPCKPT1"
//! u64 n, n bytes            JSON config block
//! u64 count                 parameters, each:
//!   u32 len, name bytes, u32 ndim, ndim × u64 dims, f64 data
//! u64 count                 batchnorm statistics, each:
//!   u32 len, name bytes, u64 channels, f64 mean, f64 var
//! u8 0 | 1                  optimiser state present, then:
//!   u64 n, n bytes          JSON schedule state
//!   one f64 array per parameter, same order and shapes
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::audio::FeatureConfig;
use crate::autodiff::{Array, BnStats};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{BnBank, ParamStore};

pub const MAGIC: &[u8; 8] = b"CAPCKPT1";

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub features: FeatureConfig,
}

/// Learning-rate schedule position.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub epoch: usize,
    pub lr: f64,
    pub best: Option<f64>,
    pub since_improvement: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub schedule: Schedule,
    pub velocity: Vec<Array>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub features: FeatureConfig,
    pub optim: Option<OptimState>,
}

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.w.write_all(b)
    }

    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn name(&mut self, s: &str) -> std::io::Result<()> {
        self.bytes(&(s.len() as u32).to_le_bytes())?;
        self.bytes(s.as_bytes())
    }

    fn blob(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.u64(b.len() as u64)?;
        self.bytes(b)
    }

    fn reals(&mut self, v: &[f64]) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 8);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }
}

struct Reader<R: Read> {
    r: R,
}

fn truncated(e: std::io::Error) -> Error {
    Error::format("checkpoint", format!("truncated or unreadable: {e}"))
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.r.read_exact(buf).map_err(truncated)
    }

    fn u8(&mut self) -> Result<u8> {
        let mut b = [0; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let mut b = [0; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let mut b = [0; 8];
        self.fill(&mut b)?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::format("checkpoint", "size overflow"))
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        if n > 1 << 34 {
            return Err(Error::format("checkpoint", format!("implausible length {n}")));
        }
        let mut v = vec![0; n];
        self.fill(&mut v)?;
        Ok(v)
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.vec(n)?).map_err(|_| Error::format("checkpoint", "name is not UTF-8"))
    }

    fn blob(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()?;
        self.vec(n)
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.vec(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn json<T: serde::Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("plain data serialises")
}

fn from_json<T: serde::de::DeserializeOwned>(b: &[u8], what: &'static str) -> Result<T> {
    serde_json::from_slice(b).map_err(|e| Error::format(what, e.to_string()))
}

/// Writes to a sibling temporary file first, so an interrupted save never
/// replaces a good checkpoint.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let io = |e| Error::io(&tmp, e);
    {
        let file = File::create(&tmp).map_err(io)?;
        let mut w = Writer { w: BufWriter::new(file) };
        let m = &ckpt.model;
        w.bytes(MAGIC).map_err(io)?;
        let cfg = CheckpointConfig {
            model: m.cfg.clone(),
            features: ckpt.features.clone(),
        };
        w.blob(&json(&cfg)).map_err(io)?;
        w.u64(m.params.len() as u64).map_err(io)?;
        for (name, a) in m.params.iter() {
            w.name(name).map_err(io)?;
            w.bytes(&(a.ndim() as u32).to_le_bytes()).map_err(io)?;
            for &d in a.shape() {
                w.u64(d as u64).map_err(io)?;
            }
            w.reals(a.data()).map_err(io)?;
        }
        w.u64(m.bn.len() as u64).map_err(io)?;
        for (name, s) in &m.bn {
            w.name(name).map_err(io)?;
            w.u64(s.mean.len() as u64).map_err(io)?;
            w.reals(&s.mean).map_err(io)?;
            w.reals(&s.var).map_err(io)?;
        }
        match &ckpt.optim {
            None => w.bytes(&[0]).map_err(io)?,
            Some(o) => {
                w.bytes(&[1]).map_err(io)?;
                w.blob(&json(&o.schedule)).map_err(io)?;
                for v in &o.velocity {
                    w.reals(v.data()).map_err(io)?;
                }
            }
        }
        w.w.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { r: BufReader::new(file) };
    let mut magic = [0; 8];
    r.fill(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", format!("{}: bad header", path.display())));
    }
    let cfg: CheckpointConfig = from_json(&r.blob()?, "checkpoint")?;
    let mut params = ParamStore::new();
    for _ in 0..r.u64()? {
        let name = r.name()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let data = r.reals(shape.iter().product())?;
        params.insert(name, Array::new(&shape, data)?);
    }
    let mut bn = BnBank::new();
    for _ in 0..r.u64()? {
        let name = r.name()?;
        let c = r.u64()?;
        let mean = r.reals(c)?;
        let var = r.reals(c)?;
        bn.insert(name, BnStats { mean, var });
    }
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let schedule: Schedule = from_json(&r.blob()?, "checkpoint")?;
            let velocity = params
                .values()
                .iter()
                .map(|p| Array::new(p.shape(), r.reals(p.len())?))
                .collect::<Result<Vec<_>>>()?;
            Some(OptimState { schedule, velocity })
        }
        b => return Err(Error::format("checkpoint", format!("bad optimiser flag {b}"))),
    };
    // The stored tensors must be exactly what the stored config builds.
    let fresh = Model::new(cfg.model.clone(), 0)?;
    let mismatch = fresh.params.len() != params.len()
        || fresh
            .params
            .iter()
            .any(|(n, a)| params.get(n).map(Array::shape) != Some(a.shape()));
    if mismatch || fresh.bn.keys().ne(bn.keys()) {
        return Err(Error::format(
            "checkpoint",
            format!("{}: tensors do not match the stored config", path.display()),
        ));
    }
    // Reorder to construction order so every loaded model binds identically.
    let mut ordered = ParamStore::new();
    for (n, _) in fresh.params.iter() {
        ordered.insert(n, params.get(n).expect("checked").clone());
    }
    let optim = optim.map(|o| {
        let by_name: std::collections::HashMap<&str, &Array> =
            params.names().iter().map(String::as_str).zip(&o.velocity).collect();
        OptimState {
            velocity: fresh.params.names().iter().map(|n| by_name[n.as_str()].clone()).collect(),
            schedule: o.schedule,
        }
    });
    Ok(Checkpoint {
        model: Model {
            cfg: cfg.model,
            params: ordered,
            bn,
        },
        features: cfg.features,
        optim,
    })
}
