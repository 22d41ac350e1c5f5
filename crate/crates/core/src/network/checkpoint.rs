use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Array, ParamStore};

pub const MAGIC: &[u8; 4] = b"SEDK";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

/// Serialized model plus optional optimiser state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    pub epoch: usize,
    pub best_dev_f1: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    best_dev_f1: f64,
    adam: Option<AdamHeader>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    config: AdamConfig,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self {
            model,
            adam: None,
            epoch: 0,
            best_dev_f1: 0.0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            epoch: self.epoch,
            best_dev_f1: self.best_dev_f1,
            adam: self.adam.as_ref().map(|a| AdamHeader { t: a.t, config: a.config }),
        };
        let text = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_bytes(&mut out, text.as_bytes())?;
        let params = &self.model.params;
        for (name, value) in params.iter() {
            put_record(&mut out, name, value)?;
        }
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [(MOMENT_M, &adam.m), (MOMENT_V, &adam.v)] {
                for (i, a) in moments.iter().enumerate() {
                    put_record(&mut out, &format!("{prefix}{}", params.name(i)), a)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let text = r.string()?;
        let header: Header =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        while !r.done() {
            let name = r.string()?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Parse("record too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = Array::new(shape, data)?;
            if let Some(rest) = name.strip_prefix(MOMENT_M) {
                m.insert(rest, array);
            } else if let Some(rest) = name.strip_prefix(MOMENT_V) {
                v.insert(rest, array);
            } else {
                params.insert(name, array);
            }
        }
        let model = Model::from_parts(header.model, params)?;
        let adam = match header.adam {
            None => None,
            Some(h) => Some(AdamState {
                config: h.config,
                m: align_moments(&model.params, &m, "first")?,
                v: align_moments(&model.params, &v, "second")?,
                t: h.t,
            }),
        };
        Ok(Self {
            model,
            adam,
            epoch: header.epoch,
            best_dev_f1: header.best_dev_f1,
        })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads parameters from `path` into a model built from `config`,
    /// rejecting any name or shape mismatch.
    pub fn load_into(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model<f32>> {
        let ckpt = Self::load(path)?;
        Model::from_parts(config.clone(), ckpt.model.params)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn align_moments(params: &ParamStore<f32>, moments: &ParamStore<f32>, which: &str) -> Result<Vec<Array<f32>>> {
    if moments.len() != params.len() {
        return Err(Error::Format(format!(
            "{} {which}-moment records for {} parameters",
            moments.len(),
            params.len()
        )));
    }
    params
        .iter()
        .map(|(name, p)| match moments.get(name) {
            Some(a) if a.shape() == p.shape() => Ok(a.clone()),
            _ => Err(Error::Format(format!("{which} moment for '{name}' missing or misshapen"))),
        })
        .collect()
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) -> Result<()> {
    let n = u32::try_from(b.len()).map_err(|_| Error::Format("field longer than 4 GiB".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(b);
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, a: &Array<f32>) -> Result<()> {
    put_bytes(out, name.as_bytes())?;
    let rank = u8::try_from(a.rank()).map_err(|_| Error::Format(format!("'{name}' rank too high")))?;
    out.push(rank);
    for &e in a.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("'{name}' extent too large")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &x in a.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Parse("checkpoint text is not UTF-8".into()))
    }
}
