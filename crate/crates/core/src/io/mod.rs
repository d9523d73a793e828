//! ACTD binary tensor dumps and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ACTD"  u16 version  u32 entry_count
//! per entry:
//!   u32 name_len  name (UTF-8)  u32 rank  rank x u64 dims
//!   prod(dims) x f64 payload
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 4] = b"ACTD";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("dims {dims:?} need {n} values, got {}", data.len())));
        }
        Ok(Self {
            name: name.into(),
            dims,
            data,
        })
    }
}

pub fn encode_actd(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Format("too many entries".into()))?.to_le_bytes());
    for t in tensors {
        let n: usize = t.dims.iter().product();
        if n != t.data.len() {
            return Err(Error::Shape(format!("tensor {} dims {:?} but {} values", t.name, t.dims, t.data.len())));
        }
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_actd(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes(r.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dims")?).map_err(|_| Error::Format("dimension too large".into()))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            dims.push(d);
        }
        let bytes_needed = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let payload = r.take(bytes_needed, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push(Tensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_actd(path: &Path, tensors: &[Tensor]) -> Result<()> {
    write_atomic(path, &encode_actd(tensors)?)
}

pub fn read_actd(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| missing_or_io(path, "tensor file", e))?;
    decode_actd(&bytes)
}

fn missing_or_io(path: &Path, what: &'static str, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::Missing {
            what,
            path: path.to_path_buf(),
        }
    } else {
        Error::io(path, e)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub init_scheme: String,
    /// Free-form description of how the weights were produced.
    pub training: serde_json::Value,
    pub checksum: String,
    pub tensor_file: String,
}

pub const INIT_SCHEME: &str = "embedding N(0,1); norm gains 1; wq/wk/wv/w1/unembed N(0,1/fan_in); \
wo/w2 N(0,1/fan_in)/sqrt(2*n_layers); ChaCha8 stream seeded by config.seed";

pub fn params_to_tensors(params: &Parameters) -> Vec<Tensor> {
    params
        .tensor_specs()
        .iter()
        .map(|s| Tensor {
            name: s.name.clone(),
            dims: s.shape.clone(),
            data: params.flat()[s.range()].to_vec(),
        })
        .collect()
}

/// Writes `<stem>.actd` and `<stem>.json`; returns both paths.
pub fn save_checkpoint(params: &Parameters, dir: &Path, stem: &str, training: serde_json::Value) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let actd = dir.join(format!("{stem}.actd"));
    let json = dir.join(format!("{stem}.json"));
    write_actd(&actd, &params_to_tensors(params))?;
    let manifest = CheckpointManifest {
        config: params.config().clone(),
        seed: params.config().seed,
        init_scheme: INIT_SCHEME.to_string(),
        training,
        checksum: params.checksum(),
        tensor_file: format!("{stem}.actd"),
    };
    write_atomic(&json, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok((actd, json))
}

/// Loads a checkpoint from its JSON sidecar and verifies the checksum.
pub fn load_checkpoint(json: &Path) -> Result<(Parameters, CheckpointManifest)> {
    let text = fs::read_to_string(json).map_err(|e| missing_or_io(json, "checkpoint manifest", e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let actd = json.with_file_name(&manifest.tensor_file);
    let tensors = read_actd(&actd)?;
    let probe = Parameters::from_flat(
        manifest.config.clone(),
        vec![0.0; crate::model::parameter_count(&manifest.config)],
    )?;
    let mut data = Vec::with_capacity(probe.len());
    let specs = probe.tensor_specs();
    if specs.len() != tensors.len() {
        return Err(Error::Format(format!(
            "{}: {} tensors, config needs {}",
            actd.display(),
            tensors.len(),
            specs.len()
        )));
    }
    for (s, t) in specs.iter().zip(&tensors) {
        if s.name != t.name || s.shape != t.dims {
            return Err(Error::Format(format!(
                "{}: expected {} {:?}, found {} {:?}",
                actd.display(),
                s.name,
                s.shape,
                t.name,
                t.dims
            )));
        }
        data.extend_from_slice(&t.data);
    }
    let params = Parameters::from_flat(manifest.config.clone(), data)?;
    if params.checksum() != manifest.checksum {
        return Err(Error::Format(format!("{}: checksum mismatch", actd.display())));
    }
    Ok((params, manifest))
}
