//! Binary checkpoint files.
//!
//! Layout (all integers and floats little-endian):
//!
//! | field            | encoding                                        |
//! |------------------|-------------------------------------------------|
//! | magic            | 8 bytes, `DCOYCKPT`                             |
//! | version          | u32                                             |
//! | file length      | u64, total bytes including the trailing hash    |
//! | config           | u32 length + UTF-8 TOML                         |
//! | global step      | u64                                             |
//! | updates          | u64                                             |
//! | stage updates    | u64                                             |
//! | stage            | u32                                             |
//! | parent hash      | u16 length + ASCII hex (empty when none)        |
//! | eval history     | u32 count + f64 each                            |
//! | optimizer        | u64 step, f64 lr, beta1, beta2, eps             |
//! | hidden width     | u32                                             |
//! | tensor blocks    | u32 count, then per block: u16 name length,     |
//! |                  | name, u32 rank, u64 per dim, f64 per element    |
//! | content hash     | 32 bytes, SHA-256 of everything before it       |
//!
//! Blocks are named `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::diffgraph::{Adam, Tensor};
use crate::error::{CheckpointError, Error, Result};
use crate::policy::PolicyParams;

pub const MAGIC: &[u8; 8] = b"DCOYCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const HASH_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: PolicyParams,
    pub optimizer: Adam,
    /// Environment steps consumed since the first stage began.
    pub global_step: u64,
    pub updates: u64,
    /// Updates completed in the current stage.
    pub stage_updates: u64,
    pub stage: u32,
    /// Content hash of the checkpoint this run was initialized from.
    pub parent_hash: Option<String>,
    /// Mean bipartite distance of every periodic evaluation so far.
    pub eval_history: Vec<f64>,
}

impl Checkpoint {
    pub fn fresh(config: RunConfig) -> Result<Self> {
        let params = PolicyParams::new(&config.network)?;
        let optimizer = Adam::new(&params.set, config.train.lr);
        Ok(Self {
            config,
            params,
            optimizer,
            global_step: 0,
            updates: 0,
            stage_updates: 0,
            stage: 1,
            parent_hash: None,
            eval_history: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u64(0); // patched below
        let cfg = self.config.to_toml_string();
        w.u32(cfg.len() as u32);
        w.0.extend_from_slice(cfg.as_bytes());
        w.u64(self.global_step);
        w.u64(self.updates);
        w.u64(self.stage_updates);
        w.u32(self.stage);
        w.string(self.parent_hash.as_deref().unwrap_or(""));
        w.u32(self.eval_history.len() as u32);
        for v in &self.eval_history {
            w.f64(*v);
        }
        let opt = &self.optimizer;
        w.u64(opt.step);
        for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
            w.f64(v);
        }
        w.u32(self.params.hidden() as u32);
        let set = &self.params.set;
        w.u32(3 * set.len() as u32);
        for (prefix, tensors) in [
            ("param", set.tensors()),
            ("adam.m", &opt.first_moment[..]),
            ("adam.v", &opt.second_moment[..]),
        ] {
            for (i, t) in tensors.iter().enumerate() {
                w.string(&format!("{prefix}/{}", set.name(crate::diffgraph::ParamId(i))));
                w.u32(t.shape().len() as u32);
                for d in t.shape() {
                    w.u64(*d as u64);
                }
                for v in t.data() {
                    w.f64(*v);
                }
            }
        }
        let total = (w.0.len() + HASH_LEN) as u64;
        w.0[12..20].copy_from_slice(&total.to_le_bytes());
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(CheckpointError::Malformed("not a checkpoint file (bad magic)".into()).into());
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Truncated {
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            }
            .into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        let declared = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if (bytes.len() as u64) < declared {
            return Err(CheckpointError::Truncated {
                expected: declared,
                actual: bytes.len() as u64,
            }
            .into());
        }
        if bytes.len() as u64 != declared || bytes.len() < HEADER_LEN + HASH_LEN {
            return Err(CheckpointError::Malformed(format!(
                "declared length {declared} but file holds {} bytes",
                bytes.len()
            ))
            .into());
        }
        let (body, stored) = bytes.split_at(bytes.len() - HASH_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(CheckpointError::HashMismatch {
                stored: hex::encode(stored),
                computed: hex::encode(computed),
            }
            .into());
        }

        let mut r = Reader { buf: body, pos: HEADER_LEN };
        let cfg_len = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(cfg_len)?).map_err(|e| malformed(format!("config text: {e}")))?;
        let config = RunConfig::from_toml_str(cfg_text).map_err(|e| malformed(format!("embedded config: {e}")))?;
        let global_step = r.u64()?;
        let updates = r.u64()?;
        let stage_updates = r.u64()?;
        let stage = r.u32()?;
        let parent = r.string()?;
        let parent_hash = (!parent.is_empty()).then_some(parent);
        let n_hist = r.u32()? as usize;
        let eval_history = (0..n_hist).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let step = r.u64()?;
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let hidden = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..n_blocks {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let tensor = Tensor::new(shape, data)?;
            match name.split_once('/') {
                Some(("param", p)) => params.push((p.to_string(), tensor)),
                Some(("adam.m", p)) => first.push((p.to_string(), tensor)),
                Some(("adam.v", p)) => second.push((p.to_string(), tensor)),
                _ => return Err(malformed(format!("unknown tensor block `{name}`"))),
            }
        }
        if r.pos != body.len() {
            return Err(malformed(format!("{} trailing bytes after tensor blocks", body.len() - r.pos)));
        }
        let params = PolicyParams::from_named(hidden, &params)?;
        let moments = |named: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
            let by_name = PolicyParams::from_named(hidden, &named)?;
            Ok(by_name.set.tensors().to_vec())
        };
        let optimizer = Adam {
            lr,
            beta1,
            beta2,
            eps,
            step,
            first_moment: moments(first)?,
            second_moment: moments(second)?,
        };
        Ok(Self {
            config,
            params,
            optimizer,
            global_step,
            updates,
            stage_updates,
            stage,
            parent_hash,
            eval_history,
        })
    }

    /// Writes the file and returns its content hash (hex).
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&bytes[bytes.len() - HASH_LEN..]))
    }

    /// Reads and verifies a file; returns the checkpoint and its content hash.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Self::from_bytes(&bytes)?;
        Ok((ckpt, hex::encode(&bytes[bytes.len() - HASH_LEN..])))
    }

    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - HASH_LEN..])
    }
}

fn malformed(msg: String) -> Error {
    CheckpointError::Malformed(msg).into()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.0.extend_from_slice(&(s.len() as u16).to_le_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(malformed(format!("field at offset {} runs past the end", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| malformed(format!("block name: {e}")))
    }
}
