//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "HDPL" | version u32 | config_len u64 | config JSON
//! tensor_count u64 | per tensor: name_len u32, name, rank u32, dims u64×rank, dtype u8
//! tensor data (f32) in manifest order
//! rng seed u64 | rng counter u64 | crc32 u32 of every preceding byte
//! ```
//!
//! The manifest lists the model parameters, then `m.<name>` and `v.<name>`
//! for the optimizer moments.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimizerState};
use super::schedule::LrSchedule;
use super::TrainState;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::transformer::{tensor_manifest, ModelConfig, TransformerModel};

pub const MAGIC: &[u8; 4] = b"HDPL";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    schedule: LrSchedule,
    optimizer: AdamWConfig,
    optimizer_step: u64,
    step: u64,
    best_val_loss: Option<f64>,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. With `expected`, the stored tensor manifest must be
/// the one a model built from `expected` would have.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let header = Header {
        model: state.model.config.clone(),
        schedule: state.schedule,
        optimizer: state.optimizer.config,
        optimizer_step: state.optimizer.t,
        step: state.step,
        best_val_loss: state.best_val_loss,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Corrupt(e.to_string()))?;
    let params = &state.model.params;
    let groups: [(&str, &[Tensor<f32>]); 3] = [
        ("", params.tensors()),
        ("m.", &state.optimizer.m),
        ("v.", &state.optimizer.v),
    ];

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(3 * params.len() as u64).to_le_bytes());
    for (prefix, tensors) in groups {
        for (name, t) in params.names().iter().zip(tensors) {
            let name = format!("{prefix}{name}");
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(DTYPE_F32);
        }
    }
    for (_, tensors) in groups {
        for t in tensors {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    for w in state.rng.to_words() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("length overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() + 4 + 4 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("missing HDPL magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch (truncated or damaged file)".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported format version {version}")));
    }
    let json_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| Error::Corrupt(format!("config blob: {e}")))?;

    let count = r.len()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if r.u8()? != DTYPE_F32 {
            return Err(Error::Corrupt(format!("{name}: unsupported dtype")));
        }
        entries.push(Entry { name, shape });
    }

    let config = expected.unwrap_or(&header.model);
    check_manifest(config, &entries)?;
    let n = entries.len() / 3;

    let mut tensors = Vec::with_capacity(entries.len());
    for e in &entries {
        let numel: usize = e.shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(&e.shape, data).map_err(|err| Error::Corrupt(format!("{}: {err}", e.name)))?);
    }
    let rng = RngState::from_words([r.u64()?, r.u64()?]);
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
    }

    let mut model = TransformerModel::new(config.clone(), rng.seed)?;
    let mut rest = tensors.into_iter();
    for slot in model.params.tensors_mut() {
        *slot = rest.next().expect("manifest checked");
    }
    let m: Vec<_> = rest.by_ref().take(n).collect();
    let v: Vec<_> = rest.collect();
    Ok(TrainState {
        model,
        optimizer: OptimizerState {
            config: header.optimizer,
            m,
            v,
            t: header.optimizer_step,
        },
        schedule: header.schedule,
        rng,
        step: header.step,
        best_val_loss: header.best_val_loss,
    })
}

fn check_manifest(config: &ModelConfig, entries: &[Entry]) -> Result<()> {
    let want = tensor_manifest(config);
    if entries.len() != 3 * want.len() {
        return Err(Error::ManifestMismatch(format!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            3 * want.len()
        )));
    }
    for (i, e) in entries.iter().enumerate() {
        let spec = &want[i % want.len()];
        let prefix = ["", "m.", "v."][i / want.len()];
        let name = format!("{prefix}{}", spec.name);
        if e.name != name || e.shape != spec.shape {
            return Err(Error::ManifestMismatch(format!(
                "entry {i}: found {} {:?}, expected {name} {:?}",
                e.name, e.shape, spec.shape
            )));
        }
    }
    Ok(())
}
