//! Output files and the binary checkpoint format.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "SPFDCKPT"
//! version      u32      1
//! config hash  32 bytes SHA-256 of the run config
//! n_models     u32
//! per model:
//!   owner      u32      client id, or u32::MAX for the global model
//!   n_dims     u32
//!   dims       n_dims x u32
//!   n_params   u64
//!   values     n_params x f64, blocks in order, weights before bias
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{LambdaSweep, PlaneGrid};
use crate::federation::RoundRecord;
use crate::nn::{NetworkSpec, WeightVector};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPFDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const GLOBAL_OWNER: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub global: WeightVector,
    /// `(client id, local model)` in ascending id order.
    pub locals: Vec<(usize, WeightVector)>,
}

fn put_model(buf: &mut Vec<u8>, owner: u32, w: &WeightVector) {
    buf.extend_from_slice(&owner.to_le_bytes());
    let dims = w.layer_dims();
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(w.param_count() as u64).to_le_bytes());
    for x in w.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.config_hash);
    buf.extend_from_slice(&((ck.locals.len() + 1) as u32).to_le_bytes());
    put_model(&mut buf, GLOBAL_OWNER, &ck.global);
    for (id, w) in &ck.locals {
        put_model(&mut buf, *id as u32, w);
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}: need {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn model(&mut self) -> Result<(u32, WeightVector)> {
        let owner = self.u32("model owner")?;
        let n_dims = self.u32("dimension count")? as usize;
        if !(2..=64).contains(&n_dims) {
            return Err(Error::Checkpoint(format!("implausible dimension count {n_dims}")));
        }
        let dims = (0..n_dims)
            .map(|_| self.u32("layer dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let spec = NetworkSpec::new(dims).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n = self.u64("parameter count")? as usize;
        if n != spec.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n} does not match dims {:?} ({} expected)",
                spec.layer_dims(),
                spec.param_count()
            )));
        }
        let raw = self.take(n.saturating_mul(8), "parameters")?;
        let flat: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((owner, WeightVector::from_flat(&spec, &flat)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:02x?}, expected {:02x?} (\"SPFDCKPT\")",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().unwrap();
    let count = r.u32("model count")?;
    if count == 0 {
        return Err(Error::Checkpoint("no models stored".into()));
    }
    let (owner, global) = r.model()?;
    if owner != GLOBAL_OWNER {
        return Err(Error::Checkpoint(format!("first model must be the global one, found owner {owner}")));
    }
    let mut locals = Vec::with_capacity(count as usize - 1);
    for _ in 1..count {
        let (owner, w) = r.model()?;
        if owner == GLOBAL_OWNER {
            return Err(Error::Checkpoint("second global model".into()));
        }
        global
            .check_shape(&w, "checkpoint local model")
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        locals.push((owner as usize, w));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last model",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_hash,
        global,
        locals,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per completed round. Wall time is left out so the file is
/// reproducible byte for byte.
pub fn write_rounds_csv(path: &Path, records: &[RoundRecord], hash: &str) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e| csv_err(path, e);
    w.write_record([
        "round",
        "mean_train_loss",
        "selected_ids",
        "eval_top1",
        "eval_loss",
        "bytes_down",
        "bytes_up",
        "config_hash",
    ])
    .map_err(io)?;
    for r in records {
        let ids: Vec<String> = r.selected.iter().map(usize::to_string).collect();
        w.write_record([
            r.round.to_string(),
            r.mean_train_loss.to_string(),
            ids.join(" "),
            opt(r.eval.map(|e| e.top1)),
            opt(r.eval.map(|e| e.loss)),
            r.bytes_down.to_string(),
            r.bytes_up.to_string(),
            hash.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_sweep_csv(path: &Path, sweep: &LambdaSweep, hash: &str) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e| csv_err(path, e);
    w.write_record(["client_id", "lambda", "top1", "loss", "ece", "mce", "has_local", "config_hash"])
        .map_err(io)?;
    for c in &sweep.clients {
        for p in &c.points {
            w.write_record([
                c.client_id.to_string(),
                p.lambda.to_string(),
                p.top1.to_string(),
                p.loss.to_string(),
                p.ece.to_string(),
                p.mce.to_string(),
                c.has_local.to_string(),
                hash.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_plane_csv(path: &Path, plane: &PlaneGrid, hash: &str) -> Result<()> {
    let mut w = csv_writer(path)?;
    let io = |e| csv_err(path, e);
    w.write_record(["x", "y", "loss", "config_hash"]).map_err(io)?;
    for n in &plane.nodes {
        w.write_record([n.x.to_string(), n.y.to_string(), n.loss.to_string(), hash.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    out.write_all(b"\n").and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let spec = NetworkSpec::new(vec![3, 2, 2]).unwrap();
        let n = spec.param_count();
        let g = WeightVector::from_flat(&spec, &(0..n).map(|i| i as f64 * 0.1 - 0.3).collect::<Vec<_>>()).unwrap();
        let l = WeightVector::from_flat(&spec, &(0..n).map(|i| (i as f64).sin()).collect::<Vec<_>>()).unwrap();
        Checkpoint {
            config_hash: [7; 32],
            global: g,
            locals: vec![(3, l)],
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert_eq!(back, ck);
        let bits = |w: &WeightVector| w.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.global), bits(&ck.global));
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[0] = b'X';
        let e = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(e.contains("bad magic"), "{e}");

        let mut bytes = encode_checkpoint(&sample());
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        let e = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(&long).unwrap_err().to_string().contains("trailing"));
    }
}
