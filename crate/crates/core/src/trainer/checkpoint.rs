//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic, dtype tag, step, optimizer step counters, config JSON, RNG
//! stream positions, named parameter/moment arrays, then a SHA-256 digest
//! of everything before it. Serialization is fully deterministic (sorted
//! array names, fixed field order), so save -> load -> save is
//! byte-identical and corruption is detected by the digest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::scalar::{Dtype, Scalar};
use crate::rng::StreamState;

const MAGIC: &[u8; 8] = b"PVCKPT01";

/// Everything a training run needs to resume bit-exactly.
#[derive(Debug, Clone)]
pub struct CheckpointData<S: Scalar> {
    pub step: u64,
    pub main_t: u64,
    pub disc_t: u64,
    /// Resolved configuration (and model dims) as JSON.
    pub config_json: String,
    /// Positions of the consumer streams, in a fixed order.
    pub streams: Vec<StreamState>,
    /// Parameters and optimizer moments, keyed by hierarchical name.
    pub arrays: BTreeMap<String, ArrayD<S>>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}

/// Serialize to the container byte layout (digest included).
pub fn encode<S: Scalar>(data: &CheckpointData<S>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(S::DTYPE.byte_width() as u8);
    put_u64(&mut buf, data.step);
    put_u64(&mut buf, data.main_t);
    put_u64(&mut buf, data.disc_t);
    put_u32(&mut buf, data.config_json.len() as u32);
    buf.extend_from_slice(data.config_json.as_bytes());
    put_u32(&mut buf, data.streams.len() as u32);
    for s in &data.streams {
        put_u64(&mut buf, s.seed);
        put_u64(&mut buf, s.stream);
        buf.extend_from_slice(&s.word_pos.to_le_bytes());
    }
    put_u32(&mut buf, data.arrays.len() as u32);
    for (name, arr) in &data.arrays {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        buf.push(arr.ndim() as u8);
        for &d in arr.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Parse and digest-verify a container.
pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<CheckpointData<S>> {
    if bytes.len() < 32 + MAGIC.len() {
        return Err(Error::checkpoint("file too short to be a checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expect = Sha256::digest(body);
    if digest != expect.as_slice() {
        return Err(Error::checkpoint(format!(
            "integrity digest mismatch: stored {} != computed {}",
            hex(digest),
            hex(&expect)
        )));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::checkpoint("bad magic; not a checkpoint file"));
    }
    let width = r.u8()? as usize;
    if width != S::DTYPE.byte_width() {
        return Err(Error::checkpoint(format!(
            "checkpoint holds {}-byte scalars but {} was requested",
            width,
            S::DTYPE.name()
        )));
    }
    let step = r.u64()?;
    let main_t = r.u64()?;
    let disc_t = r.u64()?;
    let json_len = r.u32()? as usize;
    let config_json = String::from_utf8(r.take(json_len)?.to_vec())
        .map_err(|_| Error::checkpoint("config JSON is not UTF-8"))?;
    let n_streams = r.u32()? as usize;
    let mut streams = Vec::with_capacity(n_streams);
    for _ in 0..n_streams {
        streams.push(StreamState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: r.u128()?,
        });
    }
    let n_arrays = r.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..n_arrays {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::checkpoint("array name is not UTF-8"))?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * width)?;
        let vals: Vec<S> = raw.chunks_exact(width).map(S::from_le_slice).collect();
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), vals)
            .map_err(|e| Error::checkpoint(format!("array {name}: {e}")))?;
        arrays.insert(name, arr);
    }
    if r.pos != body.len() {
        return Err(Error::checkpoint("trailing bytes after last array"));
    }
    Ok(CheckpointData {
        step,
        main_t,
        disc_t,
        config_json,
        streams,
        arrays,
    })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save<S: Scalar>(path: &Path, data: &CheckpointData<S>) -> Result<()> {
    let bytes = encode(data);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<CheckpointData<S>> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}

/// Scalar width stored in a checkpoint without parsing the rest, so
/// callers can dispatch on precision before deserializing.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 1 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::checkpoint("bad magic; not a checkpoint file"));
    }
    match bytes[MAGIC.len()] {
        4 => Ok(Dtype::F32),
        8 => Ok(Dtype::F64),
        w => Err(Error::checkpoint(format!("unknown scalar width {w}"))),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
