//! Binary weight and embedding files.
//!
//! Checkpoint (`CCKPT1`): magic, `u32` tensor count, then per tensor a
//! `u32`-length-prefixed UTF-8 name, `u32` rank, `rank` × `u32` dims and the
//! row-major `f32` values. Embeddings (`TEMB1`): magic, then records until
//! end of file, each a length-prefixed caption id, `u32` T, `u32` D and T×D
//! `f32` values. All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"CCKPT1";
pub const EMBEDDING_MAGIC: &[u8; 5] = b"TEMB1";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Option<String> {
        let len = self.u32()? as usize;
        self.take(len)
            .and_then(|b| String::from_utf8(b.to_vec()).ok())
    }

    fn floats(&mut self, count: usize) -> Option<Vec<f64>> {
        let raw = self.take(count.checked_mul(4)?)?;
        Some(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        )
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, m: &Array2<f64>) {
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, params.len());
    for (name, value) in params.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, 2);
        put_u32(&mut out, value.nrows());
        put_u32(&mut out, value.ncols());
        put_floats(&mut out, value);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let bad = |why: &str| Error::format(path, why.to_string());
    if bytes.get(..6) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(bad("missing CCKPT1 magic"));
    }
    let mut r = Reader { bytes, pos: 6 };
    let count = r.u32().ok_or_else(|| bad("truncated tensor count"))?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let name = r
            .string()
            .ok_or_else(|| bad(&format!("tensor {i}: bad name")))?;
        let rank = r
            .u32()
            .ok_or_else(|| bad(&format!("`{name}`: truncated rank")))?;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Option<_>>()
            .ok_or_else(|| bad(&format!("`{name}`: truncated dims")))?;
        let shape = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(bad(&format!("`{name}`: unsupported rank {rank}"))),
        };
        let values = r
            .floats(shape.0 * shape.1)
            .ok_or_else(|| bad(&format!("`{name}`: truncated values")))?;
        let m = Array2::from_shape_vec(shape, values).expect("length checked");
        if store.get(&name).is_some() {
            return Err(bad(&format!("duplicate tensor `{name}`")));
        }
        store.insert(name, m);
    }
    if !r.done() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(store)
}

pub fn save_checkpoint(params: &ParamStore, path: &Path) -> Result<()> {
    write_file(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    decode_checkpoint(&read_file(path)?, path)
}

pub(crate) fn write_embeddings(path: &Path, records: &[(&str, &Array2<f64>)]) -> Result<()> {
    let mut out = EMBEDDING_MAGIC.to_vec();
    for (id, m) in records {
        put_str(&mut out, id);
        put_u32(&mut out, m.nrows());
        put_u32(&mut out, m.ncols());
        put_floats(&mut out, m);
    }
    write_file(path, &out)
}

pub(crate) fn read_embeddings(path: &Path) -> Result<Vec<(String, Array2<f64>)>> {
    let bytes = read_file(path)?;
    let bad = |why: String| Error::format(path, why);
    if bytes.get(..5) != Some(EMBEDDING_MAGIC.as_slice()) {
        return Err(bad("missing TEMB1 magic".into()));
    }
    let mut r = Reader {
        bytes: &bytes,
        pos: 5,
    };
    let mut out = Vec::new();
    while !r.done() {
        let id = r
            .string()
            .ok_or_else(|| bad(format!("record {}: bad caption id", out.len())))?;
        let t = r.u32().ok_or_else(|| bad(format!("`{id}`: truncated T")))? as usize;
        let d = r.u32().ok_or_else(|| bad(format!("`{id}`: truncated D")))? as usize;
        let values = r
            .floats(t * d)
            .ok_or_else(|| bad(format!("`{id}`: truncated values")))?;
        out.push((
            id,
            Array2::from_shape_vec((t, d), values).expect("length checked"),
        ));
    }
    Ok(out)
}
