//! Versioned binary checkpoints: magic, version, JSON model config, then
//! every named tensor as little-endian `f64`.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{BestowModel, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"BSTWCKPT";
const VERSION: u32 = 1;

fn fmt(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, cfg: &ModelConfig, ps: &ParamStore) -> Result<()> {
    let json = serde_json::to_vec(cfg).map_err(|e| fmt(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(ps.len() as u64).to_le_bytes())?;
    for (name, t) in ps.names().iter().zip(ps.values()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner.read_exact(&mut buf).map_err(|_| fmt("truncated checkpoint"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, limit: u64, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(fmt(format!("implausible {what} {n}")));
        }
        Ok(n as usize)
    }
}

/// Reads a checkpoint and rebuilds the model with the stored tensors. Every
/// parameter of the model must be present with a matching shape.
pub fn read_checkpoint<R: Read>(r: R) -> Result<(BestowModel, ParamStore)> {
    let mut r = Reader { inner: r };
    if r.bytes(8)? != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(fmt(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.len(1 << 20, "config length")?;
    let cfg: ModelConfig = serde_json::from_slice(&r.bytes(json_len)?).map_err(|e| fmt(e.to_string()))?;
    let mut ps = ParamStore::new();
    let model = BestowModel::new(&mut ps, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n = r.len(1 << 20, "tensor count")?;
    if n != ps.len() {
        return Err(fmt(format!("checkpoint has {n} tensors, model expects {}", ps.len())));
    }
    let mut seen = vec![false; ps.len()];
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| fmt("tensor name is not UTF-8"))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len(1 << 32, "dimension")).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.bytes(numel * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let id = ps.find(&name).ok_or_else(|| fmt(format!("unexpected tensor {name:?}")))?;
        if ps.get(id).shape() != shape.as_slice() {
            return Err(Error::Shape { op: "checkpoint tensor", lhs: shape, rhs: ps.get(id).shape().to_vec() });
        }
        *ps.get_mut(id) = Tensor::new(shape, data)?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(fmt(format!("missing tensor {:?}", ps.names()[i])));
    }
    Ok((model, ps))
}

pub fn save(path: &std::path::Path, cfg: &ModelConfig, ps: &ParamStore) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), cfg, ps)
}

pub fn load(path: &std::path::Path) -> Result<(BestowModel, ParamStore)> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
