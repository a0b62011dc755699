//! Binary checkpoints: magic, config echo, architecture, then every named
//! parameter as its shape and little-endian `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{MranError, Result};
use crate::model::{ModelSpec, MranModel};

const MAGIC: &[u8; 8] = b"MRANCKP1";

pub struct Checkpoint {
    pub config_echo: String,
    pub model: MranModel,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(model: &MranModel, config_echo: &str) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_str(&mut out, config_echo);
    let spec = model.spec();
    put_u64(&mut out, spec.domains as u64);
    put_u64(&mut out, spec.input_dim as u64);
    put_u64(&mut out, spec.extractor_hidden.len() as u64);
    for &w in &spec.extractor_hidden {
        put_u64(&mut out, w as u64);
    }
    put_u64(&mut out, spec.shared_dim as u64);
    put_u64(&mut out, spec.domain_dim as u64);
    out.extend_from_slice(&spec.dropout.to_le_bytes());
    let params = model.params();
    put_u64(&mut out, params.len() as u64);
    for p in params {
        put_str(&mut out, &p.name);
        put_u64(&mut out, p.tensor.shape().len() as u64);
        for &d in p.tensor.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in p.tensor.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| MranError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| MranError::Checkpoint("size overflows usize".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| MranError::Checkpoint("invalid UTF-8 string".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(MranError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let config_echo = r.string()?;
    let domains = r.usize()?;
    let input_dim = r.usize()?;
    let n_hidden = r.usize()?;
    let extractor_hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let spec = ModelSpec {
        domains,
        input_dim,
        extractor_hidden,
        shared_dim: r.usize()?,
        domain_dim: r.usize()?,
        dropout: r.f64()?,
    };
    // the architecture fixes names and shapes; initialisation values are
    // overwritten below
    let mut model = MranModel::init(spec, 0).map_err(|e| MranError::Checkpoint(format!("bad architecture: {e}")))?;
    let count = r.usize()?;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(MranError::Checkpoint(format!(
            "expected {} parameters, found {count}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(MranError::Checkpoint(format!("expected parameter `{}`, found `{name}`", p.name)));
        }
        let ndim = r.usize()?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if shape != p.tensor.shape() {
            return Err(MranError::Checkpoint(format!(
                "parameter `{name}` has shape {shape:?}, expected {:?}",
                p.tensor.shape()
            )));
        }
        for v in p.tensor.values_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(MranError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config_echo, model })
}

pub fn save(path: &Path, model: &MranModel, config_echo: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| MranError::io(path, e))?;
    f.write_all(&encode(model, config_echo)).map_err(|e| MranError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| MranError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MranModel {
        MranModel::init(
            ModelSpec {
                domains: 3,
                input_dim: 7,
                extractor_hidden: vec![6, 5],
                shared_dim: 4,
                domain_dim: 3,
                dropout: 0.25,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = small();
        let bytes = encode(&m, "seed = 1\n");
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.config_echo, "seed = 1\n");
        assert_eq!(ck.model.spec(), m.spec());
        for (a, b) in ck.model.params().iter().zip(m.params()) {
            assert_eq!(a.tensor.values(), b.tensor.values());
        }
        assert_eq!(encode(&ck.model, &ck.config_echo), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt");
        let m = small();
        save(&path, &m, "x = 1\n").unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(encode(&ck.model, "x = 1\n"), std::fs::read(&path).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode(&small(), "");
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(MranError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(MranError::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode(&long), Err(MranError::Checkpoint(_))));
    }
}
