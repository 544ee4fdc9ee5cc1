//! Binary parameter checkpoints.
//!
//! Layout: `b"CLVQ1"`, `u32` format version, `u32` array count, then per
//! array `u16` name length, UTF-8 name, `u8` rank, `rank × u32` dims and the
//! values as little-endian `f64`. All integers are little-endian.
//!
//! Besides the parameters, every checkpoint carries the SHA-256 of the
//! vocabulary it was trained with as a 32-element array named
//! [`VOCAB_HASH`] (one byte per element), so that evaluation can refuse a
//! mismatched vocabulary. Freeze flags live in a `<file>.frozen` sidecar,
//! one parameter name per line.

use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::model::Vocabulary;

pub const MAGIC: &[u8; 5] = b"CLVQ1";
pub const FORMAT_VERSION: u32 = 1;
pub const VOCAB_HASH: &str = "meta.vocab_sha256";

pub fn frozen_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".frozen");
    PathBuf::from(s)
}

pub fn encode(store: &ParameterStore, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let hash: Vec<f64> = vocab.fingerprint().iter().map(|&b| f64::from(b)).collect();
    let hash = Tensor::new(vec![32], hash)?;
    let mut arrays: Vec<(&str, &Tensor)> = store.iter().collect();
    if store.contains(VOCAB_HASH) {
        return Err(Error::contract(format!("{VOCAB_HASH} is a reserved name")));
    }
    arrays.push((VOCAB_HASH, &hash));
    arrays.sort_by(|a, b| a.0.cmp(b.0));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::contract(format!("parameter name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Incompatible(format!(
                "{}: truncated checkpoint at byte {}",
                self.path.display(),
                self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into parameters and the stored vocabulary hash.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(ParameterStore, [u8; 32])> {
    let bad = |msg: String| Error::Incompatible(format!("{}: {msg}", path.display()));
    let mut r = Reader { bytes, at: 0, path };
    if r.take(5)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParameterStore::new();
    let mut hash = None;
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("array {name}: {e}")))?;
        if name == VOCAB_HASH {
            let mut h = [0u8; 32];
            if t.numel() != 32 {
                return Err(bad("malformed vocabulary hash".into()));
            }
            for (b, v) in h.iter_mut().zip(t.data()) {
                *b = *v as u8;
            }
            hash = Some(h);
        } else {
            store.insert(name, t);
        }
    }
    if r.at != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    let hash = hash.ok_or_else(|| bad("missing vocabulary hash".into()))?;
    Ok((store, hash))
}

pub fn save(path: &Path, store: &ParameterStore, vocab: &Vocabulary) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(store, vocab)?).map_err(|e| Error::io(path, e))?;
    let frozen: String = store.frozen_names().map(|n| format!("{n}\n")).collect();
    let sidecar = frozen_sidecar(path);
    fs::write(&sidecar, frozen).map_err(|e| Error::io(&sidecar, e))
}

/// Loads a checkpoint and checks that it was trained with `vocab`.
pub fn load(path: &Path, vocab: &Vocabulary) -> Result<ParameterStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut store, hash) = decode(&bytes, path)?;
    if hash != vocab.fingerprint() {
        return Err(Error::Incompatible(format!(
            "{}: checkpoint was trained with a different vocabulary",
            path.display()
        )));
    }
    let sidecar = frozen_sidecar(path);
    if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        for name in text.lines().filter(|l| !l.is_empty()) {
            if !store.contains(name) {
                return Err(Error::parse(&sidecar, 0, format!("unknown parameter {name}")));
            }
            store.freeze(name);
        }
    }
    Ok(store)
}
