//! Binary parameter container.
//!
//! Layout (little-endian): magic `RPSTCKPT`, version u16, entry count u32,
//! then per entry `name_len u16, name, rank u8, dims u32 x rank, frozen u8`,
//! then every payload in entry order as f32, then an FNV-1a u64 over the
//! payload bytes.

use std::fs;
use std::path::Path;

use crate::compute::Tensor;
use crate::error::{Error, Result};
use crate::params::{Fnv1a, ParamStore};

pub const MAGIC: &[u8; 8] = b"RPSTCKPT";
pub const VERSION: u16 = 1;

pub fn to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, e) in store.iter() {
        let nb = name.as_bytes();
        let name_len = u16::try_from(nb.len())
            .map_err(|_| Error::Contract(format!("parameter name too long: {name:?}")))?;
        let rank = u8::try_from(e.tensor.rank())
            .map_err(|_| Error::Contract(format!("{name:?}: rank above 255")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(rank);
        for &d in e.tensor.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Contract(format!("{name:?}: dimension {d} above u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(u8::from(e.frozen));
    }
    let payload_start = out.len();
    for (_, e) in store.iter() {
        for &v in e.tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut h = Fnv1a::default();
    h.update(&out[payload_start..]);
    out.extend_from_slice(&h.finish().to_le_bytes());
    Ok(out)
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32("entry count")? as usize;
    let mut header = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let what = format!("header of entry {i}");
        let len = r.u16(&what)? as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| Error::CorruptCheckpoint(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8(&name)? as usize;
        let dims = (0..rank)
            .map(|_| r.u32(&name).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let frozen = match r.u8(&name)? {
            0 => false,
            1 => true,
            other => {
                return Err(Error::CorruptCheckpoint(format!(
                    "entry {name:?}: frozen flag {other}"
                )))
            }
        };
        header.push((name, dims, frozen));
    }

    let payload_start = r.pos;
    let payload_end = bytes.len().checked_sub(8).filter(|&e| e >= payload_start);
    let mut store = ParamStore::new();
    let mut pos = payload_start;
    for (name, dims, frozen) in header {
        let numel: usize = dims.iter().product();
        let need = numel
            .checked_mul(4)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("entry {name:?}: size overflow")))?;
        let fits = payload_end.is_some_and(|end| end - pos >= need);
        if !fits {
            return Err(Error::CorruptCheckpoint(format!(
                "entry {name:?}: shape {dims:?} needs {need} payload bytes but the file is too short"
            )));
        }
        let data = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        pos += need;
        store
            .insert(&name, Tensor::new(&dims, data)?, frozen)
            .map_err(|_| Error::CorruptCheckpoint(format!("duplicate entry name {name:?}")))?;
    }
    let end = payload_end.ok_or_else(|| Error::CorruptCheckpoint("missing digest".into()))?;
    if pos != end {
        return Err(Error::CorruptCheckpoint(format!(
            "{} unexpected bytes after the last payload",
            end - pos
        )));
    }
    let mut h = Fnv1a::default();
    h.update(&bytes[payload_start..end]);
    let stored = u64::from_le_bytes(bytes[end..].try_into().expect("8 bytes"));
    if stored != h.finish() {
        return Err(Error::CorruptCheckpoint(format!(
            "payload digest mismatch (stored {stored:016x}, computed {:016x})",
            h.finish()
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(store)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact(format!(
                "checkpoint {} does not exist",
                path.display()
            )))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    from_bytes(&bytes)
}
