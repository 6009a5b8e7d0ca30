//! Binary parameter files.
//!
//! Layout, all integers little-endian: magic `VLNP`, `u16` version, `u32`
//! entry count, then per entry a `u16` name length, the UTF-8 name, a role
//! byte, a `u8` rank, `rank` `u32` extents and the values as `f64`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::{ParamEntry, ParamRegistry, Role};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VLNP";
pub const CHECKPOINT_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 4;

fn selected(registry: &ParamRegistry, trainable_only: bool) -> impl Iterator<Item = &ParamEntry> {
    registry.entries().iter().filter(move |e| !trainable_only || e.trainable)
}

fn entry_len(e: &ParamEntry) -> usize {
    2 + e.name.len() + 1 + 1 + 4 * e.shape.len() + 8 * e.numel()
}

/// Exact file size in bytes; needs only shapes, so it works on virtual registries.
pub fn checkpoint_size(registry: &ParamRegistry, trainable_only: bool) -> usize {
    HEADER_LEN + selected(registry, trainable_only).map(entry_len).sum::<usize>()
}

pub fn encode_checkpoint(registry: &ParamRegistry, trainable_only: bool) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(checkpoint_size(registry, trainable_only));
    let entries: Vec<&ParamEntry> = selected(registry, trainable_only).collect();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let value = e
            .value()
            .ok_or_else(|| Error::State(format!("parameter {} has no value to save", e.name)))?;
        let name_len = u16::try_from(e.name.len())
            .map_err(|_| Error::Contract(format!("parameter name {} too long", e.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.role.to_byte());
        out.push(e.shape.len() as u8);
        for &extent in &e.shape {
            out.extend_from_slice(&(extent as u32).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(registry: &ParamRegistry, path: &Path, trainable_only: bool) -> Result<()> {
    let bytes = encode_checkpoint(registry, trainable_only)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Record {
    name: String,
    role: Role,
    tensor: Tensor,
}

fn parse(bytes: &[u8]) -> std::result::Result<Vec<Record>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err("bad magic, not a parameter file".into());
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "parameter name is not UTF-8".to_string())?;
        let role_byte = r.u8()?;
        let role = Role::from_byte(role_byte).ok_or_else(|| format!("unknown role byte {role_byte} for {name}"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or("extent overflow")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| format!("{name}: {e}"))?;
        records.push(Record { name, role, tensor });
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(records)
}

/// Loads a file written by [`save_checkpoint`] into `registry`.
///
/// The file's names must equal either every parameter of the registry or
/// exactly its trainable set (a tuned-modules-only file over a frozen base).
pub fn decode_checkpoint_into(registry: &mut ParamRegistry, bytes: &[u8], path: &Path) -> Result<()> {
    let fail = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let records = parse(bytes).map_err(fail)?;
    let names: BTreeSet<&str> = records.iter().map(|r| r.name.as_str()).collect();
    if names.len() != records.len() {
        return Err(fail("duplicate parameter names".into()));
    }
    let all: BTreeSet<&str> = registry.entries().iter().map(|e| e.name.as_str()).collect();
    let trainable: BTreeSet<&str> = selected(registry, true).map(|e| e.name.as_str()).collect();
    if names != all && names != trainable {
        let missing = trainable.difference(&names).next();
        let unknown = names.difference(&all).next();
        return Err(fail(format!(
            "parameter name set does not match the model (first missing: {missing:?}, first unknown: {unknown:?})"
        )));
    }
    for rec in &records {
        let id = registry.id(&rec.name).expect("name checked above");
        let e = registry.entry(id);
        if e.shape != rec.tensor.shape() {
            return Err(fail(format!(
                "shape mismatch for {}: file {:?}, model {:?}",
                rec.name,
                rec.tensor.shape(),
                e.shape
            )));
        }
        if e.role != rec.role {
            return Err(fail(format!("role mismatch for {}", rec.name)));
        }
    }
    for rec in records {
        let id = registry.id(&rec.name).expect("name checked above");
        registry.set_value(id, rec.tensor)?;
    }
    Ok(())
}

pub fn load_checkpoint(registry: &mut ParamRegistry, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint_into(registry, &bytes, path)
}
