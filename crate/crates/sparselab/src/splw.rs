//! SPLW checkpoint files.
//!
//! Layout: magic `SPLW`, format version (u32 LE), the model config as
//! length-prefixed JSON, `tokens_seen` and `step` (u64 LE each), a tensor
//! manifest of (name, shape, byte offset) entries, then the raw tensor data
//! as little-endian IEEE-754 f32, concatenated in manifest order.

use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ParamLayout};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SPLW";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&ckpt.config)?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&ckpt.tokens_seen.to_le_bytes())?;
        w.write_all(&ckpt.step.to_le_bytes())?;
        let specs = ckpt.layout.specs();
        w.write_all(&(specs.len() as u32).to_le_bytes())?;
        for spec in specs {
            let name = spec.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[spec.shape.len() as u8])?;
            for &d in &spec.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&((spec.offset * 4) as u64).to_le_bytes())?;
        }
        for &p in &ckpt.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::CheckpointFormat("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)?;
    config.validate()?;
    let tokens_seen = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;

    let layout = ParamLayout::new(&config);
    let n_tensors = read_u32(&mut r)? as usize;
    if n_tensors != layout.specs().len() {
        return Err(Error::CheckpointFormat(format!(
            "manifest has {n_tensors} tensors, config implies {}",
            layout.specs().len()
        )));
    }
    for spec in layout.specs() {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::CheckpointFormat("non-utf8 tensor name".into()))?;
        if name != spec.name {
            return Err(Error::CheckpointFormat(format!(
                "tensor '{name}' does not resolve; expected '{}'",
                spec.name
            )));
        }
        let ndim = read_u8(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != spec.shape {
            return Err(Error::CheckpointFormat(format!(
                "tensor '{name}' shape {:?} does not match config {:?}",
                shape, spec.shape
            )));
        }
        let offset = read_u64(&mut r)? as usize;
        if offset != spec.offset * 4 {
            return Err(Error::CheckpointFormat(format!(
                "tensor '{name}' offset {offset} does not match layout"
            )));
        }
    }

    let mut params = vec![0.0f32; layout.total_elements()];
    let mut buf = [0u8; 4];
    for p in params.iter_mut() {
        r.read_exact(&mut buf)?;
        *p = f32::from_le_bytes(buf);
    }
    Ok(Checkpoint {
        config,
        layout,
        params,
        tokens_seen,
        step,
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.splw");
        let mut ckpt = Checkpoint::init(ModelConfig::new(16, 2, 2, Activation::SiLU, 7)).unwrap();
        ckpt.tokens_seen = 12345;
        ckpt.step = 42;
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.tokens_seen, 12345);
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, ckpt.config);
    }

    #[test]
    fn magic_starts_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.splw");
        let ckpt = Checkpoint::init(ModelConfig::new(16, 1, 2, Activation::ReLU, 0)).unwrap();
        save_checkpoint(&path, &ckpt).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SPLW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.splw");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
