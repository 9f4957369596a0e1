//! Binary checkpoint format.
//!
//! Layout (little endian): magic `GTCK`, `u32` version, `u64` step, `u32`
//! config length and config text, `u32` parameter count, then per parameter
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `f32` payload.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GTCK";
pub const VERSION: u32 = 1;

/// Parameters of a model together with the config that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: u64,
    pub config: RunConfig,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, step: u64, store: &ParamStore<f32>) -> Self {
        Self {
            version: VERSION,
            step,
            config: config.clone(),
            params: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Copy stored values into `store`, matching by name. Every parameter of
    /// `store` must be present with the same shape.
    pub fn restore(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if store.value(id).shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    store.value(id).shape()
                )));
            }
            store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&self.version.to_le_bytes())?;
        out.write_all(&self.step.to_le_bytes())?;
        write_bytes(out, self.config.to_text().as_bytes())?;
        write_u32(out, self.params.len())?;
        for (name, t) in &self.params {
            write_bytes(out, name.as_bytes())?;
            write_u32(out, t.rank())?;
            for &d in t.shape() {
                write_u32(out, d)?;
            }
            for x in t.data() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(input)? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut step = [0u8; 8];
        input.read_exact(&mut step)?;
        let text = String::from_utf8(read_bytes(input)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(&text)?;
        let count = read_u32(input)?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(input)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(input)?;
            let shape = (0..rank)
                .map(|_| read_u32(input))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            input.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            version,
            step: u64::from_le_bytes(step),
            config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            self.write_to(&mut out)?;
            out.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_u32(out: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_bytes(out: &mut impl Write, b: &[u8]) -> Result<()> {
    write_u32(out, b.len())?;
    out.write_all(b)?;
    Ok(())
}

fn read_u32(input: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_bytes(input: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(input)?;
    let mut b = vec![0u8; n];
    input.read_exact(&mut b)?;
    Ok(b)
}

/// Exclusive claim on a checkpoint directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = "train.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(Self::FILE);
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Checkpoint(format!(
                    "{} is locked by another training run ({})",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Seq2Seq;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = RunConfig::preset("desk").unwrap();
        let mut store = ParamStore::new();
        Seq2Seq::new(&mut store, &cfg.model, 11).unwrap();
        let ck = Checkpoint::capture(&cfg, 42, &store);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.config, cfg);
        for ((na, a), (nb, b)) in ck.params.iter().zip(&back.params) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut fresh = ParamStore::new();
        Seq2Seq::new(&mut fresh, &cfg.model, 12).unwrap();
        back.restore(&mut fresh).unwrap();
        for (p, q) in fresh.iter().zip(store.iter()) {
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn rejects_garbage_and_mismatch() {
        assert!(Checkpoint::read_from(&mut &b"NOPE0000"[..]).is_err());
        let cfg = RunConfig::preset("desk").unwrap();
        let mut store = ParamStore::new();
        Seq2Seq::new(&mut store, &cfg.model, 1).unwrap();
        let ck = Checkpoint::capture(&cfg, 0, &store);
        let mut other_cfg = cfg.clone();
        other_cfg.model.d_model = 32;
        let mut other = ParamStore::new();
        Seq2Seq::new(&mut other, &other_cfg.model, 1).unwrap();
        assert!(ck.restore(&mut other).is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
