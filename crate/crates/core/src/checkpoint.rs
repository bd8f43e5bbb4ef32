//! Versioned parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "ADWPFCKP"
//! version  u32      1
//! dtype    u32 length + UTF-8   precision the model was trained in ("f32" / "f64")
//! spec     u32 length + JSON    model architecture
//! meta     u32 length + JSON    free-form run metadata
//! count    u32
//! count x { u32 name length, name, u8 kind (0 weight, 1 buffer),
//!           u32 rank, rank x u64 dims, prod(dims) x f64 values }
//! ```
//!
//! Values are widened to `f64`, so `f32` models round-trip bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AnyModel, ModelSpec};
use crate::nn::{Module, ParamKind, Real};

pub const MAGIC: &[u8; 8] = b"ADWPFCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dtype: String,
    pub spec: ModelSpec,
    pub meta: serde_json::Value,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn capture<T: Real, M: Module<T> + ?Sized>(spec: ModelSpec, model: &M, meta: serde_json::Value) -> Self {
        let mut params = Vec::new();
        model.visit(&mut |p| {
            params.push(StoredParam {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.shape.clone(),
                values: p.value.iter().map(|v| v.f64()).collect(),
            })
        });
        Self { dtype: T::DTYPE.into(), spec, meta, params }
    }

    /// Copies stored values into `model`, matching parameters by name.
    pub fn restore<T: Real, M: Module<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let by_name: HashMap<&str, &StoredParam> = self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut err = None;
        let mut seen = 0;
        model.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match by_name.get(p.name.as_str()) {
                None => err = Some(Error::Checkpoint(format!("missing parameter {}", p.name))),
                Some(s) if s.shape != p.shape => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter {} has shape {:?}, checkpoint has {:?}",
                        p.name, p.shape, s.shape
                    )))
                }
                Some(s) => {
                    for (d, v) in p.value.iter_mut().zip(&s.values) {
                        *d = T::c(*v);
                    }
                    seen += 1;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model uses {seen}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn build<T: Real>(&self) -> Result<AnyModel<T>> {
        let mut model = self.spec.build::<T>(0)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_blob(&mut w, self.dtype.as_bytes())?;
        write_blob(&mut w, &serde_json::to_vec(&self.spec)?)?;
        write_blob(&mut w, &serde_json::to_vec(&self.meta)?)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            write_blob(&mut w, p.name.as_bytes())?;
            w.write_all(&[match p.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            }])?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for d in &p.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.values.len() * 8);
            for v in &p.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let dtype = String::from_utf8(read_blob(&mut r)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let spec: ModelSpec = serde_json::from_slice(&read_blob(&mut r)?)?;
        let meta: serde_json::Value = serde_json::from_slice(&read_blob(&mut r)?)?;
        let count = read_u32(&mut r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(read_blob(&mut r)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let kind = match kind[0] {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(Error::Checkpoint(format!("unknown parameter kind {k}"))),
            };
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(StoredParam { name, kind, shape, values });
        }
        Ok(Self { dtype, spec, meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{tests::tiny_config, Adwpf, MultiLabelModel};

    #[test]
    fn roundtrip_gives_identical_predictions() {
        let model = Adwpf::<f32>::new(&tiny_config(), 4).unwrap();
        let ck = Checkpoint::capture(model.spec(), &model, serde_json::json!({"epoch": 3}));
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        let back = Checkpoint::read(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.build::<f32>().unwrap();
        let x: Vec<f32> = (0..200).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let a = model.predict(&x, 2).unwrap();
        let b = rebuilt.predict(&x, 2).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_garbage_and_mismatched_shapes() {
        assert!(Checkpoint::read(&b"nonsense-bytes"[..]).is_err());
        let model = Adwpf::<f64>::new(&tiny_config(), 4).unwrap();
        let mut ck = Checkpoint::capture(model.spec(), &model, serde_json::Value::Null);
        ck.params[0].shape = vec![1];
        let mut other = Adwpf::<f64>::new(&tiny_config(), 5).unwrap();
        assert!(matches!(ck.restore(&mut other), Err(Error::Checkpoint(_))));
    }
}
