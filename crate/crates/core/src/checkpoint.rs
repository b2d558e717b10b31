//! Tensor archives: a text manifest plus a little-endian payload.
//!
//! Manifest lines are tab-separated `name dtype shape offset length`, with
//! the shape written as comma-separated extents (empty for scalars) and
//! offsets/lengths in bytes into `payload.bin`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Adam, Model};
use crate::param::Module;
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const PAYLOAD: &str = "payload.bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
        format!("{}\t{}\t{}\t{}\t{}", self.name, self.dtype.tag(), shape.join(","), self.offset, self.length)
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(no, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(format!("manifest line {}: expected 5 fields, got {}", no + 1, f.len())));
            }
            let dtype = DType::from_tag(f[1]).ok_or_else(|| bad(format!("manifest line {}: unknown dtype {:?}", no + 1, f[1])))?;
            let parse = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("manifest line {}: {e}", no + 1)));
            let shape = if f[2].is_empty() { Vec::new() } else { f[2].split(',').map(parse).collect::<Result<Vec<_>>>()? };
            let e = ManifestEntry { name: f[0].to_string(), dtype, shape, offset: parse(f[3])?, length: parse(f[4])? };
            if e.length != numel(&e.shape) * dtype.size_of() {
                return Err(bad(format!("{}: length {} does not match shape {:?}", e.name, e.length, e.shape)));
            }
            Ok(e)
        })
        .collect()
}

pub fn write_tensors<T: Scalar>(dir: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    let mut manifest = String::new();
    for (name, t) in tensors {
        if name.contains(['\t', '\n']) {
            return Err(bad(format!("tensor name {name:?} contains a separator")));
        }
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        let e = ManifestEntry { name: name.clone(), dtype: T::DTYPE, shape: t.shape().to_vec(), offset, length: payload.len() - offset };
        manifest.push_str(&e.to_line());
        manifest.push('\n');
    }
    fs::write(dir.join(PAYLOAD), payload)?;
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_tensors<T: Scalar>(dir: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let payload = fs::read(dir.join(PAYLOAD))?;
    parse_manifest(&manifest)?
        .into_iter()
        .map(|e| {
            if e.dtype != T::DTYPE {
                return Err(bad(format!("{}: stored as {}, requested {}", e.name, e.dtype.tag(), T::DTYPE.tag())));
            }
            let bytes = payload
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| bad(format!("{}: byte range beyond payload of {} bytes", e.name, payload.len())))?;
            let data = bytes.chunks_exact(e.dtype.size_of()).map(T::read_le).collect();
            Ok((e.name, Tensor::new(&e.shape, data)?))
        })
        .collect()
}

/// Parameters, buffers and (optionally) optimizer state of a model.
pub fn save_model<T: Scalar>(dir: &Path, model: &Model<T>, opt: Option<&Adam<T>>, epoch: usize) -> Result<()> {
    let params = model.params();
    let values: Vec<_> = params.iter().map(|p| p.value()).collect();
    let mut owned: Vec<(String, Tensor<T>)> = vec![("meta.epoch".into(), Tensor::scalar(T::from_usize(epoch)))];
    if let Some(opt) = opt {
        owned.push(("meta.step".into(), Tensor::scalar(T::from_f64(opt.step as f64))));
        for ((p, m), v) in opt.params.iter().zip(&opt.m).zip(&opt.v) {
            owned.push((format!("adam.m.{}", p.name()), Tensor::new(&p.shape(), m.clone())?));
            owned.push((format!("adam.v.{}", p.name()), Tensor::new(&p.shape(), v.clone())?));
        }
    }
    let mut refs: Vec<(String, &Tensor<T>)> = params.iter().zip(&values).map(|(p, v)| (p.name().to_string(), &**v)).collect();
    refs.extend(owned.iter().map(|(n, t)| (n.clone(), t)));
    write_tensors(dir, &refs)
}

/// Load into an existing model (and optimizer); returns the stored epoch.
pub fn load_model<T: Scalar>(dir: &Path, model: &Model<T>, opt: Option<&mut Adam<T>>) -> Result<usize> {
    let stored: std::collections::HashMap<String, Tensor<T>> = read_tensors(dir)?.into_iter().collect();
    let take = |name: &str, shape: &[usize]| -> Result<&Tensor<T>> {
        let t = stored.get(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(bad(format!("{name}: stored shape {:?}, model expects {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let params = model.params();
    // validate everything before touching the model
    for p in &params {
        take(p.name(), &p.shape())?;
    }
    for p in &params {
        p.set_value(take(p.name(), &p.shape())?.clone())?;
    }
    if let Some(opt) = opt {
        opt.step = take("meta.step", &[1])?.data()[0].as_f64() as u64;
        for ((p, m), v) in opt.params.iter().zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
            m.copy_from_slice(take(&format!("adam.m.{}", p.name()), &p.shape())?.data());
            v.copy_from_slice(take(&format!("adam.v.{}", p.name()), &p.shape())?.data());
        }
    }
    Ok(take("meta.epoch", &[1])?.data()[0].as_f64() as usize)
}
