//! Versioned binary container of named `f64` arrays.
//!
//! Layout (little endian):
//!
//! ```text
//! b"FLKP" | version: u32 | meta_len: u32 | meta: JSON bytes | count: u32
//! count x ( name_len: u32 | name | ndim: u32 | dims: u64 x ndim | data: f64 x numel )
//! ```
//!
//! Model arrays are named `layer{i}.{weight|bias|gamma|beta|running_mean|running_var}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, BnBuffers, BnConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FLKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_len(&mut out, self.arrays.len())?;
        for (name, t) in &self.arrays {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_len(&mut out, t.shape().len())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(Container { meta, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::decode(&bytes)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format("length exceeds u32".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    arch: Architecture,
    bn: BnConfig,
}

pub fn buffer_names(arch: &Architecture) -> Vec<(String, String)> {
    arch.bn_specs()
        .iter()
        .map(|s| {
            (
                format!("layer{}.running_mean", s.layer),
                format!("layer{}.running_var", s.layer),
            )
        })
        .collect()
}

/// Named arrays for the parameters and buffers of a model (or of an update
/// with the same layout).
pub fn named_arrays(arch: &Architecture, params: &[Tensor], buffers: &[BnBuffers]) -> Vec<(String, Tensor)> {
    let mut arrays: Vec<(String, Tensor)> = arch
        .param_specs()
        .iter()
        .zip(params)
        .map(|(s, t)| (s.name(), t.clone()))
        .collect();
    for ((mean_name, var_name), b) in buffer_names(arch).into_iter().zip(buffers) {
        arrays.push((mean_name, b.running_mean.clone()));
        arrays.push((var_name, b.running_var.clone()));
    }
    arrays
}

/// Inverse of [`named_arrays`].
pub fn split_arrays(arch: &Architecture, c: &Container) -> Result<(Vec<Tensor>, Vec<BnBuffers>)> {
    let params = arch
        .param_specs()
        .iter()
        .map(|s| {
            let t = c.get(&s.name())?;
            if t.shape() != s.shape {
                return Err(Error::Shape(format!("{}: {:?} vs {:?}", s.name(), t.shape(), s.shape)));
            }
            Ok(t.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let buffers = buffer_names(arch)
        .iter()
        .map(|(m, v)| {
            Ok(BnBuffers {
                running_mean: c.get(m)?.clone(),
                running_var: c.get(v)?.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((params, buffers))
}

impl ModelState {
    pub fn to_container(&self) -> Container {
        Container {
            meta: serde_json::to_value(ModelMeta {
                arch: self.arch.clone(),
                bn: self.bn,
            })
            .expect("model metadata serializes"),
            arrays: named_arrays(&self.arch, &self.params, &self.buffers),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(c.meta.clone())?;
        let (params, buffers) = split_arrays(&meta.arch, c)?;
        let state = ModelState {
            arch: meta.arch,
            bn: meta.bn,
            params,
            buffers,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CnnConfig;

    #[test]
    fn names_follow_layer_scheme() {
        let arch = Architecture::Cnn(CnnConfig::desk(1, 16, 2));
        let s = ModelState::init(arch, BnConfig::default(), 0).unwrap();
        let names: Vec<String> = s.to_container().arrays.into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "layer0.weight");
        assert_eq!(names[1], "layer1.gamma");
        assert_eq!(names[2], "layer1.beta");
        assert!(names.contains(&"layer8.weight".to_string()));
        assert!(names.contains(&"layer8.bias".to_string()));
        assert!(names.contains(&"layer7.running_var".to_string()));
    }

    #[test]
    fn truncated_input_is_rejected() {
        let arch = Architecture::Cnn(CnnConfig::desk(1, 16, 2));
        let s = ModelState::init(arch, BnConfig::default(), 0).unwrap();
        let bytes = s.to_container().encode().unwrap();
        assert!(Container::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Container::decode(b"nope").is_err());
    }
}
