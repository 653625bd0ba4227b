//! Single-file checkpoint container.
//!
//! Layout:
//!
//! ```text
//! "ADVRF1"                      6 magic bytes
//! manifest_len: u64 LE
//! manifest: UTF-8, one record per line
//!     meta<TAB>key<TAB>value
//!     tensor<TAB>name<TAB>d0xd1x…<TAB>byte_offset
//! payload: little-endian f32 values, tensors back to back
//! ```
//!
//! Tensor names are `section/entry`; byte offsets are relative to the start
//! of the payload.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use super::{Element, ParamSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"ADVRF1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    meta: IndexMap<String, String>,
    tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        let (key, value) = (key.into(), value.into());
        assert!(
            !key.contains(['\t', '\n']) && !value.contains(['\t', '\n']),
            "checkpoint metadata may not contain tabs or newlines"
        );
        self.meta.insert(key, value);
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn meta_entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.meta.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert_params<E: Element>(&mut self, section: &str, params: &ParamSet<E>) {
        for (name, t) in params.iter() {
            self.insert_tensor(format!("{section}/{name}"), t.cast::<f32>());
        }
    }

    pub fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    /// Overwrites `params` from the tensors stored under `section`.
    pub fn restore_params<E: Element>(&self, section: &str, params: &mut ParamSet<E>) -> Result<()> {
        if !self.has_section(section) {
            return Err(Error::Checkpoint(format!("missing section `{section}`")));
        }
        for (name, t) in params.iter_mut() {
            let key = format!("{section}/{name}");
            let src = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{key}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            for (d, s) in t.data_mut().iter_mut().zip(src.data()) {
                *d = E::from_f64_lossy(f64::from(*s));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<CheckpointEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let e = CheckpointEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel() * 4;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.meta {
            writeln!(manifest, "meta\t{k}\t{v}").unwrap();
        }
        for e in self.entries() {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            writeln!(manifest, "tensor\t{}\t{}\t{}", e.name, dims.join("x"), e.offset).unwrap();
        }
        let payload_len: usize = self.tensors.values().map(|t| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(14 + manifest.len() + payload_len);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 14 || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(bad("missing ADVRF1 magic"));
        }
        let mlen = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let manifest = bytes
            .get(14..14 + mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let payload = &bytes[14 + mlen..];

        let mut ckpt = Checkpoint::new();
        for line in manifest.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => ckpt.set_meta(*k, *v),
                ["tensor", name, dims, offset] => {
                    let shape = dims
                        .split('x')
                        .map(str::parse)
                        .collect::<Result<Vec<usize>, _>>()
                        .map_err(|_| bad(&format!("bad shape `{dims}` for `{name}`")))?;
                    let offset: usize = offset
                        .parse()
                        .map_err(|_| bad(&format!("bad offset for `{name}`")))?;
                    let n: usize = shape.iter().product();
                    let raw = payload
                        .get(offset..offset + n * 4)
                        .ok_or_else(|| bad(&format!("payload too short for `{name}`")))?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ckpt.insert_tensor(*name, Tensor::new(shape, data)?);
                }
                _ => return Err(bad(&format!("unrecognised manifest line `{line}`"))),
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_starts_with_magic_and_is_little_endian() {
        let mut c = Checkpoint::new();
        c.set_meta("epoch", "3");
        c.insert_tensor("a/w", Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap());
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..6], b"ADVRF1");
        let tail = &bytes[bytes.len() - 8..];
        assert_eq!(f32::from_le_bytes(tail[..4].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(tail[4..].try_into().unwrap()), -2.5);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.meta("epoch"), Some("3"));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(b"ADVRF1\xff\x00\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn params_round_trip_by_section() {
        let mut p = ParamSet::<f32>::new();
        p.insert("conv.weight", Tensor::full(vec![2, 2], 0.25)).unwrap();
        let mut c = Checkpoint::new();
        c.insert_params("retrieval", &p);
        assert!(c.has_section("retrieval"));
        assert!(!c.has_section("recon_dec"));
        let mut q = ParamSet::<f32>::new();
        q.insert("conv.weight", Tensor::zeros(vec![2, 2])).unwrap();
        c.restore_params("retrieval", &mut q).unwrap();
        assert_eq!(q.content_hash(), p.content_hash());
    }
}
