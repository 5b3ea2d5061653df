//! `.wsf` container: `WSFORGE1` magic, u32-LE manifest length, UTF-8 JSON
//! manifest, then little-endian binary32 payloads in manifest order.
//!
//! The same container stores adapters (`kind = "adapter"`), PCA models,
//! VAEs and denoisers; kind-specific metadata lives as extra top-level
//! manifest keys.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::lora::{LayerShape, LoraAdapter, LoraLayer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"WSFORGE1";
pub const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub dtype: String,
    pub tensors: Vec<TensorRecord>,
    #[serde(flatten)]
    pub meta: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Map<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container { kind: kind.into(), meta: Map::new(), tensors: Vec::new() }
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.meta.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("container lacks tensor `{name}`")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!("expected a `{kind}` container, found `{}`", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut records = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            for &v in t.data() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(Error::Format(format!("tensor `{name}` overflows binary32")));
                }
                payload.extend_from_slice(&f.to_le_bytes());
            }
            records.push(TensorRecord {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest =
            Manifest { kind: self.kind.clone(), dtype: DTYPE.into(), tensors: records, meta: self.meta.clone() };
        let json = serde_json::to_vec(&manifest)?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Format("manifest exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing WSFORGE1 magic".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| Error::Format("manifest runs past end of file".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        if manifest.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let payload = &bytes[12 + len..];
        let mut expected_offset = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for rec in &manifest.tensors {
            let count: usize = rec.shape.iter().product();
            if rec.offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor `{}` at offset {}, expected {expected_offset}",
                    rec.name, rec.offset
                )));
            }
            if rec.nbytes != 4 * count as u64 {
                return Err(Error::Format(format!("tensor `{}` declares {} bytes for {count} values", rec.name, rec.nbytes)));
            }
            let start = rec.offset as usize;
            let end = start + rec.nbytes as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Format(format!("tensor `{}` runs past end of payload", rec.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let t = Tensor::new(rec.shape.clone(), data).map_err(|e| Error::Format(format!("tensor `{}`: {e}", rec.name)))?;
            tensors.push((rec.name.clone(), t));
            expected_offset = end as u64;
        }
        if expected_offset != payload.len() as u64 {
            return Err(Error::Format(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(Container { kind: manifest.kind, meta: manifest.meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes)
    }
}

pub fn adapter_to_container(adapter: &LoraAdapter) -> Result<Container> {
    let mut c = Container::new("adapter")
        .with_meta("id", adapter.id())?
        .with_meta("layers", adapter.shapes())?;
    if let Some(cond) = adapter.condition() {
        c = c.with_meta("condition", cond)?;
    }
    for l in adapter.layers() {
        c.push(format!("{}.A", l.shape().name), l.a().clone());
        c.push(format!("{}.B", l.shape().name), l.b().clone());
    }
    Ok(c)
}

pub fn adapter_from_container(c: &Container) -> Result<LoraAdapter> {
    c.expect_kind("adapter")?;
    let id: String = c.meta_as("id")?;
    let shapes: Vec<LayerShape> = c.meta_as("layers")?;
    let condition: Option<Vec<f64>> = match c.meta.get("condition") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value(v.clone())?),
    };
    if c.tensors.len() != 2 * shapes.len() {
        return Err(Error::Format(format!("{} tensors for {} layers", c.tensors.len(), shapes.len())));
    }
    let layers = shapes
        .into_iter()
        .zip(c.tensors.chunks(2))
        .map(|(s, pair)| {
            if pair[0].0 != format!("{}.A", s.name) || pair[1].0 != format!("{}.B", s.name) {
                return Err(Error::Format(format!("tensors out of order for layer {}", s.name)));
            }
            LoraLayer::new(s, pair[0].1.clone(), pair[1].1.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    LoraAdapter::new(id, layers, condition)
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    adapter_to_container(adapter)?.write(path)
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    adapter_from_container(&Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample() -> LoraAdapter {
        let mut rng = seeded(4);
        let shapes = vec![LayerShape::new("q", 4, 3, 2).unwrap(), LayerShape::new("k", 2, 5, 1).unwrap()];
        let a = LoraAdapter::random("id-7", &shapes, &mut rng).unwrap();
        LoraAdapter::new("id-7", a.layers().to_vec(), Some(vec![0.6, 0.8])).unwrap()
    }

    fn as_f32(a: &LoraAdapter) -> LoraAdapter {
        let layers = a
            .layers()
            .iter()
            .map(|l| {
                let r = |t: &Tensor| t.map(|v| f64::from(v as f32));
                LoraLayer::new(l.shape().clone(), r(l.a()), r(l.b())).unwrap()
            })
            .collect();
        let cond = a.condition().map(|c| c.to_vec());
        LoraAdapter::new(a.id(), layers, cond).unwrap()
    }

    #[test]
    fn adapter_roundtrip_through_binary32() {
        let a = sample();
        let bytes = adapter_to_container(&a).unwrap().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"WSFORGE1");
        let back = adapter_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, as_f32(&a));
    }

    #[test]
    fn manifest_layout() {
        let bytes = adapter_to_container(&sample()).unwrap().to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let m: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(m["kind"], "adapter");
        assert_eq!(m["dtype"], "f32");
        assert_eq!(m["id"], "id-7");
        assert_eq!(m["layers"][0]["name"], "k");
        assert_eq!(m["tensors"][1]["offset"], 8);
        assert_eq!(bytes.len() - 12 - len, 4 * (2 + 5 + 8 + 6));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = adapter_to_container(&sample()).unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        assert!(Container::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(Container::from_bytes(&long).is_err());
        let mut c = adapter_to_container(&sample()).unwrap();
        c.tensors.swap(0, 1);
        let swapped = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(adapter_from_container(&swapped).is_err());
    }

    #[test]
    fn rejects_bad_offsets() {
        let c = adapter_to_container(&sample()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut m: Manifest = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        m.tensors[1].offset += 4;
        let json = serde_json::to_vec(&m).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + len..]);
        assert!(matches!(Container::from_bytes(&out), Err(Error::Format(_))));
    }
}
