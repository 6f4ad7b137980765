//! Little-endian tensor container used for model checkpoints and replay stores.
//!
//! ```text
//! "DINV"  u32 version
//! u32 len, descriptor (utf-8)
//! u32 len, metadata (utf-8, `key=value` lines)
//! u32 tensor count
//! per tensor: u16 len, name | u8 dtype | u8 ndim | u32 dims[ndim] | u64 offset | u64 nbytes
//! blob section (offsets are relative to its start)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{Layer, Model};
use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DINV";
pub const VERSION: u32 = 1;

/// Raw tensor payload as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl StoredTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes the payload, converting to `T` if the stored dtype differs.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let size = self.dtype.size();
        let data = self.bytes.chunks_exact(size).map(|c| T::read_le(c, self.dtype)).collect();
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub descriptor: String,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<StoredTensor>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str32(&mut out, &self.descriptor);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        write_str32(&mut out, &meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
            offset += t.bytes.len() as u64;
        }
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Checkpoint {
                offset: 0,
                reason: format!("bad magic {magic:02x?}, expected \"DINV\""),
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                offset: at,
                reason: format!("unsupported version {version} (expected {VERSION})"),
            });
        }
        let descriptor = r.str32("descriptor")?;
        let meta_text = r.str32("metadata")?;
        let meta = meta_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let count = r.u32("tensor count")? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|_| Error::Checkpoint {
                offset: at,
                reason: "tensor name is not utf-8".into(),
            })?;
            let at = r.pos;
            let dtype = DType::from_code(r.take(1, "dtype")?[0]).ok_or_else(|| Error::Checkpoint {
                offset: at,
                reason: "unknown dtype code".into(),
            })?;
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let offset = r.u64("blob offset")? as usize;
            let at = r.pos;
            let nbytes = r.u64("blob length")? as usize;
            let numel: usize = shape.iter().product();
            if numel * dtype.size() != nbytes {
                return Err(Error::Checkpoint {
                    offset: at,
                    reason: format!("tensor {name}: {nbytes} bytes for shape {shape:?}"),
                });
            }
            table.push((name, dtype, shape, offset, nbytes));
        }
        let blob_start = r.pos;
        let mut tensors = Vec::with_capacity(table.len());
        for (name, dtype, shape, offset, nbytes) in table {
            let start = blob_start + offset;
            let end = start.checked_add(nbytes).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Checkpoint {
                offset: bytes.len(),
                reason: format!("tensor {name}: blob {start}..{} exceeds file length", start + nbytes),
            })?;
            tensors.push(StoredTensor {
                name,
                dtype,
                shape,
                bytes: bytes[start..end].to_vec(),
            });
        }
        Ok(Self {
            descriptor,
            meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                reason: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str32(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint {
            offset: at,
            reason: format!("{what} is not utf-8"),
        })
    }
}

impl<T: Real> Model<T> {
    /// Every stored tensor (parameters, running statistics, gates) by name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d(c) => {
                    v.push((format!("{i}.weight"), &c.weight));
                    if let Some(b) = &c.bias {
                        v.push((format!("{i}.bias"), b));
                    }
                }
                Layer::BatchNorm(bn) => {
                    v.push((format!("{i}.gamma"), &bn.gamma));
                    v.push((format!("{i}.beta"), &bn.beta));
                    v.push((format!("{i}.running_mean"), &bn.running_mean));
                    v.push((format!("{i}.running_var"), &bn.running_var));
                }
                Layer::Linear(l) => {
                    v.push((format!("{i}.weight"), &l.weight));
                    v.push((format!("{i}.bias"), &l.bias));
                }
                Layer::Gate(g) => v.push((format!("{i}.gate"), &g.values)),
                _ => {}
            }
        }
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv2d(c) => {
                    v.push((format!("{i}.weight"), &mut c.weight));
                    if let Some(b) = &mut c.bias {
                        v.push((format!("{i}.bias"), b));
                    }
                }
                Layer::BatchNorm(bn) => {
                    v.push((format!("{i}.gamma"), &mut bn.gamma));
                    v.push((format!("{i}.beta"), &mut bn.beta));
                    v.push((format!("{i}.running_mean"), &mut bn.running_mean));
                    v.push((format!("{i}.running_var"), &mut bn.running_var));
                }
                Layer::Linear(l) => {
                    v.push((format!("{i}.weight"), &mut l.weight));
                    v.push((format!("{i}.bias"), &mut l.bias));
                }
                Layer::Gate(g) => v.push((format!("{i}.gate"), &mut g.values)),
                _ => {}
            }
        }
        v
    }

    pub fn to_tensor_file(&self, meta: BTreeMap<String, String>) -> TensorFile {
        TensorFile {
            descriptor: self.describe(),
            meta,
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| StoredTensor::from_tensor(n, t))
                .collect(),
        }
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let mut model = Self::from_description(&file.descriptor)?;
        for (name, slot) in model.named_tensors_mut() {
            let stored = file.get(&name).ok_or_else(|| Error::Checkpoint {
                offset: 0,
                reason: format!("missing tensor {name}"),
            })?;
            let t = stored.to_tensor::<T>()?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint {
                    offset: 0,
                    reason: format!("tensor {name} has shape {:?}, architecture expects {:?}", t.shape(), slot.shape()),
                });
            }
            let rg = slot.requires_grad();
            *slot = t.with_requires_grad(rg);
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path, meta: BTreeMap<String, String>) -> Result<()> {
        self.to_tensor_file(meta).save(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let file = TensorFile::load(path)?;
        let model = Self::from_tensor_file(&file)?;
        Ok((model, file.meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ArchSpec};
    use crate::rng::{stream, Stream};

    fn model() -> Model<f32> {
        let spec = ArchSpec::new("resnet_small:4x2x1".parse().unwrap(), 3, vec![3, 8, 8]);
        let mut m: Model<f32> = build_model(&spec, &mut stream(5, Stream::Init)).unwrap();
        // make running stats non-trivial
        for layer in &mut m.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.running_mean.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f32);
            }
        }
        m
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let m = model();
        let mut meta = BTreeMap::new();
        meta.insert("epochs".to_string(), "5".to_string());
        let bytes = m.to_tensor_file(meta.clone()).to_bytes();
        let file = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(file.meta, meta);
        let back = Model::<f32>::from_tensor_file(&file).unwrap();
        let a = m.named_tensors();
        let b = back.named_tensors();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na}");
        }
    }

    #[test]
    fn truncated_file_names_offset() {
        let bytes = model().to_tensor_file(BTreeMap::new()).to_bytes();
        for cut in [3, 6, 20, bytes.len() - 1] {
            let err = TensorFile::from_bytes(&bytes[..cut]).unwrap_err();
            match err {
                Error::Checkpoint { offset, .. } => assert!(offset <= cut),
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = model().to_tensor_file(BTreeMap::new()).to_bytes();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&wrong), Err(Error::Checkpoint { offset: 0, .. })));
        bytes[4] = 9;
        let err = TensorFile::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9") && err.contains("offset 4"), "{err}");
    }
}
