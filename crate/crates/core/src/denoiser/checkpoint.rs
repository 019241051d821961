//! Named-tensor checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! "PDCK" | version u32 = 1 | count u32
//! count × (name_len u16, name utf-8, rank u8, rank × u32 dims, f32 values)
//! ```
//!
//! Integer metadata rides along as f32 tensors of 16-bit limbs, which f32
//! stores exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, FormatError, Result};
use crate::numerics::Tensor;

pub const MAGIC: [u8; 4] = *b"PDCK";
pub const VERSION: u32 = 1;

/// Name of the tensor holding the class id of each embedding row.
pub const CLASS_IDS: &str = "meta.class_ids";

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let items: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.at < n {
            return Err(FormatError::Truncated(format!(
                "{what} needs {n} bytes at offset {}, {} left",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>, FormatError> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let count = r.u32("count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| FormatError::Invalid("parameter name is not utf-8".into()))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &format!("values of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(FormatError::Invalid(format!("duplicate parameter {name}")));
        }
    }
    if r.at != bytes.len() {
        return Err(FormatError::DimensionMismatch(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    Ok(out)
}

pub fn save_tensors<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<f32>>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensors(&bytes)?)
}

/// Packs integers into 16-bit limbs, least significant first.
pub fn pack_limbs(values: &[u64], limbs: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(values.len() * limbs);
    for &v in values {
        for k in 0..limbs {
            data.push(((v >> (16 * k)) & 0xffff) as f32);
        }
    }
    Tensor::new(vec![values.len(), limbs], data).expect("limb shape")
}

pub fn unpack_limbs(t: &Tensor<f32>, name: &str) -> Result<Vec<u64>> {
    let (n, limbs) = t
        .dims2()
        .map_err(|_| FormatError::Invalid(format!("{name} is not a limb matrix")))?;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = 0u64;
        for (k, &x) in t.row(i).iter().enumerate().take(limbs) {
            if !(0.0..=65535.0).contains(&x) || x.fract() != 0.0 {
                return Err(FormatError::Invalid(format!("{name} holds a non-limb value {x}")).into());
            }
            v |= (x as u64) << (16 * k);
        }
        out.push(v);
    }
    Ok(out)
}

impl DenoiserModel<f32> {
    /// Parameters plus the class-id table, ready for [`encode_tensors`].
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<_> = self.params().to_vec();
        let ids: Vec<u64> = self.class_ids().iter().map(|&c| c as u64).collect();
        out.push((CLASS_IDS.to_string(), pack_limbs(&ids, 2)));
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let named = self.named_tensors();
        save_tensors(path, named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Rebuilds a model from named tensors, checking every parameter against
    /// the shapes `cfg` implies.
    pub fn from_tensors(cfg: DenoiserConfig, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<Self> {
        let ids = match tensors.get(CLASS_IDS) {
            Some(t) => unpack_limbs(t, CLASS_IDS)?.into_iter().map(|c| c as u32).collect(),
            None => Vec::new(),
        };
        DenoiserModel::from_named(cfg, ids, tensors)
    }

    pub fn load(path: impl AsRef<Path>, cfg: DenoiserConfig) -> Result<Self> {
        Self::from_tensors(cfg, &load_tensors(path)?)
    }
}
