//! Named parameter storage, seeded initialization and the `.hlwt` file format.
//!
//! Layout (little-endian): `"HLWT"`, `u32` version, `u64` tensor count, then per tensor
//! `u32` name length, name bytes, `u32` rank, `u64` dims, `f32` payload.

use std::collections::HashMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"HLWT";
pub const VERSION: u32 = 1;

/// Shape and role of one parameter tensor, as registered by a compiled graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub dims: Vec<usize>,
    pub trainable: bool,
    pub role: ParamRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Conv kernel; carries its fan-in.
    Weight { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    Mean,
    Var,
}

impl ParamSlot {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered name to tensor map.
#[derive(Debug, Clone, Default)]
pub struct WeightStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> WeightStore<T> {
    pub fn new() -> Self {
        WeightStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter '{name}'")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "parameter '{name}': dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, dims, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i])
    }

    /// Looks up a parameter and checks its dims.
    pub fn require(&self, name: &str, dims: &[usize]) -> Result<&[T]> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("weights are missing '{name}'")))?;
        if e.dims != dims {
            return Err(Error::Consistency(format!(
                "'{name}' has dims {:?}, graph expects {dims:?}",
                e.dims
            )));
        }
        Ok(&e.data)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn cast<U: Scalar>(&self) -> WeightStore<U> {
        WeightStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    dims: e.dims.clone(),
                    data: e.data.iter().map(|&v| U::from(v).unwrap()).collect(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names, order-independent presence and dims against a graph's slots.
    pub fn validate_against(&self, slots: &[ParamSlot]) -> Result<()> {
        for s in slots {
            self.require(&s.name, &s.dims)?;
        }
        if self.entries.len() != slots.len() {
            let known: std::collections::HashSet<&str> = slots.iter().map(|s| s.name.as_str()).collect();
            let extra = self
                .entries
                .iter()
                .find(|e| !known.contains(e.name.as_str()))
                .map(|e| e.name.clone())
                .unwrap_or_default();
            return Err(Error::Consistency(format!(
                "weights hold {} tensors, graph expects {} (unexpected '{extra}')",
                self.entries.len(),
                slots.len()
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars, judged by the parameter-name suffix.
    pub fn trainable_count(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| !(e.name.ends_with(".mean") || e.name.ends_with(".var")))
            .map(|e| e.data.len() as u64)
            .sum()
    }
}

impl WeightStore<f32> {
    /// Equality on raw bit patterns, so NaN payloads and signed zeros count.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.dims == b.dims
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Uniform draw in the open interval `(-bound, bound)`.
///
/// An odd 24-bit integer `m` gives `m / 2^23` exactly in single precision, strictly inside
/// `(-1, 1)`; the product with `bound` can then never round onto the bound itself.
fn open_uniform(rng: &mut Xoshiro256PlusPlus, bound: f32) -> f32 {
    let u = (rng.next_u32() >> 9) as i32;
    let m = 2 * u + 1 - (1 << 23);
    bound * (m as f32 / (1u32 << 23) as f32)
}

/// Seeded initialization. Tensors are filled in slot order from a single stream.
pub fn init_from_slots(slots: &[ParamSlot], seed: u64) -> Result<WeightStore<f32>> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for s in slots {
        let n = s.numel();
        let data = match s.role {
            ParamRole::Weight { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..n).map(|_| open_uniform(&mut rng, bound)).collect()
            }
            ParamRole::Bias | ParamRole::Beta | ParamRole::Mean => vec![0.0; n],
            ParamRole::Gamma | ParamRole::Var => vec![1.0; n],
        };
        store.insert(s.name.clone(), s.dims.clone(), data)?;
    }
    Ok(store)
}

pub fn encode(store: &WeightStore<f32>) -> Vec<u8> {
    let payload: usize = store
        .iter()
        .map(|e| 8 + e.name.len() + 8 * e.dims.len() + 4 * e.data.len())
        .sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for e in store.iter() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightStore<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {:?}, expected \"HLWT\"", String::from_utf8_lossy(magic)),
        });
    }
    let at = r.pos as u64;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let count = r.u64("tensor count")?;
    let mut store = WeightStore::new();
    for i in 0..count {
        let at = r.pos as u64;
        let nlen = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?)
            .map_err(|_| Error::Format {
                offset: at + 4,
                msg: format!("tensor {i}: name is not UTF-8"),
            })?
            .to_string();
        let rank = r.u32(&format!("rank of '{name}'"))? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64(&format!("dims of '{name}'"))? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format {
                offset: r.pos as u64,
                msg: format!("tensor '{name}': dims {dims:?} overflow"),
            })?;
        let raw = r.take(numel, &format!("payload of tensor '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name.clone(), dims, data).map_err(|e| Error::Format {
            offset: at,
            msg: e.to_string(),
        })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        });
    }
    Ok(store)
}

pub fn save_weights(store: &WeightStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore<f32>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_slots(c_in: usize, c_out: usize, k: usize) -> Vec<ParamSlot> {
        let w = ParamSlot {
            name: "node0.conv.weight".into(),
            dims: vec![c_out, c_in, k, k],
            trainable: true,
            role: ParamRole::Weight { fan_in: c_in * k * k },
        };
        let mut v = vec![w];
        for (s, role, t) in [
            ("gamma", ParamRole::Gamma, true),
            ("beta", ParamRole::Beta, true),
            ("mean", ParamRole::Mean, false),
            ("var", ParamRole::Var, false),
        ] {
            v.push(ParamSlot {
                name: format!("node0.conv.{s}"),
                dims: vec![c_out],
                trainable: t,
                role,
            });
        }
        v
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let slots = conv_slots(3, 16, 3);
        let a = init_from_slots(&slots, 42).unwrap();
        let b = init_from_slots(&slots, 42).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_from_slots(&slots, 43).unwrap();
        assert!(!a.bit_eq(&c));
        let bound = (6.0f64 / 27.0).sqrt();
        let w = &a.get("node0.conv.weight").unwrap().data;
        assert_eq!(w.len(), 432);
        assert!(w.iter().all(|&v| (v as f64) > -bound && (v as f64) < bound));
        assert_eq!(a.get("node0.conv.gamma").unwrap().data, vec![1.0; 16]);
        assert_eq!(a.get("node0.conv.var").unwrap().data, vec![1.0; 16]);
        assert_eq!(a.trainable_count(), 432 + 32);
    }

    #[test]
    fn open_uniform_extremes_stay_inside() {
        for bound in [1.0f32, 1.5, 0.4714045, 3.0e-3, 7.9] {
            let lo = bound * (-((1 << 23) - 1) as f32 / (1u32 << 23) as f32);
            let hi = bound * (((1 << 23) - 1) as f32 / (1u32 << 23) as f32);
            assert!(lo > -bound && hi < bound, "bound {bound}");
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let s = init_from_slots(&conv_slots(4, 8, 3), 1).unwrap();
        let bytes = encode(&s);
        assert_eq!(&bytes[..4], b"HLWT");
        assert!(decode(&bytes).unwrap().bit_eq(&s));
    }

    #[test]
    fn decode_errors_are_located() {
        let s = init_from_slots(&conv_slots(4, 8, 3), 1).unwrap();
        let mut bytes = encode(&s);
        let good = bytes.clone();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));

        let mut v = good.clone();
        v[4] = 2;
        assert!(matches!(decode(&v), Err(Error::Format { offset: 4, .. })));

        let cut = &good[..good.len() - 10];
        match decode(cut) {
            Err(Error::Format { msg, .. }) => assert!(msg.contains("node0.conv.var"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_reports_mismatch() {
        let slots = conv_slots(4, 8, 3);
        let s = init_from_slots(&slots, 1).unwrap();
        assert!(s.validate_against(&slots).is_ok());
        let other = conv_slots(4, 16, 3);
        assert!(matches!(s.validate_against(&other), Err(Error::Consistency(_))));
        assert!(matches!(s.validate_against(&slots[..3]), Err(Error::Consistency(_))));
    }
}
