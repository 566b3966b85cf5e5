//! `HMLT` named-tensor container.
//!
//! Layout: magic `HMLT`, u32 version (1), u32 tensor count, then per tensor
//! a u16 name length, the UTF-8 name, u8 dtype (0 = f32), u8 rank, rank × u64
//! dims and the little-endian row-major payload.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"HMLT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        });
    }

    pub fn push_raw(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Structural(format!("checkpoint has no tensor `{name}`")))?;
        Tensor::new(t.data.iter().map(|&v| T::of(f64::from(v))).collect(), &t.shape)
    }

    /// Tensors whose names start with `prefix.`, keyed without that prefix.
    pub fn section<T: Scalar>(&self, prefix: &str) -> Result<HashMap<String, Tensor<T>>> {
        let lead = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix(&lead).map(|rest| (rest, t)))
            .map(|(rest, t)| {
                let data = t.data.iter().map(|&v| T::of(f64::from(v))).collect();
                Ok((rest.to_string(), Tensor::new(data, &t.shape)?))
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::format("checkpoint", "too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::format("checkpoint", format!("name `{}` too long", t.name)))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::format("checkpoint", format!("`{}` has too many dims", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::format("checkpoint", format!("`{}` payload/shape mismatch", t.name)));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F32);
            out.push(rank);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::format("checkpoint", format!("`{name}` has unknown dtype {dtype}")));
            }
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::format("checkpoint", format!("`{name}` dim overflows")))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::format("checkpoint", format!("`{name}` size overflows")))?;
                shape.push(d);
            }
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::format("checkpoint", format!("`{name}` size overflows")))?;
            let data = r
                .take(nbytes)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// True iff every `backbone.*` tensor of `before` is byte-identical in `after`.
pub fn verify_frozen(before: &Checkpoint, after: &Checkpoint) -> Result<bool> {
    let mut all_equal = true;
    let mut seen = 0;
    for t in before.tensors.iter().filter(|t| t.name.starts_with("backbone.")) {
        seen += 1;
        let other = after
            .get(&t.name)
            .ok_or_else(|| Error::Structural(format!("`{}` missing from second checkpoint", t.name)))?;
        let same = other.shape == t.shape
            && other.data.len() == t.data.len()
            && other.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits());
        all_equal &= same;
    }
    let after_count = after.tensors.iter().filter(|t| t.name.starts_with("backbone.")).count();
    if seen == 0 || after_count != seen {
        return Err(Error::Structural(format!(
            "backbone tensor sets differ ({seen} vs {after_count})"
        )));
    }
    Ok(all_equal)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_raw("backbone.visual.proj", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-8, f32::MAX]);
        c.push_raw("prompts.real", &[1, 2], vec![0.25, 0.5]);
        c.push_raw("optimizer.step", &[], vec![7.0]);
        c
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"HMLT");
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::default();
        c.push_raw("ab", &[1], vec![1.0]);
        let b = c.to_bytes().unwrap();
        let expect: Vec<u8> = [
            &b"HMLT"[..],
            &1u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            &2u16.to_le_bytes(),
            b"ab",
            &[0u8, 1u8],
            &1u64.to_le_bytes(),
            &1.0f32.to_le_bytes(),
        ]
        .concat();
        assert_eq!(b, expect);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut bad = sample().to_bytes().unwrap();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { .. })));
        let mut huge = Vec::new();
        huge.extend_from_slice(b"HMLT");
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&1u32.to_le_bytes());
        huge.extend_from_slice(&1u16.to_le_bytes());
        huge.push(b'x');
        huge.extend_from_slice(&[0, 2]);
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&huge), Err(Error::Format { .. })));
    }

    #[test]
    fn frozen_check() {
        let a = sample();
        let mut b = sample();
        b.tensors[1].data[0] = 9.0;
        assert!(verify_frozen(&a, &b).unwrap());
        b.tensors[0].data[1] = f32::from_bits(b.tensors[0].data[1].to_bits() ^ 1);
        assert!(!verify_frozen(&a, &b).unwrap());
        let mut c = sample();
        c.tensors.remove(0);
        assert!(matches!(verify_frozen(&a, &c), Err(Error::Structural(_))));
    }
}
