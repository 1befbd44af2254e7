//! Named-tensor checkpoints and the LFT1 on-disk container.
//!
//! LFT1 layout, little-endian throughout:
//! magic "LFT1", u32 tensor count, then per tensor: u16 name length, UTF-8
//! name, u8 dtype (0 = f32), u8 ndim, ndim x u64 dims, raw f32 data.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LFT1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Compatibility(format!("missing tensor {:?}", name)))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Errors unless `other` has exactly the same names and shapes,
    /// listing up to 10 offending tensor names.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        let mut offenders: Vec<String> = Vec::new();
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => offenders.push(format!("{} (missing)", name)),
                Some(o) if o.shape() != t.shape() => offenders.push(format!(
                    "{} (shape {:?} vs {:?})",
                    name,
                    t.shape(),
                    o.shape()
                )),
                _ => {}
            }
        }
        for name in other.entries.keys() {
            if !self.entries.contains_key(name) {
                offenders.push(format!("{} (extra)", name));
            }
        }
        if offenders.is_empty() {
            Ok(())
        } else {
            offenders.truncate(10);
            Err(Error::Compatibility(offenders.join(", ")))
        }
    }

    pub fn write_lft1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        let count = u32::try_from(self.entries.len())
            .map_err(|_| Error::Input("too many tensors for LFT1".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for (name, t) in &self.entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Input(format!("tensor name too long: {:?}", name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[0u8])?; // dtype f32
            let ndim = u8::try_from(t.shape().len())
                .map_err(|_| Error::Input("too many dims for LFT1".into()))?;
            w.write_all(&[ndim])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_lft1<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse(format!("bad LFT1 magic {:?}", magic)));
        }
        let count = read_u32(&mut r)?;
        let mut cp = Checkpoint::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::Parse(format!("tensor name not UTF-8: {}", e)))?;
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)?;
            if dtype[0] != 0 {
                return Err(Error::Parse(format!(
                    "unsupported dtype {} for tensor {:?}",
                    dtype[0], name
                )));
            }
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            let mut buf = [0u8; 4];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f32::from_le_bytes(buf);
            }
            cp.insert(name, Tensor::new(shape, data)?);
        }
        Ok(cp)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_lft1(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_lft1(std::io::BufReader::new(file))
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut cp = Checkpoint::new();
        cp.insert("a/weight", Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.0, 3.25, f32::MIN_POSITIVE, 1e30]).unwrap());
        cp.insert("b", Tensor::new(vec![1], vec![-0.0]).unwrap());
        let mut buf = Vec::new();
        cp.write_lft1(&mut buf).unwrap();
        let back = Checkpoint::read_lft1(&buf[..]).unwrap();
        assert_eq!(cp.len(), back.len());
        for (name, t) in cp.iter() {
            let o = back.get(name).unwrap();
            assert_eq!(t.shape(), o.shape());
            for (a, b) in t.data().iter().zip(o.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x00\x00\x00\x00".to_vec();
        assert!(matches!(Checkpoint::read_lft1(&buf[..]), Err(Error::Parse(_))));
    }

    #[test]
    fn compatibility_lists_offenders() {
        let mut a = Checkpoint::new();
        a.insert("x", Tensor::from_vec(vec![1.0]));
        a.insert("y", Tensor::from_vec(vec![1.0, 2.0]));
        let mut b = Checkpoint::new();
        b.insert("x", Tensor::from_vec(vec![1.0, 2.0]));
        b.insert("z", Tensor::from_vec(vec![1.0]));
        let err = a.check_compatible(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("x (shape"));
        assert!(msg.contains("y (missing)"));
        assert!(msg.contains("z (extra)"));
    }
}
