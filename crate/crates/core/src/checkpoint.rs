//! Little-endian tensor container shared by every model component.
//!
//! Layout:
//!
//! ```text
//! "MSEF"                      magic
//! u32                         format version (1)
//! u32 len, bytes              component tag ("BACKBONE", "TSFM", "FUSION", ...)
//! u32                         value width in bytes (4 = f32, 8 = f64)
//! u32 count                   config entries, each: u32 len, key, u32 len, value
//! u32 count                   tensors, each:
//!     u32 len, name bytes
//!     u32 rank, u32 extents[rank]
//!     values[product(extents)] at the declared width
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MSEF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub component: String,
    /// 4 or 8.
    pub width: u32,
    pub config: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(component: &str, width: u32) -> Self {
        assert!(width == 4 || width == 8, "value width must be 4 or 8");
        Checkpoint {
            component: component.to_string(),
            width,
            config: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Container whose value width matches the scalar type `T`.
    pub fn for_real<T: Real>(component: &str) -> Self {
        Self::new(component, T::WIDTH as u32)
    }

    pub fn set_config(&mut self, key: &str, value: impl ToString) {
        self.config.push((key.to_string(), value.to_string()));
    }

    pub fn config_value(&self, key: &str) -> Result<&str> {
        self.config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing config field {key:?}")))
    }

    pub fn parse_config<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.config_value(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("config field {key:?} has invalid value {raw:?}")))
    }

    pub fn push<T: Real>(&mut self, name: &str, t: &Tensor<T>) {
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        });
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let nt = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        Tensor::new(
            nt.shape.clone(),
            nt.values.iter().map(|&v| T::lit(v)).collect(),
        )
    }

    pub fn expect_component(&self, component: &str) -> Result<()> {
        if self.component != component {
            return Err(Error::Checkpoint(format!(
                "expected component {component:?}, found {:?}",
                self.component
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.component);
        put_u32(&mut out, self.width);
        put_u32(&mut out, self.config.len() as u32);
        for (k, v) in &self.config {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            put_u32(&mut out, t.shape.len() as u32);
            for &e in &t.shape {
                put_u32(&mut out, e as u32);
            }
            for &v in &t.values {
                if self.width == 4 {
                    (v as f32).write_le(&mut out);
                } else {
                    v.write_le(&mut out);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let component = r.string()?;
        let width = r.u32()?;
        if width != 4 && width != 8 {
            return Err(Error::Checkpoint(format!("unsupported value width {width}")));
        }
        let n_config = r.u32()?;
        let mut config = Vec::with_capacity(n_config as usize);
        for _ in 0..n_config {
            config.push((r.string()?, r.string()?));
        }
        let n_tensors = r.u32()?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * width as usize)?;
            let values = raw
                .chunks_exact(width as usize)
                .map(|c| {
                    if width == 4 {
                        f32::read_le(c) as f64
                    } else {
                        f64::read_le(c)
                    }
                })
                .collect();
            tensors.push(NamedTensor {
                name,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            component,
            width,
            config,
            tensors,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
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
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_little_endian() {
        let mut ck = Checkpoint::new("TSFM", 4);
        ck.set_config("patch_len", 8);
        ck.push("w", &Tensor::<f32>::from_vec(vec![1.5]));
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"MSEF");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &4u32.to_le_bytes());
        assert_eq!(&b[12..16], b"TSFM");
        assert_eq!(&b[b.len() - 4..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let mut ck = Checkpoint::new("X", 8);
        ck.push("w", &Tensor::<f64>::from_vec(vec![1.0, 2.0]));
        let mut b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        b.push(0);
        assert!(Checkpoint::from_bytes(&b).is_err());
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 0..40), wide in any::<bool>()) {
            let mut ck = Checkpoint::new("FUSION", if wide { 8 } else { 4 });
            ck.set_config("mode", "full");
            let t = Tensor::<f64>::from_vec(values.clone());
            ck.push("t", &t);
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            let got: Tensor<f64> = back.tensor("t").unwrap();
            for (a, b) in got.data().iter().zip(&values) {
                if wide { prop_assert_eq!(a, b) } else { prop_assert_eq!(*a as f32, *b as f32) }
            }
            prop_assert_eq!(back.config_value("mode").unwrap(), "full");
        }
    }
}
