//! Self-describing binary container for named arrays plus JSON attributes.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! the raw little-endian array payloads in header order. Payload bytes are
//! written verbatim, so round trips are bit-exact at the stored precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GDONBIN1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    arrays: Vec<ArrayDesc>,
    attrs: serde_json::Map<String, Value>,
}

/// Typed array payload.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
            ArrayData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn write_to(&self, w: &mut impl Write) -> Result<()> {
        match self {
            ArrayData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::I64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::U64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    fn read_from(dtype: &str, count: usize, r: &mut impl Read) -> Result<Self> {
        fn read_vec<T, const W: usize>(
            count: usize,
            r: &mut impl Read,
            from_le: impl Fn([u8; W]) -> T,
        ) -> Result<Vec<T>> {
            let mut bytes = vec![0u8; count * W];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(W)
                .map(|c| from_le(c.try_into().unwrap()))
                .collect())
        }
        match dtype {
            "f32" => Ok(ArrayData::F32(read_vec(count, r, f32::from_le_bytes)?)),
            "f64" => Ok(ArrayData::F64(read_vec(count, r, f64::from_le_bytes)?)),
            "i64" => Ok(ArrayData::I64(read_vec(count, r, i64::from_le_bytes)?)),
            "u64" => Ok(ArrayData::U64(read_vec(count, r, u64::from_le_bytes)?)),
            other => Err(Error::schema(other, "unknown dtype")),
        }
    }
}

/// In-memory view of a container file: ordered named arrays plus attributes.
#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub attrs: serde_json::Map<String, Value>,
    arrays: Vec<(String, Vec<usize>, ArrayData)>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container { kind: kind.into(), attrs: serde_json::Map::new(), arrays: Vec::new() }
    }

    pub fn set_attr(&mut self, key: impl Into<String>, value: Value) {
        self.attrs.insert(key.into(), value);
    }

    pub fn attr(&self, key: &str) -> Result<&Value> {
        self.attrs
            .get(key)
            .ok_or_else(|| Error::schema(key, "missing required attribute"))
    }

    pub fn attr_f64(&self, key: &str) -> Result<f64> {
        self.attr(key)?
            .as_f64()
            .ok_or_else(|| Error::schema(key, "attribute is not a number"))
    }

    pub fn attr_u64(&self, key: &str) -> Result<u64> {
        self.attr(key)?
            .as_u64()
            .ok_or_else(|| Error::schema(key, "attribute is not an unsigned integer"))
    }

    pub fn attr_str(&self, key: &str) -> Result<&str> {
        self.attr(key)?
            .as_str()
            .ok_or_else(|| Error::schema(key, "attribute is not a string"))
    }

    pub fn push_array(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        self.arrays.push((name, shape, data));
    }

    pub fn array_names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn has_array(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _, _)| n == name)
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &ArrayData)> {
        self.arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d))
            .ok_or_else(|| Error::schema(name, "missing required array"))
    }

    pub fn array_f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        match self.array(name)? {
            (s, ArrayData::F32(v)) => Ok((s, v)),
            _ => Err(Error::schema(name, "expected dtype f32")),
        }
    }

    pub fn array_f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.array(name)? {
            (s, ArrayData::F64(v)) => Ok((s, v)),
            _ => Err(Error::schema(name, "expected dtype f64")),
        }
    }

    pub fn array_u64(&self, name: &str) -> Result<(&[usize], &[u64])> {
        match self.array(name)? {
            (s, ArrayData::U64(v)) => Ok((s, v)),
            _ => Err(Error::schema(name, "expected dtype u64")),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = Header {
            kind: self.kind.clone(),
            version: 1,
            arrays: self
                .arrays
                .iter()
                .map(|(n, s, d)| ArrayDesc {
                    name: n.clone(),
                    dtype: d.dtype().to_string(),
                    shape: s.clone(),
                })
                .collect(),
            attrs: self.attrs.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, _, data) in &self.arrays {
            data.write_to(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::schema("magic", "not a container file"));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for desc in &header.arrays {
            let count: usize = desc.shape.iter().product();
            let data = ArrayData::read_from(&desc.dtype, count, &mut r)?;
            arrays.push((desc.name.clone(), desc.shape.clone(), data));
        }
        Ok(Container { kind: header.kind, attrs: header.attrs, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gdon");
        let mut c = Container::new("test");
        // include values that stress exactness: subnormal, negative zero, pi
        let f32s = vec![1.0f32, -0.0, f32::MIN_POSITIVE / 2.0, std::f32::consts::PI];
        let f64s = vec![std::f64::consts::E, -1e-300, 0.1];
        c.push_array("a", vec![2, 2], ArrayData::F32(f32s.clone()));
        c.push_array("b", vec![3], ArrayData::F64(f64s.clone()));
        c.push_array("s", vec![2], ArrayData::U64(vec![7, u64::MAX]));
        c.set_attr("seed", serde_json::json!(42));
        c.save(&path).unwrap();

        let back = Container::load(&path).unwrap();
        let (shape, a) = back.array_f32("a").unwrap();
        assert_eq!(shape, &[2, 2]);
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            f32s.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let (_, b) = back.array_f64("b").unwrap();
        assert_eq!(
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            f64s.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.array_u64("s").unwrap().1, &[7, u64::MAX]);
        assert_eq!(back.attr_u64("seed").unwrap(), 42);
    }

    #[test]
    fn missing_array_names_field() {
        let c = Container::new("test");
        let err = c.array("times").unwrap_err();
        match err {
            Error::SchemaViolation(field, _) => assert_eq!(field, "times"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus");
        std::fs::write(&path, b"definitely not a container").unwrap();
        assert!(Container::load(&path).is_err());
    }
}
