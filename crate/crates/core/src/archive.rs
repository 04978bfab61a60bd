//! Named-array container used for model assets, pose libraries, and checkpoints.
//!
//! A single binary file holds any number of named numeric arrays plus a string
//! metadata map. The layout is a fixed magic/version header, a JSON manifest
//! (names, dtypes, shapes, offsets, format tag), then 8-byte-aligned raw
//! little-endian data blocks. Known format tags: `dessie-assets/1`,
//! `dessie-poses/1`, `dessie-ckpt/1`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DSAR";
const VERSION: u32 = 1;

/// Element type of a stored array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    I64,
    U32,
}

impl DType {
    fn byte_width(self) -> usize {
        match self {
            DType::F64 | DType::I64 => 8,
            DType::F32 | DType::U32 => 4,
        }
    }
}

/// Array payload, kept in its stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn dtype(&self) -> DType {
        match self {
            ArrayData::F64(_) => DType::F64,
            ArrayData::F32(_) => DType::F32,
            ArrayData::I64(_) => DType::I64,
            ArrayData::U32(_) => DType::U32,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F64 => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => ArrayData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::I64 => ArrayData::I64(
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => ArrayData::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

/// A named array with shape.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    meta: BTreeMap<String, String>,
    arrays: Vec<ManifestEntry>,
}

/// In-memory named-array archive.
#[derive(Debug, Clone, Default)]
pub struct Archive {
    /// Format tag, e.g. `dessie-assets/1`.
    pub format: String,
    /// Free-form string metadata (documented per format).
    pub meta: BTreeMap<String, String>,
    arrays: BTreeMap<String, NamedArray>,
}

impl Archive {
    pub fn new(format: &str) -> Self {
        Archive {
            format: format.to_string(),
            meta: BTreeMap::new(),
            arrays: BTreeMap::new(),
        }
    }

    /// Fails unless the archive carries the expected format tag.
    pub fn expect_format(&self, tag: &str) -> Result<()> {
        if self.format != tag {
            return Err(Error::FormatMismatch {
                expected: tag.to_string(),
                found: self.format.clone(),
            });
        }
        Ok(())
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: ArrayData) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array `{name}`: shape does not match data length"
        );
        self.arrays
            .insert(name.to_string(), NamedArray { shape, data });
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.insert(name, shape, ArrayData::F64(data));
    }

    pub fn insert_f32(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        self.insert(name, shape, ArrayData::F32(data));
    }

    pub fn insert_i64(&mut self, name: &str, shape: Vec<usize>, data: Vec<i64>) {
        self.insert(name, shape, ArrayData::I64(data));
    }

    pub fn insert_u32(&mut self, name: &str, shape: Vec<usize>, data: Vec<u32>) {
        self.insert(name, shape, ArrayData::U32(data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::MissingArray(name.to_string()))
    }

    /// Fetches an f64 array, checking rank (not extents).
    pub fn f64_array(&self, name: &str, rank: usize) -> Result<(&[usize], &[f64])> {
        let arr = self.get(name)?;
        if arr.shape.len() != rank {
            return Err(Error::BadArray {
                name: name.to_string(),
                reason: format!("expected rank {rank}, found shape {:?}", arr.shape),
            });
        }
        match &arr.data {
            ArrayData::F64(v) => Ok((&arr.shape, v)),
            other => Err(Error::BadArray {
                name: name.to_string(),
                reason: format!("expected dtype f64, found {:?}", other.dtype()),
            }),
        }
    }

    /// Fetches an i64 array, checking rank.
    pub fn i64_array(&self, name: &str, rank: usize) -> Result<(&[usize], &[i64])> {
        let arr = self.get(name)?;
        if arr.shape.len() != rank {
            return Err(Error::BadArray {
                name: name.to_string(),
                reason: format!("expected rank {rank}, found shape {:?}", arr.shape),
            });
        }
        match &arr.data {
            ArrayData::I64(v) => Ok((&arr.shape, v)),
            other => Err(Error::BadArray {
                name: name.to_string(),
                reason: format!("expected dtype i64, found {:?}", other.dtype()),
            }),
        }
    }

    /// Fetches an f32 array, checking rank.
    pub fn f32_array(&self, name: &str, rank: usize) -> Result<(&[usize], &[f32])> {
        let arr = self.get(name)?;
        if arr.shape.len() != rank {
            return Err(Error::BadArray {
                name: name.to_string(),
                reason: format!("expected rank {rank}, found shape {:?}", arr.shape),
            });
        }
        match &arr.data {
            ArrayData::F32(v) => Ok((&arr.shape, v)),
            other => Err(Error::BadArray {
                name: name.to_string(),
                reason: format!("expected dtype f32, found {:?}", other.dtype()),
            }),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut blocks: Vec<Vec<u8>> = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, arr) in &self.arrays {
            let bytes = arr.data.to_le_bytes();
            let byte_len = bytes.len() as u64;
            entries.push(ManifestEntry {
                name: name.clone(),
                dtype: arr.data.dtype(),
                shape: arr.shape.clone(),
                offset,
                byte_len,
            });
            offset += byte_len;
            let pad = (8 - (offset % 8) as usize) % 8;
            offset += pad as u64;
            blocks.push(bytes);
        }
        let manifest = Manifest {
            format: self.format.clone(),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let manifest_json = serde_json::to_vec(&manifest)?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&VERSION.to_le_bytes())?;
        file.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_json)?;
        let pad = (8 - ((16 + manifest_json.len()) % 8)) % 8;
        file.write_all(&vec![0u8; pad])?;
        let mut written = 0u64;
        for bytes in blocks {
            file.write_all(&bytes)?;
            written += bytes.len() as u64;
            let pad = (8 - (written % 8) as usize) % 8;
            file.write_all(&vec![0u8; pad])?;
            written += pad as u64;
        }
        file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadArray {
                name: path.display().to_string(),
                reason: "not a named-array archive (bad magic)".to_string(),
            });
        }
        let mut word = [0u8; 4];
        file.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::BadArray {
                name: path.display().to_string(),
                reason: format!("unsupported archive version {version}"),
            });
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let manifest_len = u64::from_le_bytes(len_bytes) as usize;
        let mut manifest_json = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_json)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_json)?;
        let pad = (8 - ((16 + manifest_len) % 8)) % 8;
        std::io::copy(&mut file.by_ref().take(pad as u64), &mut std::io::sink())?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;

        let mut arrays = BTreeMap::new();
        for entry in manifest.arrays {
            let start = entry.offset as usize;
            let end = start + entry.byte_len as usize;
            if end > data.len() {
                return Err(Error::BadArray {
                    name: entry.name.clone(),
                    reason: "data block extends past end of file".to_string(),
                });
            }
            let n_elems: usize = entry.shape.iter().product();
            if n_elems * entry.dtype.byte_width() != entry.byte_len as usize {
                return Err(Error::BadArray {
                    name: entry.name.clone(),
                    reason: format!(
                        "shape {:?} does not match byte length {}",
                        entry.shape, entry.byte_len
                    ),
                });
            }
            let payload = ArrayData::from_le_bytes(entry.dtype, &data[start..end]);
            arrays.insert(
                entry.name,
                NamedArray {
                    shape: entry.shape,
                    data: payload,
                },
            );
        }
        Ok(Archive {
            format: manifest.format,
            meta: manifest.meta,
            arrays,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.dsar");
        let mut arc = Archive::new("dessie-assets/1");
        arc.meta.insert("note".into(), "hello".into());
        arc.insert_f64("x", vec![2, 3], vec![1.0, -2.5, f64::MIN_POSITIVE, 0.0, 3.25, 1e300]);
        arc.insert_i64("p", vec![4], vec![-1, 0, 1, 35]);
        arc.insert_f32("t", vec![1, 2], vec![0.5, -0.25]);
        arc.insert_u32("f", vec![3], vec![0, 7, 42]);
        arc.write(&path).unwrap();
        let back = Archive::read(&path).unwrap();
        assert_eq!(back.format, "dessie-assets/1");
        assert_eq!(back.meta.get("note").map(String::as_str), Some("hello"));
        for name in ["x", "p", "t", "f"] {
            assert_eq!(back.get(name).unwrap(), arc.get(name).unwrap(), "array {name}");
        }
    }

    #[test]
    fn missing_array_is_named() {
        let arc = Archive::new("dessie-assets/1");
        match arc.get("faces") {
            Err(Error::MissingArray(name)) => assert_eq!(name, "faces"),
            other => panic!("expected MissingArray, got {other:?}"),
        }
    }

    #[test]
    fn format_tag_is_checked() {
        let arc = Archive::new("dessie-poses/1");
        assert!(arc.expect_format("dessie-poses/1").is_ok());
        assert!(matches!(
            arc.expect_format("dessie-assets/1"),
            Err(Error::FormatMismatch { .. })
        ));
    }

    #[test]
    fn dtype_mismatch_reports_reason() {
        let mut arc = Archive::new("dessie-assets/1");
        arc.insert_f32("w", vec![2], vec![1.0, 2.0]);
        let err = arc.f64_array("w", 1).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }
}
