//! Named-tensor archive: a text manifest followed by little-endian blobs.
//!
//! ```text
//! GNETW1
//! <entry count>
//! <name> <dtype> <d0> <d1> ...     (one line per entry, sorted by name)
//! <blob 0><blob 1>...              (raw little-endian payloads, manifest order)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &str = "GNETW1\n";

#[derive(Debug, Clone, PartialEq)]
pub enum ArchiveData {
    F32(Vec<f32>),
    U64(Vec<u64>),
}

impl ArchiveData {
    fn dtype(&self) -> &'static str {
        match self {
            ArchiveData::F32(_) => "f32",
            ArchiveData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArchiveData::F32(v) => v.len(),
            ArchiveData::U64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub shape: Vec<usize>,
    pub data: ArchiveData,
}

impl ArchiveEntry {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        match &self.data {
            ArchiveData::F32(v) => Tensor::new(&self.shape, v.iter().map(|&x| T::of(x as f64)).collect()),
            ArchiveData::U64(_) => Err(Error::Archive("expected an f32 entry, found u64".into())),
        }
    }
}

/// Entries are kept sorted by name, so serialization never depends on
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightArchive {
    entries: BTreeMap<String, ArchiveEntry>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && !name.chars().any(|c| c.is_whitespace())
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArchiveEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<ArchiveEntry> {
        self.entries.remove(name)
    }

    fn insert(&mut self, name: &str, entry: ArchiveEntry) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::Archive(format!("invalid entry name {name:?}")));
        }
        let expected: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || expected != entry.data.len() {
            return Err(Error::Archive(format!(
                "entry `{name}`: shape {:?} does not match {} values",
                entry.shape,
                entry.data.len()
            )));
        }
        if self.entries.insert(name.to_string(), entry).is_some() {
            return Err(Error::Archive(format!("duplicate entry `{name}`")));
        }
        Ok(())
    }

    /// Stores a tensor as `f32`.
    pub fn insert_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let data = t.data().iter().map(|v| v.as_f64() as f32).collect();
        self.insert(
            name,
            ArchiveEntry {
                shape: t.shape().to_vec(),
                data: ArchiveData::F32(data),
            },
        )
    }

    pub fn insert_u64(&mut self, name: &str, values: &[u64]) -> Result<()> {
        self.insert(
            name,
            ArchiveEntry {
                shape: vec![values.len().max(1)],
                data: ArchiveData::U64(if values.is_empty() { vec![0] } else { values.to_vec() }),
            },
        )
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing entry `{name}`")))?
            .to_tensor()
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.entries.get(name).map(|e| &e.data) {
            Some(ArchiveData::U64(v)) => Ok(v),
            Some(_) => Err(Error::Archive(format!("entry `{name}` is not u64"))),
            None => Err(Error::Archive(format!("missing entry `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(format!("{}\n", self.entries.len()).as_bytes());
        for (name, e) in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("{name} {} {}\n", e.data.dtype(), dims.join(" ")).as_bytes());
        }
        for e in self.entries.values() {
            match &e.data {
                ArchiveData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArchiveData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| Error::Archive("bad magic, not a GNETW1 archive".into()))?;
        let mut cursor = 0usize;
        let next_line = |cursor: &mut usize| -> Result<&str> {
            let tail = &rest[*cursor..];
            let end = tail
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Archive("truncated manifest".into()))?;
            *cursor += end + 1;
            std::str::from_utf8(&tail[..end]).map_err(|_| Error::Archive("manifest is not UTF-8".into()))
        };
        let count: usize = next_line(&mut cursor)?
            .trim()
            .parse()
            .map_err(|_| Error::Archive("bad entry count".into()))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line(&mut cursor)?;
            let mut fields = line.split(' ');
            let name = fields.next().unwrap_or_default().to_string();
            let dtype = fields
                .next()
                .ok_or_else(|| Error::Archive(format!("entry `{name}` has no dtype")))?
                .to_string();
            let shape = fields
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Archive(format!("entry `{name}` has a bad shape")))?;
            manifest.push((name, dtype, shape));
        }
        let mut blob = &rest[cursor..];
        let mut archive = WeightArchive::new();
        for (name, dtype, shape) in manifest {
            let n: usize = shape.iter().product();
            let width = match dtype.as_str() {
                "f32" => 4,
                "u64" => 8,
                other => return Err(Error::Archive(format!("entry `{name}` has unknown dtype {other}"))),
            };
            if blob.len() < n * width {
                return Err(Error::Archive(format!(
                    "truncated blob for `{name}`: need {} bytes, {} left",
                    n * width,
                    blob.len()
                )));
            }
            let (head, tail) = blob.split_at(n * width);
            blob = tail;
            let data = if width == 4 {
                ArchiveData::F32(
                    head.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                ArchiveData::U64(
                    head.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            };
            archive.insert(&name, ArchiveEntry { shape, data })?;
        }
        if !blob.is_empty() {
            return Err(Error::Archive(format!("{} trailing bytes after last blob", blob.len())));
        }
        Ok(archive)
    }

    /// Writes through a temporary sibling file, so a failed write leaves no
    /// partial archive behind.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.partial", file_name.to_string_lossy()));
    let result = (|| -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightArchive {
        let mut a = WeightArchive::new();
        a.insert_tensor("b.weight", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0))
            .unwrap();
        a.insert_tensor("a.bias", &Tensor::<f32>::full(&[4], f32::MIN_POSITIVE)).unwrap();
        a.insert_u64("state.step", &[u64::MAX, 7]).unwrap();
        a
    }

    #[test]
    fn exact_layout() {
        let mut a = WeightArchive::new();
        a.insert_tensor("x", &Tensor::<f32>::new(&[1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let bytes = a.to_bytes();
        let mut expect = b"GNETW1\n1\nx f32 1 2\n".to_vec();
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn manifest_sorted_regardless_of_insertion() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes[..40]).to_string();
        assert!(text.starts_with("GNETW1\n3\na.bias f32 4\nb.weight f32 2 3\n"), "{text}");
        let mut other = WeightArchive::new();
        other.insert_u64("state.step", &[u64::MAX, 7]).unwrap();
        other.insert_tensor("a.bias", &Tensor::<f32>::full(&[4], f32::MIN_POSITIVE)).unwrap();
        other
            .insert_tensor("b.weight", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0))
            .unwrap();
        assert_eq!(other.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 9, 10, 3] {
            assert!(WeightArchive::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(WeightArchive::from_bytes(&extra).is_err());
        assert!(WeightArchive::from_bytes(b"NOTANARCHIVE").is_err());
        let mut dup = WeightArchive::new();
        dup.insert_tensor("x", &Tensor::<f32>::zeros(&[1])).unwrap();
        assert!(dup.insert_tensor("x", &Tensor::<f32>::zeros(&[1])).is_err());
        assert!(dup.insert_tensor("has space", &Tensor::<f32>::zeros(&[1])).is_err());
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(values in proptest::collection::vec(any::<f32>(), 1..64), tag in 0u64..1000) {
            let mut a = WeightArchive::new();
            let n = values.len();
            a.insert(
                "t",
                ArchiveEntry { shape: vec![n], data: ArchiveData::F32(values) },
            ).unwrap();
            a.insert_u64("s", &[tag]).unwrap();
            let bytes = a.to_bytes();
            let b = WeightArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(b.to_bytes(), bytes);
        }
    }
}
