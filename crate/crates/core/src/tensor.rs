//! Named tensors and the checkpoint file format.
//!
//! A checkpoint file is laid out as:
//!
//! ```text
//! [8 bytes LE u64: header length N]
//! [N bytes: UTF-8 JSON header]
//! [raw tensor data]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! with offsets relative to the first byte after the header. An optional
//! `"__metadata__"` entry holds string-to-string pairs.
//!
//! Writing is canonical: header keys are sorted, tensors are packed in header
//! order with no gaps, and the header is padded with spaces to a multiple of
//! eight bytes. Reading a canonical file and writing it back yields the same
//! bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use half::{bf16, f16};
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::vocab::{Vocab, VocabError};

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers larger than this; real headers are a few MiB at most.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Error, Debug)]
pub enum TensorError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("file too small to contain a header length ({0} bytes)")]
    FileTooSmall(usize),
    #[error("header length {declared} exceeds file size {available}")]
    HeaderTooLong { declared: u64, available: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown dtype {dtype:?} for tensor {name}")]
    UnknownDtype { name: String, dtype: String },
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("tensor {name}: out-of-bounds offsets [{begin}, {end}) for data region of {len} bytes")]
    OutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        len: usize,
    },
    #[error("tensor {first} and {second}: overlapping data offsets")]
    Overlap { first: String, second: String },
    #[error("data region has {unused} bytes not covered by any tensor")]
    UncoveredBytes { unused: usize },
    #[error("tensor {name}: {expected} bytes expected from dtype and shape, found {actual}")]
    ByteLength {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Storage dtype of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const ALL: [DType; 3] = [DType::F32, DType::F16, DType::BF16];

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named, typed, shaped block of little-endian data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

/// Number of elements described by a row-major shape. A scalar has one.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(name: impl Into<String>, dtype: DType, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let t = Tensor {
            name: name.into(),
            dtype,
            shape,
            data,
        };
        t.check()?;
        Ok(t)
    }

    /// Encode F32 values into a tensor of the given storage dtype
    /// (round-to-nearest-even on narrowing).
    pub fn from_f32(name: impl Into<String>, dtype: DType, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let name = name.into();
        let expected = numel(&shape);
        if values.len() != expected {
            return Err(TensorError::ByteLength {
                name,
                expected: expected * dtype.size(),
                actual: values.len() * dtype.size(),
            });
        }
        Ok(Tensor {
            name,
            dtype,
            shape,
            data: encode(values, dtype),
        })
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn check(&self) -> Result<()> {
        let expected = self.numel() * self.dtype.size();
        if self.data.len() != expected {
            return Err(TensorError::ByteLength {
                name: self.name.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    /// Decode to F32. Widening from F16/BF16 is exact.
    pub fn to_f32(&self) -> Vec<f32> {
        decode(&self.data, self.dtype)
    }

    /// Convert to another storage dtype, keeping name and shape.
    /// Values beyond the F16 range saturate to infinity.
    pub fn cast(&self, target: DType) -> Tensor {
        let data = if target == self.dtype {
            self.data.clone()
        } else {
            encode(&self.to_f32(), target)
        };
        Tensor {
            name: self.name.clone(),
            dtype: target,
            shape: self.shape.clone(),
            data,
        }
    }
}

pub fn cast_tensor(t: &Tensor, target: DType) -> Tensor {
    t.cast(target)
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    }
}

fn encode(values: &[f32], dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        DType::BF16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
    }
    out
}

/// One model on disk: tensors by name, an optional vocabulary, and
/// free-form metadata.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
    pub vocab: Option<Vocab>,
    pub source_label: String,
}

impl Checkpoint {
    pub fn new(source_label: impl Into<String>) -> Self {
        Checkpoint {
            source_label: source_label.into(),
            ..Default::default()
        }
    }

    /// Insert a tensor; fails if the name is already present.
    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        tensor.check()?;
        if self.tensors.contains_key(&tensor.name) {
            return Err(TensorError::DuplicateName(tensor.name));
        }
        self.tensors.insert(tensor.name.clone(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Serialize to the canonical byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for t in self.tensors.values() {
            t.check()?;
            let end = offset + t.data.len();
            header.insert(
                t.name.clone(),
                serde_json::json!({
                    "data_offsets": [offset, end],
                    "dtype": t.dtype.as_str(),
                    "shape": t.shape,
                }),
            );
            offset = end;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.to_string(), serde_json::json!(self.metadata));
        }
        // serde_json::Map is a BTreeMap without `preserve_order`, so keys come out sorted.
        let mut header_bytes = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for t in self.tensors.values() {
            out.extend_from_slice(&t.data);
        }
        Ok(out)
    }

    /// Parse and validate a checkpoint from its byte layout.
    pub fn from_bytes(bytes: &[u8], source_label: impl Into<String>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(TensorError::FileTooSmall(bytes.len()));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if n > MAX_HEADER_LEN || n > (bytes.len() - 8) as u64 {
            return Err(TensorError::HeaderTooLong {
                declared: n,
                available: bytes.len(),
            });
        }
        let header_end = 8 + n as usize;
        let header_str = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| TensorError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let raw: RawHeader =
            serde_json::from_str(header_str).map_err(|e| TensorError::MalformedHeader(e.to_string()))?;
        if let Some(name) = raw.duplicate {
            return Err(TensorError::DuplicateName(name));
        }
        let entries = raw.entries;
        let data = &bytes[header_end..];

        let mut ckpt = Checkpoint::new(source_label);
        let mut spans: Vec<(u64, u64, String)> = Vec::new();
        for (name, value) in entries {
            if name == METADATA_KEY {
                ckpt.metadata = serde_json::from_value(value)
                    .map_err(|e| TensorError::MalformedHeader(format!("__metadata__: {e}")))?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| TensorError::MalformedHeader(format!("tensor {name}: {e}")))?;
            let dtype = DType::parse(&entry.dtype).ok_or_else(|| TensorError::UnknownDtype {
                name: name.clone(),
                dtype: entry.dtype.clone(),
            })?;
            let [begin, end] = entry.data_offsets;
            if begin > end || end > data.len() as u64 {
                return Err(TensorError::OutOfBounds {
                    name,
                    begin,
                    end,
                    len: data.len(),
                });
            }
            let expected = entry
                .shape
                .iter()
                .try_fold(dtype.size(), |acc, d| acc.checked_mul(*d));
            if expected != Some((end - begin) as usize) {
                return Err(TensorError::ByteLength {
                    name,
                    expected: expected.unwrap_or(usize::MAX),
                    actual: (end - begin) as usize,
                });
            }
            spans.push((begin, end, name.clone()));
            let tensor = Tensor {
                name: name.clone(),
                dtype,
                shape: entry.shape,
                data: data[begin as usize..end as usize].to_vec(),
            };
            ckpt.tensors.insert(name, tensor);
        }

        spans.sort();
        let mut covered = 0u64;
        for pair in spans.windows(2) {
            if pair[1].0 < pair[0].1 {
                return Err(TensorError::Overlap {
                    first: pair[0].2.clone(),
                    second: pair[1].2.clone(),
                });
            }
        }
        for (b, e, _) in &spans {
            covered += e - b;
        }
        if covered != data.len() as u64 {
            return Err(TensorError::UncoveredBytes {
                unused: data.len() - covered as usize,
            });
        }
        Ok(ckpt)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in file order. A plain JSON map would silently collapse
/// duplicate keys, so the first repeated key is recorded instead.
struct RawHeader {
    entries: Vec<(String, Value)>,
    duplicate: Option<String>,
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut seen = HashSet::new();
                let mut entries = Vec::new();
                let mut duplicate = None;
                while let Some((key, value)) = map.next_entry::<String, Value>()? {
                    if !seen.insert(key.clone()) {
                        duplicate.get_or_insert(key);
                        continue;
                    }
                    entries.push((key, value));
                }
                Ok(RawHeader { entries, duplicate })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TensorError + '_ {
    move |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Read a checkpoint file. The vocabulary is not loaded; see
/// [`read_checkpoint_with_vocab`].
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes, path.display().to_string())
}

/// Read a checkpoint and attach a vocabulary sidecar, if one is given or
/// found at the default location (`<checkpoint>.vocab`).
pub fn read_checkpoint_with_vocab(path: impl AsRef<Path>, vocab: Option<&Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut ckpt = read_checkpoint(path)?;
    let default = vocab_sidecar_path(path);
    let vocab_path = match vocab {
        Some(p) => Some(p.to_path_buf()),
        None if default.exists() => Some(default),
        None => None,
    };
    if let Some(p) = vocab_path {
        ckpt.vocab = Some(Vocab::read(&p)?);
    }
    Ok(ckpt)
}

/// Write a checkpoint in canonical form. The vocabulary, if any, is written
/// to the sidecar path next to it.
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&bytes).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))?;
    if let Some(vocab) = &ckpt.vocab {
        vocab.write(vocab_sidecar_path(path))?;
    }
    Ok(())
}

/// `model.safetensors` -> `model.safetensors.vocab`
pub fn vocab_sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".vocab");
    s.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn file_with_header(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn reads_hand_built_file() {
        let bytes = file_with_header(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        let ckpt = Checkpoint::from_bytes(&bytes, "hand").unwrap();
        assert_eq!(ckpt.len(), 1);
        assert_eq!(ckpt.get("w").unwrap().to_f32(), vec![1.0, 2.0]);
    }

    #[test]
    fn rejects_offsets_past_end() {
        let bytes = file_with_header(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,16]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        let err = Checkpoint::from_bytes(&bytes, "bad").unwrap_err();
        assert!(matches!(err, TensorError::OutOfBounds { .. }), "{err}");
        assert!(err.to_string().contains("out-of-bounds offsets"));
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let ckpt = Checkpoint::new("empty");
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, "empty").unwrap();
        assert!(back.is_empty());
        assert_eq!(&bytes[8..10], b"{}");
    }

    #[test]
    fn packs_contiguously_in_name_order() {
        let mut ckpt = Checkpoint::new("x");
        ckpt.insert(Tensor::from_f32("b", DType::F16, vec![3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        ckpt.insert(Tensor::from_f32("a", DType::F32, vec![2], &[1.0, 2.0]).unwrap()).unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["a"]["data_offsets"], serde_json::json!([0, 8]));
        assert_eq!(header["b"]["data_offsets"], serde_json::json!([8, 14]));
        assert_eq!(bytes.len(), 8 + n + 14);
    }

    #[test]
    fn scalar_tensor_has_one_element() {
        let t = Tensor::from_f32("s", DType::BF16, vec![], &[3.0]).unwrap();
        assert_eq!(t.numel(), 1);
        assert_eq!(t.data.len(), 2);
    }

    #[test]
    fn duplicate_insert_is_rejected() {
        let mut ckpt = Checkpoint::new("x");
        let t = Tensor::from_f32("a", DType::F32, vec![1], &[1.0]).unwrap();
        ckpt.insert(t.clone()).unwrap();
        assert!(matches!(ckpt.insert(t), Err(TensorError::DuplicateName(_))));
    }

    #[test]
    fn cast_one_through_bf16() {
        let t = Tensor::from_f32("x", DType::F32, vec![1], &[1.0]).unwrap();
        assert_eq!(t.cast(DType::BF16).cast(DType::F32).to_f32(), vec![1.0]);
    }

    #[test]
    fn f16_saturates_to_infinity() {
        let t = Tensor::from_f32("x", DType::F32, vec![2], &[1.0e6, -1.0e6]).unwrap();
        let v = t.cast(DType::F16).to_f32();
        assert_eq!(v, vec![f32::INFINITY, f32::NEG_INFINITY]);
    }

    #[test]
    fn metadata_round_trips() {
        let mut ckpt = Checkpoint::new("m");
        ckpt.metadata.insert("merge.method".into(), "ties".into());
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap(), "m").unwrap();
        assert_eq!(back.metadata["merge.method"], "ties");
    }
}
