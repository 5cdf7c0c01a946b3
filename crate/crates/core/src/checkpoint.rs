//! Single-file tensor container: `[u64 LE header length][JSON header][data]`.
//!
//! Header entries map tensor names to `{"dtype", "shape", "data_offsets"}` with
//! offsets relative to the start of the data buffer. An optional
//! `"__metadata__"` object carries string→string provenance and is preserved
//! verbatim.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use half::{bf16, f16};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::Matrix;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F64 => "F64",
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    /// Unit roundoff of the format (half the spacing of numbers near 1).
    pub fn unit_roundoff(self) -> f64 {
        match self {
            Dtype::F64 => f64::EPSILON / 2.0,
            Dtype::F32 => (f32::EPSILON as f64) / 2.0,
            Dtype::F16 => 2f64.powi(-11),
            Dtype::BF16 => 2f64.powi(-8),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F64" => Ok(Dtype::F64),
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::MalformedHeader(format!("unsupported dtype '{other}'"))),
        }
    }
}

/// One tensor entry: its dtype, shape and byte span inside the data buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub start: usize,
    pub end: usize,
}

impl TensorRecord {
    pub fn len_bytes(&self) -> usize {
        self.end - self.start
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// `Some((rows, cols))` for non-empty 2-D tensors.
    pub fn matrix_shape(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] if r > 0 && c > 0 => Some((r, c)),
            _ => None,
        }
    }
}

/// Named tensors plus the raw data buffer they point into.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorRecord>,
    data: Vec<u8>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn bytes_of(&self, rec: &TensorRecord) -> &[u8] {
        &self.data[rec.start..rec.end]
    }

    pub fn tensor_bytes(&self, name: &str) -> Result<&[u8]> {
        let rec = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(self.bytes_of(rec))
    }

    /// Append a tensor at the end of the data buffer.
    pub fn insert(&mut self, name: &str, dtype: Dtype, shape: Vec<usize>, bytes: &[u8]) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::DuplicateName(name.to_string()));
        }
        let expected = shape.iter().product::<usize>() * dtype.width();
        if bytes.len() != expected {
            return Err(Error::SpanOutOfBounds {
                name: name.to_string(),
                start: self.data.len(),
                end: self.data.len() + bytes.len(),
                reason: format!("expected {expected} bytes for {dtype} {shape:?}"),
            });
        }
        let start = self.data.len();
        self.data.extend_from_slice(bytes);
        self.tensors.insert(
            name.to_string(),
            TensorRecord {
                name: name.to_string(),
                dtype,
                shape,
                start,
                end: self.data.len(),
            },
        );
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Matrix, dtype: Dtype) -> Result<()> {
        let (rec, bytes) = from_matrix(m, name, dtype);
        self.insert(name, dtype, rec.shape, &bytes)
    }

    /// Decode a 2-D tensor into a double-precision matrix.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let rec = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        to_matrix(rec, &self.data)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader("file shorter than 8 bytes".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|n| n.checked_add(8))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                Error::MalformedHeader(format!("header length {header_len} exceeds file size {}", bytes.len()))
            })?;
        let header: RawHeader = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let data = bytes[header_end..].to_vec();

        let mut tensors = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        let mut seen_meta = false;
        for (key, value) in header.0 {
            if key == METADATA_KEY {
                if seen_meta {
                    return Err(Error::DuplicateName(key));
                }
                seen_meta = true;
                metadata = parse_metadata(value)?;
                continue;
            }
            if tensors.contains_key(&key) {
                return Err(Error::DuplicateName(key));
            }
            let rec = parse_entry(&key, value)?;
            let expected = rec.numel() * rec.dtype.width();
            if rec.start > rec.end || rec.end > data.len() {
                return Err(span_err(&rec, format!("buffer holds {} bytes", data.len())));
            }
            if rec.len_bytes() != expected {
                return Err(span_err(&rec, format!("expected {expected} bytes for {} {:?}", rec.dtype, rec.shape)));
            }
            tensors.insert(key, rec);
        }

        let mut spans: Vec<&TensorRecord> = tensors.values().filter(|r| r.end > r.start).collect();
        spans.sort_by_key(|r| (r.start, r.end));
        for pair in spans.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(span_err(pair[1], format!("overlaps tensor '{}'", pair[0].name)));
            }
        }
        Ok(Self {
            tensors,
            data,
            metadata,
        })
    }

    /// Serialize to the container format. Entries are written in data-offset
    /// order after the metadata block, and the header is space-padded to a
    /// multiple of 8 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from("{");
        let mut first = true;
        let mut push = |key: &str, value: String| {
            if !first {
                header.push(',');
            }
            first = false;
            header.push_str(&serde_json::to_string(key).expect("string serializes"));
            header.push(':');
            header.push_str(&value);
        };
        if !self.metadata.is_empty() {
            push(
                METADATA_KEY,
                serde_json::to_string(&self.metadata).expect("metadata serializes"),
            );
        }
        let mut ordered: Vec<&TensorRecord> = self.tensors.values().collect();
        ordered.sort_by(|a, b| (a.start, a.end, &a.name).cmp(&(b.start, b.end, &b.name)));
        for rec in ordered {
            let entry = serde_json::json!({
                "dtype": rec.dtype.as_str(),
                "shape": rec.shape,
                "data_offsets": [rec.start, rec.end],
            });
            push(&rec.name, entry.to_string());
        }
        header.push('}');
        while header.len() % 8 != 0 {
            header.push(' ');
        }
        let mut out = Vec::with_capacity(8 + header.len() + self.data.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.data);
        out
    }
}

fn span_err(rec: &TensorRecord, reason: String) -> Error {
    Error::SpanOutOfBounds {
        name: rec.name.clone(),
        start: rec.start,
        end: rec.end,
        reason,
    }
}

/// Header object that keeps duplicate keys visible instead of collapsing them.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    entries.push((k, v));
                }
                Ok(RawHeader(entries))
            }
        }
        de.deserialize_map(V)
    }
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(obj) = value else {
        return Err(Error::MalformedHeader("__metadata__ must be an object".into()));
    };
    obj.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(Error::MalformedHeader(format!("metadata value for '{k}' is not a string"))),
        })
        .collect()
}

fn parse_entry(name: &str, value: Value) -> Result<TensorRecord> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Entry {
        dtype: String,
        shape: Vec<usize>,
        data_offsets: [usize; 2],
    }
    let entry: Entry = serde_json::from_value(value)
        .map_err(|e| Error::MalformedHeader(format!("tensor '{name}': {e}")))?;
    Ok(TensorRecord {
        name: name.to_string(),
        dtype: entry.dtype.parse()?,
        shape: entry.shape,
        start: entry.data_offsets[0],
        end: entry.data_offsets[1],
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Decode one element.
pub fn decode_value(dtype: Dtype, bytes: &[u8]) -> f64 {
    match dtype {
        Dtype::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")),
        Dtype::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64,
        Dtype::F16 => f16::from_bits(u16::from_le_bytes(bytes.try_into().expect("2 bytes"))).to_f64(),
        Dtype::BF16 => bf16::from_bits(u16::from_le_bytes(bytes.try_into().expect("2 bytes"))).to_f64(),
    }
}

/// Encode one element with round-to-nearest-even on downcast.
pub fn encode_value(dtype: Dtype, v: f64, out: &mut Vec<u8>) {
    match dtype {
        Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        Dtype::F16 => out.extend_from_slice(&f16::from_f64(v).to_bits().to_le_bytes()),
        Dtype::BF16 => out.extend_from_slice(&bf16::from_f64(v).to_bits().to_le_bytes()),
    }
}

/// Decode a 2-D tensor from `buffer` into a row-major `f64` matrix. Non-finite
/// entries are rejected.
pub fn to_matrix(rec: &TensorRecord, buffer: &[u8]) -> Result<Matrix> {
    let (rows, cols) = rec.matrix_shape().ok_or_else(|| Error::NotTwoDimensional {
        name: rec.name.clone(),
        shape: rec.shape.clone(),
    })?;
    let bytes = buffer
        .get(rec.start..rec.end)
        .ok_or_else(|| span_err(rec, format!("buffer holds {} bytes", buffer.len())))?;
    let w = rec.dtype.width();
    if bytes.len() != rows * cols * w {
        return Err(span_err(rec, "length does not match shape".into()));
    }
    let data: Vec<f64> = bytes.chunks_exact(w).map(|c| decode_value(rec.dtype, c)).collect();
    Matrix::from_vec(rows, cols, data).map_err(|e| e.with_layer(&rec.name))
}

/// Encode a matrix as a tensor record (spanning `[0, len)`) plus its bytes.
pub fn from_matrix(m: &Matrix, name: &str, dtype: Dtype) -> (TensorRecord, Vec<u8>) {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * dtype.width());
    for &v in m.as_slice() {
        encode_value(dtype, v, &mut bytes);
    }
    let rec = TensorRecord {
        name: name.to_string(),
        dtype,
        shape: vec![m.rows(), m.cols()],
        start: 0,
        end: bytes.len(),
    };
    (rec, bytes)
}
