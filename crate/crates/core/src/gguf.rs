//! GGUF model-file parsing: header and metadata key/value store.
//!
//! Parses only the header and metadata section — tensor payloads are never
//! read. All declared lengths are validated against the bytes actually
//! remaining before any allocation, so corrupt or hostile files terminate
//! with an error instead of unbounded allocation.
//!
//! Wire layout (little-endian): magic `GGUF`, u32 version, u64 tensor
//! count, u64 kv count, then kv pairs. A string is a u64 length followed
//! by UTF-8 bytes; a kv pair is a string key, a u32 type code and a value;
//! an array is a u32 element-type code, a u64 count and the elements.

use std::io::{self, Read};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evidence::Digest;

pub const GGUF_MAGIC: [u8; 4] = *b"GGUF";

/// Keys longer than this are treated as corruption.
pub const MAX_KEY_LEN: u64 = 64 * 1024;

/// Maximum array nesting depth accepted.
const MAX_DEPTH: u32 = 4;

/// Key whose presence marks an embedded tokenizer vocabulary.
pub const TOKENIZER_VOCAB_KEY: &str = "tokenizer.ggml.tokens";

// =============================================================================
// Types
// =============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GgufHeader {
    pub magic: [u8; 4],
    pub version: u32,
    pub tensor_count: u64,
    pub kv_count: u64,
}

/// A typed metadata value. Type codes 0..=12 in this order.
#[derive(Debug, Clone, PartialEq)]
pub enum GgufValue {
    U8(u8),
    I8(i8),
    U16(u16),
    I16(i16),
    U32(u32),
    I32(i32),
    F32(f32),
    Bool(bool),
    String(String),
    Array(GgufArray),
    U64(u64),
    I64(i64),
    F64(f64),
}

/// Homogeneous array storage keeps memory proportional to the declared
/// element size rather than the enum size.
#[derive(Debug, Clone, PartialEq)]
pub enum GgufArray {
    U8(Vec<u8>),
    I8(Vec<i8>),
    U16(Vec<u16>),
    I16(Vec<i16>),
    U32(Vec<u32>),
    I32(Vec<i32>),
    F32(Vec<f32>),
    Bool(Vec<bool>),
    String(Vec<String>),
    Array(Vec<GgufArray>),
    U64(Vec<u64>),
    I64(Vec<i64>),
    F64(Vec<f64>),
}

impl GgufArray {
    pub fn len(&self) -> usize {
        match self {
            GgufArray::U8(v) => v.len(),
            GgufArray::I8(v) => v.len(),
            GgufArray::U16(v) => v.len(),
            GgufArray::I16(v) => v.len(),
            GgufArray::U32(v) => v.len(),
            GgufArray::I32(v) => v.len(),
            GgufArray::F32(v) => v.len(),
            GgufArray::Bool(v) => v.len(),
            GgufArray::String(v) => v.len(),
            GgufArray::Array(v) => v.len(),
            GgufArray::U64(v) => v.len(),
            GgufArray::I64(v) => v.len(),
            GgufArray::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl GgufValue {
    /// Numeric reading across integer widths; used for keys like
    /// `general.file_type` whose storage width varies between writers.
    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            GgufValue::U8(v) => Some(v.into()),
            GgufValue::U16(v) => Some(v.into()),
            GgufValue::U32(v) => Some(v.into()),
            GgufValue::U64(v) => Some(v),
            GgufValue::I8(v) if v >= 0 => Some(v as u64),
            GgufValue::I16(v) if v >= 0 => Some(v as u64),
            GgufValue::I32(v) if v >= 0 => Some(v as u64),
            GgufValue::I64(v) if v >= 0 => Some(v as u64),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            GgufValue::String(s) => Some(s),
            _ => None,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            GgufValue::U8(_) => "u8",
            GgufValue::I8(_) => "i8",
            GgufValue::U16(_) => "u16",
            GgufValue::I16(_) => "i16",
            GgufValue::U32(_) => "u32",
            GgufValue::I32(_) => "i32",
            GgufValue::F32(_) => "f32",
            GgufValue::Bool(_) => "bool",
            GgufValue::String(_) => "string",
            GgufValue::Array(_) => "array",
            GgufValue::U64(_) => "u64",
            GgufValue::I64(_) => "i64",
            GgufValue::F64(_) => "f64",
        }
    }
}

/// Parsed header plus the ordered metadata key/value store.
#[derive(Debug, Clone, PartialEq)]
pub struct GgufMetadata {
    pub header: GgufHeader,
    pub kvs: IndexMap<String, GgufValue>,
}

impl GgufMetadata {
    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.kvs.get(key).and_then(GgufValue::as_str)
    }

    pub fn get_u64(&self, key: &str) -> Option<u64> {
        self.kvs.get(key).and_then(GgufValue::as_u64)
    }
}

/// Identity summary of a model file. Absent keys stay absent — no defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub architecture: Option<String>,
    pub name: Option<String>,
    pub quantization: Option<String>,
    pub context_length: Option<u64>,
    pub embedding_length: Option<u64>,
    pub tokenizer_present: bool,
    pub file_digest: Digest,
}

// =============================================================================
// Errors
// =============================================================================

#[derive(Debug, Error)]
pub enum GgufError {
    #[error("not a GGUF file (bad magic)")]
    BadMagic,
    #[error("legacy GGUF version 1 is not supported")]
    LegacyVersion,
    #[error("unsupported GGUF version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("declared length {declared} exceeds {remaining} remaining bytes at offset {offset}")]
    LengthOverrun {
        declared: u64,
        remaining: u64,
        offset: u64,
    },
    #[error("kv key length {len} exceeds the {MAX_KEY_LEN}-byte corruption guard at offset {offset}")]
    KeyTooLong { len: u64, offset: u64 },
    #[error("unknown value-type code {code} at offset {offset}")]
    UnknownValueType { code: u32, offset: u64 },
    #[error("invalid UTF-8 in string at offset {offset}")]
    InvalidUtf8 { offset: u64 },
    #[error("invalid boolean byte {byte:#04x} at offset {offset}")]
    InvalidBool { byte: u8, offset: u64 },
    #[error("duplicate metadata key {key:?}")]
    DuplicateKey { key: String },
    #[error("array nesting exceeds depth {MAX_DEPTH} at offset {offset}")]
    TooDeep { offset: u64 },
    #[error("i/o error at offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
}

impl GgufError {
    /// Byte offset associated with the error, when one applies.
    pub fn offset(&self) -> Option<u64> {
        match *self {
            GgufError::Truncated { offset }
            | GgufError::LengthOverrun { offset, .. }
            | GgufError::KeyTooLong { offset, .. }
            | GgufError::UnknownValueType { offset, .. }
            | GgufError::InvalidUtf8 { offset }
            | GgufError::InvalidBool { offset, .. }
            | GgufError::TooDeep { offset }
            | GgufError::Io { offset, .. } => Some(offset),
            _ => None,
        }
    }
}

// =============================================================================
// Parsing
// =============================================================================

/// True iff the first four bytes are the GGUF magic.
pub fn is_gguf(prefix: &[u8]) -> bool {
    prefix.len() >= 4 && prefix[..4] == GGUF_MAGIC
}

struct BoundedReader<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
    limit: u64,
}

impl<'a, R: Read> BoundedReader<'a, R> {
    fn remaining(&self) -> u64 {
        self.limit.saturating_sub(self.offset)
    }

    fn need(&self, n: u64) -> Result<(), GgufError> {
        if n > self.remaining() {
            Err(GgufError::Truncated { offset: self.offset })
        } else {
            Ok(())
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), GgufError> {
        self.need(buf.len() as u64)?;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                Err(GgufError::Truncated { offset: self.offset })
            }
            Err(e) => Err(GgufError::Io {
                offset: self.offset,
                source: e,
            }),
        }
    }

    fn u8(&mut self) -> Result<u8, GgufError> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u16(&mut self) -> Result<u16, GgufError> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self) -> Result<u32, GgufError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64, GgufError> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self, max_len: Option<u64>) -> Result<String, GgufError> {
        let len_offset = self.offset;
        let len = self.u64()?;
        if let Some(max) = max_len {
            if len > max {
                return Err(GgufError::KeyTooLong {
                    len,
                    offset: len_offset,
                });
            }
        }
        if len > self.remaining() {
            return Err(GgufError::LengthOverrun {
                declared: len,
                remaining: self.remaining(),
                offset: self.offset,
            });
        }
        let mut bytes = vec![0u8; len as usize];
        let data_offset = self.offset;
        self.read_exact(&mut bytes)?;
        String::from_utf8(bytes).map_err(|_| GgufError::InvalidUtf8 {
            offset: data_offset,
        })
    }
}

/// Minimum encoded size of a value of the given type code; used to bound
/// array allocations before reading elements.
fn min_value_size(code: u32) -> u64 {
    match code {
        0 | 1 | 7 => 1,
        2 | 3 => 2,
        4 | 5 | 6 => 4,
        8 => 8,       // string: at least the length field
        9 => 12,      // array: element type + count
        10 | 11 | 12 => 8,
        _ => 1,
    }
}

fn parse_value<R: Read>(
    r: &mut BoundedReader<'_, R>,
    code: u32,
    depth: u32,
) -> Result<GgufValue, GgufError> {
    Ok(match code {
        0 => GgufValue::U8(r.u8()?),
        1 => GgufValue::I8(r.u8()? as i8),
        2 => GgufValue::U16(r.u16()?),
        3 => GgufValue::I16(r.u16()? as i16),
        4 => GgufValue::U32(r.u32()?),
        5 => GgufValue::I32(r.u32()? as i32),
        6 => GgufValue::F32(f32::from_le_bytes(r.u32()?.to_le_bytes())),
        7 => {
            let offset = r.offset;
            match r.u8()? {
                0 => GgufValue::Bool(false),
                1 => GgufValue::Bool(true),
                byte => return Err(GgufError::InvalidBool { byte, offset }),
            }
        }
        8 => GgufValue::String(r.string(None)?),
        9 => GgufValue::Array(parse_array(r, depth + 1)?),
        10 => GgufValue::U64(r.u64()?),
        11 => GgufValue::I64(r.u64()? as i64),
        12 => GgufValue::F64(f64::from_le_bytes(r.u64()?.to_le_bytes())),
        code => {
            return Err(GgufError::UnknownValueType {
                code,
                offset: r.offset.saturating_sub(4),
            })
        }
    })
}

fn parse_array<R: Read>(
    r: &mut BoundedReader<'_, R>,
    depth: u32,
) -> Result<GgufArray, GgufError> {
    if depth > MAX_DEPTH {
        return Err(GgufError::TooDeep { offset: r.offset });
    }
    let elem_code_offset = r.offset;
    let elem_code = r.u32()?;
    let count = r.u64()?;
    let needed = count.saturating_mul(min_value_size(elem_code));
    if needed > r.remaining() {
        return Err(GgufError::LengthOverrun {
            declared: needed,
            remaining: r.remaining(),
            offset: r.offset,
        });
    }
    let n = count as usize;
    macro_rules! fill {
        ($variant:ident, $read:expr) => {{
            let mut v = Vec::with_capacity(n);
            for _ in 0..count {
                v.push($read);
            }
            GgufArray::$variant(v)
        }};
    }
    Ok(match elem_code {
        0 => fill!(U8, r.u8()?),
        1 => fill!(I8, r.u8()? as i8),
        2 => fill!(U16, r.u16()?),
        3 => fill!(I16, r.u16()? as i16),
        4 => fill!(U32, r.u32()?),
        5 => fill!(I32, r.u32()? as i32),
        6 => fill!(F32, f32::from_le_bytes(r.u32()?.to_le_bytes())),
        7 => {
            let mut v = Vec::with_capacity(n);
            for _ in 0..count {
                let offset = r.offset;
                match r.u8()? {
                    0 => v.push(false),
                    1 => v.push(true),
                    byte => return Err(GgufError::InvalidBool { byte, offset }),
                }
            }
            GgufArray::Bool(v)
        }
        8 => {
            let mut v = Vec::with_capacity(n.min(4096));
            for _ in 0..count {
                v.push(r.string(None)?);
            }
            GgufArray::String(v)
        }
        9 => {
            let mut v = Vec::with_capacity(n.min(4096));
            for _ in 0..count {
                v.push(parse_array(r, depth + 1)?);
            }
            GgufArray::Array(v)
        }
        10 => fill!(U64, r.u64()?),
        11 => fill!(I64, r.u64()? as i64),
        12 => fill!(F64, f64::from_le_bytes(r.u64()?.to_le_bytes())),
        code => {
            return Err(GgufError::UnknownValueType {
                code,
                offset: elem_code_offset,
            })
        }
    })
}

/// Parses header and metadata from a stream bounded by `limit` available
/// bytes. Returns the metadata and the number of bytes consumed; the
/// reader is left positioned exactly at the end of the metadata section,
/// with tensor data untouched.
pub fn parse_metadata_stream<R: Read>(
    reader: &mut R,
    limit: u64,
) -> Result<(GgufMetadata, u64), GgufError> {
    let mut r = BoundedReader {
        inner: reader,
        offset: 0,
        limit,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != GGUF_MAGIC {
        return Err(GgufError::BadMagic);
    }
    let version = r.u32()?;
    match version {
        2 | 3 => {}
        1 => return Err(GgufError::LegacyVersion),
        v => return Err(GgufError::UnsupportedVersion(v)),
    }
    let tensor_count = r.u64()?;
    let kv_count = r.u64()?;
    let header = GgufHeader {
        magic,
        version,
        tensor_count,
        kv_count,
    };

    // Each kv needs at least a key length, a type code and one value byte.
    let floor = kv_count.saturating_mul(8 + 4 + 1);
    if floor > r.remaining() {
        return Err(GgufError::LengthOverrun {
            declared: floor,
            remaining: r.remaining(),
            offset: r.offset,
        });
    }

    let mut kvs = IndexMap::with_capacity(kv_count.min(65_536) as usize);
    for _ in 0..kv_count {
        let key = r.string(Some(MAX_KEY_LEN))?;
        let code = r.u32()?;
        let value = parse_value(&mut r, code, 0)?;
        if kvs.insert(key.clone(), value).is_some() {
            return Err(GgufError::DuplicateKey { key });
        }
    }
    let consumed = r.offset;
    Ok((GgufMetadata { header, kvs }, consumed))
}

/// Parses header and metadata from an in-memory prefix of a GGUF file.
pub fn parse_metadata(data: &[u8]) -> Result<GgufMetadata, GgufError> {
    let mut cursor = data;
    parse_metadata_stream(&mut cursor, data.len() as u64).map(|(m, _)| m)
}

// =============================================================================
// Fingerprinting
// =============================================================================

/// `general.file_type` codes to quantization labels, as written by
/// llama.cpp-family exporters.
const FILE_TYPE_LABELS: &[&str] = &[
    "F32", "F16", "Q4_0", "Q4_1", "Q4_1_F16", "Q4_2", "Q4_3", "Q8_0", "Q5_0", "Q5_1", "Q2_K",
    "Q3_K_S", "Q3_K_M", "Q3_K_L", "Q4_K_S", "Q4_K_M", "Q5_K_S", "Q5_K_M", "Q6_K", "IQ2_XXS",
    "IQ2_XS", "Q2_K_S", "IQ3_XS", "IQ3_XXS", "IQ1_S", "IQ4_NL", "IQ3_S", "IQ3_M", "IQ2_S",
    "IQ2_M", "IQ4_XS", "IQ1_M", "BF16",
];

/// Renders a `general.file_type` code as a quantization label.
pub fn quantization_label(code: u64) -> String {
    FILE_TYPE_LABELS
        .get(code as usize)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("FTYPE_{code}"))
}

/// Builds a model fingerprint from parsed metadata. Absent keys yield
/// absent fields, never defaults.
pub fn fingerprint(m: &GgufMetadata, file_digest: Digest) -> ModelFingerprint {
    let architecture = m.get_str("general.architecture").map(str::to_string);
    let arch_scoped = |suffix: &str| {
        architecture
            .as_deref()
            .and_then(|arch| m.get_u64(&format!("{arch}.{suffix}")))
    };
    ModelFingerprint {
        name: m.get_str("general.name").map(str::to_string),
        quantization: m.get_u64("general.file_type").map(quantization_label),
        context_length: arch_scoped("context_length"),
        embedding_length: arch_scoped("embedding_length"),
        tokenizer_present: m.kvs.contains_key(TOKENIZER_VOCAB_KEY),
        architecture,
        file_digest,
    }
}

// =============================================================================
// JSON rendering for kv dumps
// =============================================================================

/// Renders a metadata value for report output. Byte arrays are hex-encoded;
/// arrays longer than `elide_over` are elided down to a head plus count.
pub fn value_to_json(value: &GgufValue, elide_over: usize) -> serde_json::Value {
    use serde_json::{json, Value};
    fn array_json(a: &GgufArray, elide_over: usize) -> Value {
        let count = a.len();
        let mut body = match a {
            GgufArray::U8(v) => {
                let shown = &v[..v.len().min(elide_over.max(1))];
                json!({ "elem": "u8", "hex": hex::encode(shown) })
            }
            GgufArray::I8(v) => json!({ "elem": "i8", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::U16(v) => json!({ "elem": "u16", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::I16(v) => json!({ "elem": "i16", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::U32(v) => json!({ "elem": "u32", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::I32(v) => json!({ "elem": "i32", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::F32(v) => json!({ "elem": "f32", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::Bool(v) => json!({ "elem": "bool", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::String(v) => json!({ "elem": "string", "values": head(v, elide_over, |x| json!(x)) }),
            GgufArray::Array(v) => json!({
                "elem": "array",
                "values": v.iter().take(elide_over).map(|x| array_json(x, elide_over)).collect::<Vec<_>>(),
            }),
            GgufArray::U64(v) => json!({ "elem": "u64", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::I64(v) => json!({ "elem": "i64", "values": head(v, elide_over, |&x| json!(x)) }),
            GgufArray::F64(v) => json!({ "elem": "f64", "values": head(v, elide_over, |&x| json!(x)) }),
        };
        let obj = body.as_object_mut().unwrap();
        obj.insert("count".into(), json!(count));
        if count > elide_over {
            obj.insert("elided".into(), json!(true));
        }
        body
    }
    fn head<T, F: Fn(&T) -> Value>(v: &[T], n: usize, f: F) -> Vec<Value> {
        v.iter().take(n).map(f).collect()
    }
    let _ = num_vec::<u8>; // shape helper retained for clarity of intent
    match value {
        GgufValue::U8(v) => json!(v),
        GgufValue::I8(v) => json!(v),
        GgufValue::U16(v) => json!(v),
        GgufValue::I16(v) => json!(v),
        GgufValue::U32(v) => json!(v),
        GgufValue::I32(v) => json!(v),
        GgufValue::F32(v) => json!(v),
        GgufValue::Bool(v) => json!(v),
        GgufValue::String(v) => json!(v),
        GgufValue::Array(a) => array_json(a, elide_over),
        GgufValue::U64(v) => json!(v),
        GgufValue::I64(v) => json!(v),
        GgufValue::F64(v) => json!(v),
    }
}
