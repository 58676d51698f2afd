//! Self-describing scientific data file container (`.sdf`).
//!
//! A typed attribute header followed by an opaque payload. All multi-byte
//! integers are big-endian:
//!
//! ```text
//! "SSDF" | version u16 | attr_count u16
//! per attribute: name_len u16 | name | tag u8 | value
//!     INT   (1): i64, two's complement
//!     FLOAT (2): f64, IEEE-754 bits
//!     TEXT  (3): len u16 | UTF-8 bytes
//! payload_len u64 | payload
//! ```
//!
//! Attributes can be read without interpreting the payload, which is all the
//! discovery service needs.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};

pub const MAGIC: &[u8; 4] = b"SSDF";
pub const VERSION: u16 = 1;
pub const SUFFIX: &str = ".sdf";

const TAG_INT: u8 = 1;
const TAG_FLOAT: u8 = 2;
const TAG_TEXT: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SdfError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed utf-8 in {0}")]
    MalformedUtf8(&'static str),
    #[error("unknown value tag {0}")]
    BadTag(u8),
    #[error("duplicate attribute name {0:?}")]
    DuplicateName(String),
    #[error("too many attributes ({0})")]
    TooManyAttributes(usize),
    #[error("attribute name too long ({0} bytes)")]
    NameTooLong(usize),
    #[error("text value too long ({0} bytes)")]
    TextTooLong(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ValueType {
    Int,
    Float,
    Text,
}

impl ValueType {
    pub fn tag(self) -> u8 {
        match self {
            ValueType::Int => TAG_INT,
            ValueType::Float => TAG_FLOAT,
            ValueType::Text => TAG_TEXT,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueType::Int => "int",
            ValueType::Float => "float",
            ValueType::Text => "text",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "int" => Some(ValueType::Int),
            "float" => Some(ValueType::Float),
            "text" => Some(ValueType::Text),
            _ => None,
        }
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A typed attribute value.
///
/// Equality, hashing and ordering treat floats by bit pattern so values can
/// live in sets; numeric comparison for queries lives in the query module.
#[derive(Debug, Clone)]
pub enum AttributeValue {
    Int(i64),
    Float(f64),
    Text(String),
}

impl AttributeValue {
    pub fn value_type(&self) -> ValueType {
        match self {
            AttributeValue::Int(_) => ValueType::Int,
            AttributeValue::Float(_) => ValueType::Float,
            AttributeValue::Text(_) => ValueType::Text,
        }
    }

    fn rank(&self) -> u8 {
        self.value_type().tag()
    }

    /// Appends tag + value in the SDF value layout.
    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), SdfError> {
        match self {
            AttributeValue::Int(v) => {
                out.push(TAG_INT);
                out.extend_from_slice(&v.to_be_bytes());
            }
            AttributeValue::Float(v) => {
                out.push(TAG_FLOAT);
                out.extend_from_slice(&v.to_bits().to_be_bytes());
            }
            AttributeValue::Text(s) => {
                let len = u16::try_from(s.len()).map_err(|_| SdfError::TextTooLong(s.len()))?;
                out.push(TAG_TEXT);
                out.extend_from_slice(&len.to_be_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
        Ok(())
    }

    /// Parses a value previously written by [`AttributeValue::encode_into`],
    /// requiring the input to be consumed exactly.
    pub fn decode_exact(bytes: &[u8]) -> Result<Self, SdfError> {
        let mut r = Reader::new(bytes);
        let v = r.value()?;
        if !r.rest().is_empty() {
            return Err(SdfError::TrailingBytes(r.rest().len()));
        }
        Ok(v)
    }
}

impl PartialEq for AttributeValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for AttributeValue {}

impl Hash for AttributeValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            AttributeValue::Int(v) => (TAG_INT, *v).hash(state),
            AttributeValue::Float(v) => (TAG_FLOAT, v.to_bits()).hash(state),
            AttributeValue::Text(s) => (TAG_TEXT, s).hash(state),
        }
    }
}

impl PartialOrd for AttributeValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AttributeValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (AttributeValue::Int(a), AttributeValue::Int(b)) => a.cmp(b),
            (AttributeValue::Float(a), AttributeValue::Float(b)) => a.total_cmp(b),
            (AttributeValue::Text(a), AttributeValue::Text(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Int(v) => write!(f, "{v}"),
            AttributeValue::Float(v) => write!(f, "{v:?}"),
            AttributeValue::Text(s) => write!(f, "{s:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SdfDocument {
    pub attributes: Vec<(String, AttributeValue)>,
    pub payload: Vec<u8>,
}

impl SdfDocument {
    pub fn get(&self, name: &str) -> Option<&AttributeValue> {
        self.attributes.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

/// Borrowing decode result; the payload is not copied.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfView<'a> {
    pub attributes: Vec<(String, AttributeValue)>,
    pub payload: &'a [u8],
}

pub fn encode(doc: &SdfDocument) -> Result<Vec<u8>, SdfError> {
    let count = u16::try_from(doc.attributes.len()).map_err(|_| SdfError::TooManyAttributes(doc.attributes.len()))?;
    let mut seen = HashSet::with_capacity(doc.attributes.len());
    let mut out = Vec::with_capacity(16 + doc.payload.len() + doc.attributes.len() * 24);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_be_bytes());
    out.extend_from_slice(&count.to_be_bytes());
    for (name, value) in &doc.attributes {
        if !seen.insert(name.as_str()) {
            return Err(SdfError::DuplicateName(name.clone()));
        }
        let len = u16::try_from(name.len()).map_err(|_| SdfError::NameTooLong(name.len()))?;
        out.extend_from_slice(&len.to_be_bytes());
        out.extend_from_slice(name.as_bytes());
        value.encode_into(&mut out)?;
    }
    out.extend_from_slice(&(doc.payload.len() as u64).to_be_bytes());
    out.extend_from_slice(&doc.payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SdfDocument, SdfError> {
    let view = decode_view(bytes)?;
    Ok(SdfDocument {
        attributes: view.attributes,
        payload: view.payload.to_vec(),
    })
}

pub fn decode_view(bytes: &[u8]) -> Result<SdfView<'_>, SdfError> {
    let mut r = Reader::new(bytes);
    // A short prefix of the magic is a truncation, not a different format.
    let magic_len = bytes.len().min(4);
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(SdfError::BadMagic);
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(SdfError::UnsupportedVersion(version));
    }
    let count = r.u16()? as usize;
    let mut attributes = Vec::with_capacity(count.min(r.rest().len() / 4));
    let mut seen = HashSet::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| SdfError::MalformedUtf8("attribute name"))?
            .to_owned();
        let value = r.value()?;
        if !seen.insert(name.clone()) {
            return Err(SdfError::DuplicateName(name));
        }
        attributes.push((name, value));
    }
    let payload_len = r.u64()?;
    let payload_len = usize::try_from(payload_len).map_err(|_| SdfError::Truncated)?;
    let payload = r.take(payload_len)?;
    if !r.rest().is_empty() {
        return Err(SdfError::TrailingBytes(r.rest().len()));
    }
    Ok(SdfView { attributes, payload })
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf }
    }

    fn rest(&self) -> &'a [u8] {
        self.buf
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SdfError> {
        if n > self.buf.len() {
            return Err(SdfError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], SdfError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u16(&mut self) -> Result<u16, SdfError> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, SdfError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn value(&mut self) -> Result<AttributeValue, SdfError> {
        let tag = self.array::<1>()?[0];
        match tag {
            TAG_INT => Ok(AttributeValue::Int(i64::from_be_bytes(self.array()?))),
            TAG_FLOAT => Ok(AttributeValue::Float(f64::from_bits(u64::from_be_bytes(self.array()?)))),
            TAG_TEXT => {
                let len = self.u16()? as usize;
                let s = std::str::from_utf8(self.take(len)?).map_err(|_| SdfError::MalformedUtf8("text value"))?;
                Ok(AttributeValue::Text(s.to_owned()))
            }
            other => Err(SdfError::BadTag(other)),
        }
    }
}
