//! Tagged length-value payload encoding.

use super::ProtocolError;

/// Field count is a u16 on the wire.
pub const MAX_FIELDS: usize = u16::MAX as usize;

/// Payload builder. Tags may repeat to express lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Fields {
    entries: Vec<(u8, Vec<u8>)>,
}

impl Fields {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(mut self, tag: u8, v: impl Into<Vec<u8>>) -> Self {
        self.entries.push((tag, v.into()));
        self
    }

    pub fn push(&mut self, tag: u8, v: impl Into<Vec<u8>>) {
        self.entries.push((tag, v.into()));
    }

    pub fn str(self, tag: u8, v: &str) -> Self {
        self.bytes(tag, v.as_bytes())
    }

    pub fn u8(self, tag: u8, v: u8) -> Self {
        self.bytes(tag, [v])
    }

    pub fn u16(self, tag: u8, v: u16) -> Self {
        self.bytes(tag, v.to_be_bytes())
    }

    pub fn u32(self, tag: u8, v: u32) -> Self {
        self.bytes(tag, v.to_be_bytes())
    }

    pub fn u64(self, tag: u8, v: u64) -> Self {
        self.bytes(tag, v.to_be_bytes())
    }

    pub fn i64(self, tag: u8, v: i64) -> Self {
        self.bytes(tag, v.to_be_bytes())
    }

    pub fn nested(self, tag: u8, inner: &Fields) -> Self {
        self.bytes(tag, inner.encode())
    }

    pub fn encode(&self) -> Vec<u8> {
        let body: usize = self.entries.iter().map(|(_, v)| 5 + v.len()).sum();
        assert!(
            self.entries.len() <= MAX_FIELDS,
            "payload holds more than {MAX_FIELDS} fields"
        );
        let mut out = Vec::with_capacity(2 + body);
        out.extend_from_slice(&(self.entries.len() as u16).to_be_bytes());
        for (tag, v) in &self.entries {
            out.push(*tag);
            out.extend_from_slice(&(v.len() as u32).to_be_bytes());
            out.extend_from_slice(v);
        }
        out
    }

    pub fn entries(&self) -> &[(u8, Vec<u8>)] {
        &self.entries
    }
}

/// Parsed view of a payload. Lookups ignore tags the caller does not ask
/// for, which is how unknown fields get skipped.
#[derive(Debug, Clone)]
pub struct FieldReader<'a> {
    entries: Vec<(u8, &'a [u8])>,
}

fn malformed(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed(msg.into())
}

impl<'a> FieldReader<'a> {
    pub fn parse(buf: &'a [u8]) -> Result<Self, ProtocolError> {
        if buf.len() < 2 {
            return Err(malformed("payload shorter than field count"));
        }
        let count = u16::from_be_bytes([buf[0], buf[1]]) as usize;
        let mut rest = &buf[2..];
        let mut entries = Vec::with_capacity(count.min(rest.len() / 5));
        for i in 0..count {
            if rest.len() < 5 {
                return Err(malformed(format!("field {i} header truncated")));
            }
            let tag = rest[0];
            let len = u32::from_be_bytes([rest[1], rest[2], rest[3], rest[4]]) as usize;
            rest = &rest[5..];
            if len > rest.len() {
                return Err(malformed(format!("field {i} (tag {tag}) truncated")));
            }
            entries.push((tag, &rest[..len]));
            rest = &rest[len..];
        }
        if !rest.is_empty() {
            return Err(malformed(format!("{} trailing bytes", rest.len())));
        }
        Ok(FieldReader { entries })
    }

    pub fn get(&self, tag: u8) -> Option<&'a [u8]> {
        self.entries.iter().find(|(t, _)| *t == tag).map(|(_, v)| *v)
    }

    pub fn all(&self, tag: u8) -> impl Iterator<Item = &'a [u8]> + '_ {
        self.entries.iter().filter(move |(t, _)| *t == tag).map(|(_, v)| *v)
    }

    pub fn has(&self, tag: u8) -> bool {
        self.get(tag).is_some()
    }

    pub fn req(&self, tag: u8) -> Result<&'a [u8], ProtocolError> {
        self.get(tag).ok_or_else(|| malformed(format!("missing field {tag}")))
    }

    pub fn str(&self, tag: u8) -> Result<&'a str, ProtocolError> {
        std::str::from_utf8(self.req(tag)?).map_err(|_| malformed(format!("field {tag} not UTF-8")))
    }

    pub fn opt_str(&self, tag: u8) -> Result<Option<&'a str>, ProtocolError> {
        self.get(tag)
            .map(|b| std::str::from_utf8(b).map_err(|_| malformed(format!("field {tag} not UTF-8"))))
            .transpose()
    }

    fn fixed<const N: usize>(&self, tag: u8) -> Result<Option<[u8; N]>, ProtocolError> {
        match self.get(tag) {
            None => Ok(None),
            Some(b) => b
                .try_into()
                .map(Some)
                .map_err(|_| malformed(format!("field {tag}: expected {N} bytes, got {}", b.len()))),
        }
    }

    pub fn opt_u8(&self, tag: u8) -> Result<Option<u8>, ProtocolError> {
        Ok(self.fixed::<1>(tag)?.map(|b| b[0]))
    }

    pub fn opt_u16(&self, tag: u8) -> Result<Option<u16>, ProtocolError> {
        Ok(self.fixed(tag)?.map(u16::from_be_bytes))
    }

    pub fn opt_u32(&self, tag: u8) -> Result<Option<u32>, ProtocolError> {
        Ok(self.fixed(tag)?.map(u32::from_be_bytes))
    }

    pub fn opt_u64(&self, tag: u8) -> Result<Option<u64>, ProtocolError> {
        Ok(self.fixed(tag)?.map(u64::from_be_bytes))
    }

    pub fn u8(&self, tag: u8) -> Result<u8, ProtocolError> {
        self.opt_u8(tag)?
            .ok_or_else(|| malformed(format!("missing field {tag}")))
    }

    pub fn u16(&self, tag: u8) -> Result<u16, ProtocolError> {
        self.opt_u16(tag)?
            .ok_or_else(|| malformed(format!("missing field {tag}")))
    }

    pub fn u32(&self, tag: u8) -> Result<u32, ProtocolError> {
        self.opt_u32(tag)?
            .ok_or_else(|| malformed(format!("missing field {tag}")))
    }

    pub fn u64(&self, tag: u8) -> Result<u64, ProtocolError> {
        self.opt_u64(tag)?
            .ok_or_else(|| malformed(format!("missing field {tag}")))
    }

    pub fn i64(&self, tag: u8) -> Result<i64, ProtocolError> {
        self.fixed(tag)?
            .map(i64::from_be_bytes)
            .ok_or_else(|| malformed(format!("missing field {tag}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unknown_tags_are_skipped() {
        let payload = Fields::new()
            .str(1, "alice")
            .bytes(200, vec![1, 2, 3])
            .u32(2, 42)
            .encode();
        let r = FieldReader::parse(&payload).unwrap();
        assert_eq!(r.str(1).unwrap(), "alice");
        assert_eq!(r.u32(2).unwrap(), 42);
        assert!(r.opt_str(3).unwrap().is_none());
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let payload = Fields::new().str(1, "abcdef").encode();
        for cut in 0..payload.len() {
            assert!(FieldReader::parse(&payload[..cut]).is_err(), "cut {cut}");
        }
    }

    proptest! {
        #[test]
        fn field_round_trip(fields in proptest::collection::vec((any::<u8>(), proptest::collection::vec(any::<u8>(), 0..64)), 0..20)) {
            let mut f = Fields::new();
            for (t, v) in &fields {
                f.push(*t, v.clone());
            }
            let enc = f.encode();
            let r = FieldReader::parse(&enc).unwrap();
            let back: Vec<(u8, Vec<u8>)> = r.entries.iter().map(|(t, v)| (*t, v.to_vec())).collect();
            prop_assert_eq!(back, fields);
        }
    }
}
