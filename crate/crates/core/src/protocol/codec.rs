//! Message payload schemas. Tag numbers are mirrored in `PROTOCOL.md`.

use super::{ErrorCode, FieldReader, Fields, MessageType, ProtocolError};
use crate::error::Error;
use crate::path::WorkspacePath;
use crate::query::{Clause, Op, Predicate};
use crate::record::{EntryKind, FileRecord, NamespaceTemplate, Scope};
use crate::sdf::AttributeValue;
use crate::sds::{AttributeTriple, IndexReport, TripleSource};

fn malformed(m: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed(m.into())
}

fn path_field(r: &FieldReader<'_>, tag: u8) -> Result<WorkspacePath, ProtocolError> {
    WorkspacePath::parse(r.str(tag)?).map_err(|e| malformed(e.to_string()))
}

/// Items per list-chunk field.
const LIST_CHUNK: usize = 4096;

/// Packs items into repeated `tag` fields, each holding up to
/// `LIST_CHUNK` entries of `len u32 | bytes`. Keeps long lists under the
/// field-count limit.
pub fn push_list<I: AsRef<[u8]>>(f: &mut Fields, tag: u8, items: impl IntoIterator<Item = I>) {
    let mut chunk = Vec::new();
    let mut n = 0;
    for item in items {
        let item = item.as_ref();
        chunk.extend_from_slice(&(item.len() as u32).to_be_bytes());
        chunk.extend_from_slice(item);
        n += 1;
        if n == LIST_CHUNK {
            f.push(tag, std::mem::take(&mut chunk));
            n = 0;
        }
    }
    if n > 0 {
        f.push(tag, chunk);
    }
}

pub fn read_list<'a>(r: &FieldReader<'a>, tag: u8) -> Result<Vec<&'a [u8]>, ProtocolError> {
    let mut out = Vec::new();
    for mut chunk in r.all(tag) {
        while !chunk.is_empty() {
            if chunk.len() < 4 {
                return Err(malformed("list item header truncated"));
            }
            let len = u32::from_be_bytes(chunk[..4].try_into().unwrap()) as usize;
            let item = chunk.get(4..4 + len).ok_or_else(|| malformed("list item truncated"))?;
            out.push(item);
            chunk = &chunk[4 + len..];
        }
    }
    Ok(out)
}

pub fn encode_record(r: &FileRecord) -> Fields {
    Fields::new()
        .str(1, r.path.as_str())
        .u8(2, matches!(r.kind, EntryKind::Directory) as u8)
        .u64(3, r.size)
        .str(4, &r.owner)
        .i64(5, r.mtime)
        .u32(6, r.dtn_index as u32)
        .u8(7, r.synced as u8)
}

pub fn decode_record(buf: &[u8]) -> Result<FileRecord, ProtocolError> {
    let r = FieldReader::parse(buf)?;
    Ok(FileRecord {
        path: path_field(&r, 1)?,
        kind: match r.u8(2)? {
            0 => EntryKind::File,
            1 => EntryKind::Directory,
            k => return Err(malformed(format!("entry kind {k}"))),
        },
        size: r.u64(3)?,
        owner: r.str(4)?.to_owned(),
        mtime: r.i64(5)?,
        dtn_index: r.u32(6)? as usize,
        synced: r.u8(7)? != 0,
    })
}

pub fn encode_template(t: &NamespaceTemplate) -> Fields {
    Fields::new()
        .str(1, &t.name)
        .str(2, &t.owner)
        .u8(3, matches!(t.scope, Scope::Global) as u8)
}

pub fn decode_template(buf: &[u8]) -> Result<NamespaceTemplate, ProtocolError> {
    let r = FieldReader::parse(buf)?;
    let scope = match r.u8(3)? {
        0 => Scope::Local,
        1 => Scope::Global,
        s => return Err(malformed(format!("scope {s}"))),
    };
    NamespaceTemplate::new(r.str(1)?, r.str(2)?, scope).map_err(|e| malformed(e.to_string()))
}

pub fn encode_value(v: &AttributeValue) -> Vec<u8> {
    let mut out = Vec::new();
    v.encode_into(&mut out)
        .expect("text values are bounded before reaching the wire");
    out
}

pub fn decode_value(buf: &[u8]) -> Result<AttributeValue, ProtocolError> {
    AttributeValue::decode_exact(buf).map_err(|e| malformed(format!("value: {e}")))
}

pub fn encode_triple(t: &AttributeTriple) -> Fields {
    Fields::new()
        .str(1, &t.attribute)
        .str(2, &t.file)
        .bytes(3, encode_value(&t.value))
        .u8(4, matches!(t.source, TripleSource::Manual) as u8)
}

pub fn decode_triple(buf: &[u8]) -> Result<AttributeTriple, ProtocolError> {
    let r = FieldReader::parse(buf)?;
    Ok(AttributeTriple {
        attribute: r.str(1)?.to_owned(),
        file: r.str(2)?.to_owned(),
        value: decode_value(r.req(3)?)?,
        source: if r.u8(4)? == 1 {
            TripleSource::Manual
        } else {
            TripleSource::Extracted
        },
    })
}

pub fn encode_clause(c: &Clause) -> Fields {
    Fields::new()
        .str(1, &c.attribute)
        .u8(2, c.op.code())
        .bytes(3, encode_value(&c.literal))
}

pub fn decode_clause(buf: &[u8]) -> Result<Clause, ProtocolError> {
    let r = FieldReader::parse(buf)?;
    let op = Op::from_code(r.u8(2)?).ok_or_else(|| malformed("unknown operator"))?;
    Clause::new(r.str(1)?, op, decode_value(r.req(3)?)?).map_err(|e| malformed(e.to_string()))
}

pub fn encode_report(rep: &IndexReport) -> Fields {
    Fields::new()
        .u64(1, rep.files_seen)
        .u64(2, rep.files_indexed)
        .u64(3, rep.triples_written)
        .u64(4, rep.scan_ms.to_bits())
        .u64(5, rep.extract_ms.to_bits())
        .u64(6, rep.store_ms.to_bits())
}

pub fn decode_report(buf: &[u8]) -> Result<IndexReport, ProtocolError> {
    let r = FieldReader::parse(buf)?;
    Ok(IndexReport {
        files_seen: r.u64(1)?,
        files_indexed: r.u64(2)?,
        triples_written: r.u64(3)?,
        scan_ms: f64::from_bits(r.u64(4)?),
        extract_ms: f64::from_bits(r.u64(5)?),
        store_ms: f64::from_bits(r.u64(6)?),
    })
}

/// RESULT payload field tags.
pub mod result_tag {
    /// u64: records accepted, entries pending, or entries drained.
    pub const COUNT: u8 = 1;
    /// Record list chunks (see `push_list`), or one nested record.
    pub const RECORDS: u8 = 2;
    /// Path list chunks.
    pub const PATHS: u8 = 3;
    /// Namespace templates, one per field.
    pub const TEMPLATES: u8 = 4;
    /// Nested index report.
    pub const REPORT: u8 = 5;
}

/// What the shard should do about indexing when it accepts a PUT_FILE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexHook {
    None,
    /// Extract and store triples before acknowledging.
    Sync,
    /// Enqueue the path and acknowledge immediately.
    Async,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    PutFile {
        requester: String,
        record: FileRecord,
        index: IndexHook,
        exclusive: bool,
    },
    GetFile {
        requester: String,
        path: WorkspacePath,
    },
    ListVisible {
        requester: String,
        prefix: Option<WorkspacePath>,
        namespaces: bool,
    },
    BatchExport {
        requester: String,
        dtn_index: usize,
        records: Vec<FileRecord>,
    },
    EnqueueIndex {
        requester: String,
        paths: Vec<WorkspacePath>,
        offline_selector: Option<String>,
        flush: bool,
    },
    Query {
        requester: String,
        predicate: Predicate,
    },
    Tag {
        requester: String,
        path: WorkspacePath,
        name: String,
        value: AttributeValue,
    },
    RegisterNs {
        requester: String,
        template: NamespaceTemplate,
    },
}

impl Request {
    pub fn msg_type(&self) -> MessageType {
        match self {
            Request::PutFile { .. } => MessageType::PutFile,
            Request::GetFile { .. } => MessageType::GetFile,
            Request::ListVisible { .. } => MessageType::ListVisible,
            Request::BatchExport { .. } => MessageType::BatchExport,
            Request::EnqueueIndex { .. } => MessageType::EnqueueIndex,
            Request::Query { .. } => MessageType::Query,
            Request::Tag { .. } => MessageType::Tag,
            Request::RegisterNs { .. } => MessageType::RegisterNs,
        }
    }

    pub fn requester(&self) -> &str {
        match self {
            Request::PutFile { requester, .. }
            | Request::GetFile { requester, .. }
            | Request::ListVisible { requester, .. }
            | Request::BatchExport { requester, .. }
            | Request::EnqueueIndex { requester, .. }
            | Request::Query { requester, .. }
            | Request::Tag { requester, .. }
            | Request::RegisterNs { requester, .. } => requester,
        }
    }

    pub fn encode(&self) -> Fields {
        let f = Fields::new().str(1, self.requester());
        match self {
            Request::PutFile {
                record,
                index,
                exclusive,
                ..
            } => f
                .nested(2, &encode_record(record))
                .u8(
                    3,
                    match index {
                        IndexHook::None => 0,
                        IndexHook::Sync => 1,
                        IndexHook::Async => 2,
                    },
                )
                .u8(4, *exclusive as u8),
            Request::GetFile { path, .. } => f.str(2, path.as_str()),
            Request::ListVisible { prefix, namespaces, .. } => {
                let f = match prefix {
                    Some(p) => f.str(2, p.as_str()),
                    None => f,
                };
                f.u8(3, *namespaces as u8)
            }
            Request::BatchExport { dtn_index, records, .. } => {
                let mut f = f.u32(3, *dtn_index as u32);
                push_list(&mut f, 2, records.iter().map(|r| encode_record(r).encode()));
                f
            }
            Request::EnqueueIndex {
                paths,
                offline_selector,
                flush,
                ..
            } => {
                let mut f = f;
                for p in paths {
                    f.push(2, p.as_str().as_bytes());
                }
                if let Some(sel) = offline_selector {
                    f.push(3, sel.as_bytes());
                }
                f.u8(4, *flush as u8)
            }
            Request::Query { predicate, .. } => {
                let mut f = f;
                for c in predicate.clauses() {
                    f.push(2, encode_clause(c).encode());
                }
                f
            }
            Request::Tag { path, name, value, .. } => {
                f.str(2, path.as_str()).str(3, name).bytes(4, encode_value(value))
            }
            Request::RegisterNs { template, .. } => f.nested(2, &encode_template(template)),
        }
    }

    pub fn decode(msg_type: u16, payload: &[u8]) -> Result<Request, ProtocolError> {
        let ty = MessageType::from_u16(msg_type).ok_or(ProtocolError::UnknownMessageType(msg_type))?;
        let r = FieldReader::parse(payload)?;
        let requester = r.str(1)?.to_owned();
        Ok(match ty {
            MessageType::PutFile => Request::PutFile {
                requester,
                record: decode_record(r.req(2)?)?,
                index: match r.opt_u8(3)?.unwrap_or(0) {
                    0 => IndexHook::None,
                    1 => IndexHook::Sync,
                    2 => IndexHook::Async,
                    m => return Err(malformed(format!("index hook {m}"))),
                },
                exclusive: r.opt_u8(4)?.unwrap_or(0) != 0,
            },
            MessageType::GetFile => Request::GetFile {
                requester,
                path: path_field(&r, 2)?,
            },
            MessageType::ListVisible => Request::ListVisible {
                requester,
                prefix: if r.has(2) { Some(path_field(&r, 2)?) } else { None },
                namespaces: r.opt_u8(3)?.unwrap_or(0) != 0,
            },
            MessageType::BatchExport => Request::BatchExport {
                requester,
                dtn_index: r.u32(3)? as usize,
                records: read_list(&r, 2)?
                    .into_iter()
                    .map(decode_record)
                    .collect::<Result<_, _>>()?,
            },
            MessageType::EnqueueIndex => Request::EnqueueIndex {
                requester,
                paths: r
                    .all(2)
                    .map(|b| {
                        std::str::from_utf8(b)
                            .map_err(|_| malformed("path not UTF-8"))
                            .and_then(|s| WorkspacePath::parse(s).map_err(|e| malformed(e.to_string())))
                    })
                    .collect::<Result<_, _>>()?,
                offline_selector: r.opt_str(3)?.map(str::to_owned),
                flush: r.opt_u8(4)?.unwrap_or(0) != 0,
            },
            MessageType::Query => Request::Query {
                requester,
                predicate: Predicate::new(r.all(2).map(decode_clause).collect::<Result<_, _>>()?)
                    .map_err(|e| malformed(e.to_string()))?,
            },
            MessageType::Tag => Request::Tag {
                requester,
                path: path_field(&r, 2)?,
                name: r.str(3)?.to_owned(),
                value: decode_value(r.req(4)?)?,
            },
            MessageType::RegisterNs => Request::RegisterNs {
                requester,
                template: decode_template(r.req(2)?)?,
            },
            MessageType::Result | MessageType::Error => return Err(malformed("response type sent as request")),
        })
    }
}

/// ERROR payload for a service-side failure.
pub fn encode_error(err: &Error) -> Fields {
    let (code, kind) = match err {
        Error::NotFound(_) => (ErrorCode::NotFound, "not_found"),
        Error::UnknownNamespace(_) => (ErrorCode::NotFound, "unknown_namespace"),
        Error::WrongShard { .. } => (ErrorCode::BadRequest, "wrong_shard"),
        Error::MalformedPath(_) => (ErrorCode::BadRequest, "malformed_path"),
        Error::BadName(_) => (ErrorCode::BadRequest, "bad_name"),
        Error::BadRequest(_) | Error::Protocol(_) | Error::Query(_) => (ErrorCode::BadRequest, "bad_request"),
        Error::Conflict(_) => (ErrorCode::Conflict, "conflict"),
        Error::Exists(_) => (ErrorCode::Conflict, "exists"),
        Error::QueueFull => (ErrorCode::Internal, "queue_full"),
        Error::LockHeld(_) => (ErrorCode::Conflict, "lock_held"),
        _ => (ErrorCode::Internal, "internal"),
    };
    let message = match err {
        Error::NotFound(m)
        | Error::UnknownNamespace(m)
        | Error::MalformedPath(m)
        | Error::BadName(m)
        | Error::BadRequest(m)
        | Error::Conflict(m)
        | Error::Exists(m)
        | Error::LockHeld(m) => m.clone(),
        Error::WrongShard { path, .. } => path.clone(),
        other => other.to_string(),
    };
    let f = Fields::new().u16(1, code as u16).str(2, &message).str(3, kind);
    match err {
        Error::WrongShard { expected, actual, .. } => f.u32(4, *expected as u32).u32(5, *actual as u32),
        _ => f,
    }
}

pub fn unsupported_error(msg: &str) -> Fields {
    Fields::new()
        .u16(1, ErrorCode::Unsupported as u16)
        .str(2, msg)
        .str(3, "unsupported")
}

/// Rebuilds a typed error from an ERROR payload.
pub fn decode_error(payload: &[u8]) -> Error {
    let r = match FieldReader::parse(payload) {
        Ok(r) => r,
        Err(e) => return Error::Protocol(e),
    };
    let code = r.opt_u16(1).ok().flatten().unwrap_or(ErrorCode::Internal as u16);
    let message = r.opt_str(2).ok().flatten().unwrap_or("").to_owned();
    let kind = r.opt_str(3).ok().flatten().unwrap_or("");
    match kind {
        "not_found" => Error::NotFound(message),
        "unknown_namespace" => Error::UnknownNamespace(message),
        "wrong_shard" => Error::WrongShard {
            path: message,
            expected: r.opt_u32(4).ok().flatten().unwrap_or(0) as usize,
            actual: r.opt_u32(5).ok().flatten().unwrap_or(0) as usize,
        },
        "malformed_path" => Error::MalformedPath(message),
        "bad_name" => Error::BadName(message),
        "bad_request" => Error::BadRequest(message),
        "conflict" => Error::Conflict(message),
        "exists" => Error::Exists(message),
        "queue_full" => Error::QueueFull,
        "lock_held" => Error::LockHeld(message),
        _ => Error::Remote { code, message },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::parse_query;

    fn record() -> FileRecord {
        FileRecord {
            path: WorkspacePath::parse("/public/a/b.sdf").unwrap(),
            kind: EntryKind::File,
            size: 12,
            owner: "alice".into(),
            mtime: 1_700_000_000_123,
            dtn_index: 1,
            synced: true,
        }
    }

    #[test]
    fn requests_round_trip() {
        let reqs = vec![
            Request::PutFile {
                requester: "alice".into(),
                record: record(),
                index: IndexHook::Async,
                exclusive: true,
            },
            Request::GetFile {
                requester: "bob".into(),
                path: record().path,
            },
            Request::ListVisible {
                requester: "bob".into(),
                prefix: Some(WorkspacePath::parse("/public/a").unwrap()),
                namespaces: false,
            },
            Request::BatchExport {
                requester: "alice".into(),
                dtn_index: 1,
                records: vec![record(), record()],
            },
            Request::EnqueueIndex {
                requester: "alice".into(),
                paths: vec![record().path],
                offline_selector: Some("public/a".into()),
                flush: true,
            },
            Request::Query {
                requester: "bob".into(),
                predicate: parse_query(r#"a = 1 AND b like "x%" AND c < 2.5"#).unwrap(),
            },
            Request::Tag {
                requester: "alice".into(),
                path: record().path,
                name: "quality".into(),
                value: AttributeValue::Text("good".into()),
            },
            Request::RegisterNs {
                requester: "alice".into(),
                template: NamespaceTemplate::new("climate", "alice", Scope::Local).unwrap(),
            },
        ];
        for req in reqs {
            let payload = req.encode().encode();
            let back = Request::decode(req.msg_type() as u16, &payload).unwrap();
            assert_eq!(back, req);
        }
    }

    #[test]
    fn lists_span_chunks() {
        let items: Vec<Vec<u8>> = (0..LIST_CHUNK * 2 + 3).map(|i| i.to_string().into_bytes()).collect();
        let mut f = Fields::new();
        push_list(&mut f, 2, &items);
        assert_eq!(f.len(), 3);
        let buf = f.encode();
        let r = FieldReader::parse(&buf).unwrap();
        let back: Vec<Vec<u8>> = read_list(&r, 2).unwrap().into_iter().map(<[u8]>::to_vec).collect();
        assert_eq!(back, items);
        let mut empty = Fields::new();
        push_list(&mut empty, 2, Vec::<Vec<u8>>::new());
        assert!(empty.is_empty());
    }

    #[test]
    fn unknown_message_type() {
        let payload = Fields::new().str(1, "x").encode();
        assert!(matches!(
            Request::decode(77, &payload),
            Err(ProtocolError::UnknownMessageType(77))
        ));
    }

    #[test]
    fn errors_round_trip() {
        let errs = vec![
            Error::NotFound("/p/x".into()),
            Error::UnknownNamespace("x".into()),
            Error::WrongShard {
                path: "/p/x".into(),
                expected: 1,
                actual: 0,
            },
            Error::Conflict("climate".into()),
            Error::Exists("/p/d".into()),
            Error::QueueFull,
        ];
        for e in errs {
            let back = decode_error(&encode_error(&e).encode());
            assert_eq!(back.to_string(), e.to_string());
        }
        let r = FieldReader::parse(&encode_error(&Error::NotFound("x".into())).encode())
            .unwrap()
            .u16(1)
            .unwrap();
        assert_eq!(r, ErrorCode::NotFound as u16);
    }
}
