use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::path::WorkspacePath;
use crate::protocol::{
    decode_error, decode_frame, decode_record, decode_report, decode_template, encode_frame, read_list, result_tag,
    FieldReader, IndexHook, MessageType, Request,
};
use crate::query::Predicate;
use crate::record::{FileRecord, NamespaceTemplate};
use crate::sdf::AttributeValue;
use crate::sds::IndexReport;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_CALL_TIMEOUT: Duration = Duration::from_secs(600);

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Blocking client for one shard service. Connects lazily and reconnects
/// after a transport failure; calls on one client are serialized.
pub struct ShardClient {
    addr: SocketAddr,
    conn: Mutex<Option<Conn>>,
    next_id: AtomicU32,
    timeout: Duration,
    sent: [AtomicU64; 11],
}

impl std::fmt::Debug for ShardClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardClient").field("addr", &self.addr).finish()
    }
}

impl ShardClient {
    pub fn new(addr: SocketAddr) -> Self {
        Self::with_timeout(addr, DEFAULT_CALL_TIMEOUT)
    }

    pub fn with_timeout(addr: SocketAddr, timeout: Duration) -> Self {
        ShardClient {
            addr,
            conn: Mutex::new(None),
            next_id: AtomicU32::new(1),
            timeout,
            sent: Default::default(),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Request frames of one type sent by this client.
    pub fn sent(&self, ty: MessageType) -> u64 {
        self.sent[ty as usize].load(Ordering::SeqCst)
    }

    fn unavailable(&self, e: impl std::fmt::Display) -> Error {
        Error::ShardUnavailable(format!("{}: {e}", self.addr))
    }

    fn connect(&self) -> Result<Conn> {
        let s = TcpStream::connect_timeout(&self.addr, CONNECT_TIMEOUT).map_err(|e| self.unavailable(e))?;
        let _ = s.set_nodelay(true);
        s.set_read_timeout(Some(self.timeout))
            .map_err(|e| self.unavailable(e))?;
        let r = s.try_clone().map_err(|e| self.unavailable(e))?;
        Ok(Conn {
            reader: BufReader::with_capacity(64 * 1024, r),
            writer: s,
        })
    }

    /// Sends one request and returns the RESULT payload. A failure on a
    /// reused connection (the peer may have restarted) is retried once on a
    /// fresh one.
    pub fn call(&self, req: &Request) -> Result<Vec<u8>> {
        let ty = req.msg_type();
        let payload = req.encode().encode();
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let f = loop {
            let reused = guard.is_some();
            if guard.is_none() {
                *guard = Some(self.connect()?);
            }
            let conn = guard.as_mut().unwrap();
            let id = self.next_id.fetch_add(1, Ordering::Relaxed);
            let frame = encode_frame(ty as u16, id, &payload)?;
            let res = (|| {
                conn.writer.write_all(&frame)?;
                self.sent[ty as usize].fetch_add(1, Ordering::SeqCst);
                loop {
                    let f = decode_frame(&mut conn.reader)?;
                    // Replies to abandoned earlier calls are discarded.
                    if f.request_id == id {
                        return Ok::<_, crate::protocol::ProtocolError>(f);
                    }
                }
            })();
            match res {
                Ok(f) => break f,
                Err(e) => {
                    *guard = None;
                    if !reused {
                        return Err(self.unavailable(e));
                    }
                    log::debug!("retrying on a fresh connection to {}: {e}", self.addr);
                }
            }
        };
        drop(guard);
        match MessageType::from_u16(f.msg_type) {
            Some(MessageType::Result) => Ok(f.payload),
            Some(MessageType::Error) => Err(decode_error(&f.payload)),
            _ => Err(Error::Remote {
                code: 0,
                message: format!("unexpected response type {}", f.msg_type),
            }),
        }
    }

    pub fn put_file(&self, requester: &str, record: FileRecord, index: IndexHook, exclusive: bool) -> Result<()> {
        self.call(&Request::PutFile {
            requester: requester.into(),
            record,
            index,
            exclusive,
        })?;
        Ok(())
    }

    pub fn get_file(&self, requester: &str, path: &WorkspacePath) -> Result<(FileRecord, NamespaceTemplate)> {
        let buf = self.call(&Request::GetFile {
            requester: requester.into(),
            path: path.clone(),
        })?;
        let r = FieldReader::parse(&buf)?;
        Ok((
            decode_record(r.req(result_tag::RECORDS)?)?,
            decode_template(r.req(result_tag::TEMPLATES)?)?,
        ))
    }

    pub fn list_visible(&self, requester: &str, prefix: Option<&WorkspacePath>) -> Result<Vec<FileRecord>> {
        let buf = self.call(&Request::ListVisible {
            requester: requester.into(),
            prefix: prefix.cloned(),
            namespaces: false,
        })?;
        let r = FieldReader::parse(&buf)?;
        Ok(read_list(&r, result_tag::RECORDS)?
            .into_iter()
            .map(decode_record)
            .collect::<Result<_, _>>()?)
    }

    pub fn list_namespaces(&self, requester: &str) -> Result<Vec<NamespaceTemplate>> {
        let buf = self.call(&Request::ListVisible {
            requester: requester.into(),
            prefix: None,
            namespaces: true,
        })?;
        let r = FieldReader::parse(&buf)?;
        Ok(r.all(result_tag::TEMPLATES)
            .map(decode_template)
            .collect::<Result<_, _>>()?)
    }

    pub fn batch_export(&self, requester: &str, dtn_index: usize, records: Vec<FileRecord>) -> Result<u64> {
        let buf = self.call(&Request::BatchExport {
            requester: requester.into(),
            dtn_index,
            records,
        })?;
        Ok(FieldReader::parse(&buf)?.u64(result_tag::COUNT)?)
    }

    /// Enqueues paths for asynchronous indexing; returns the queue length.
    pub fn enqueue(&self, requester: &str, paths: Vec<WorkspacePath>) -> Result<u64> {
        let buf = self.call(&Request::EnqueueIndex {
            requester: requester.into(),
            paths,
            offline_selector: None,
            flush: false,
        })?;
        Ok(FieldReader::parse(&buf)?.u64(result_tag::COUNT)?)
    }

    /// Drains the index queue completely; returns files indexed.
    pub fn flush(&self, requester: &str) -> Result<u64> {
        let buf = self.call(&Request::EnqueueIndex {
            requester: requester.into(),
            paths: Vec::new(),
            offline_selector: None,
            flush: true,
        })?;
        Ok(FieldReader::parse(&buf)?.u64(result_tag::COUNT)?)
    }

    /// Indexes every extractable file under `selector` (a backend-relative
    /// directory) that this shard owns.
    pub fn index_offline(&self, requester: &str, selector: &str) -> Result<IndexReport> {
        let buf = self.call(&Request::EnqueueIndex {
            requester: requester.into(),
            paths: Vec::new(),
            offline_selector: Some(selector.into()),
            flush: false,
        })?;
        Ok(decode_report(FieldReader::parse(&buf)?.req(result_tag::REPORT)?)?)
    }

    pub fn query(&self, requester: &str, predicate: &Predicate) -> Result<Vec<String>> {
        let buf = self.call(&Request::Query {
            requester: requester.into(),
            predicate: predicate.clone(),
        })?;
        let r = FieldReader::parse(&buf)?;
        read_list(&r, result_tag::PATHS)?
            .into_iter()
            .map(|b| String::from_utf8(b.to_vec()).map_err(|_| Error::BadRequest("query result path not UTF-8".into())))
            .collect()
    }

    pub fn tag(&self, requester: &str, path: &WorkspacePath, name: &str, value: AttributeValue) -> Result<()> {
        self.call(&Request::Tag {
            requester: requester.into(),
            path: path.clone(),
            name: name.into(),
            value,
        })?;
        Ok(())
    }

    pub fn register_namespace(&self, requester: &str, template: NamespaceTemplate) -> Result<()> {
        self.call(&Request::RegisterNs {
            requester: requester.into(),
            template,
        })?;
        Ok(())
    }
}
