//! TCP service hosting one DTN's shards.
//!
//! Threads: one acceptor, one reader per connection, a fixed worker pool
//! that executes requests, and one index-drain worker. Responses go out in
//! completion order; a per-connection mutex keeps frames whole.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use super::store::{ShardDump, ShardStore, StoreOptions};
use crate::backend::{Backend, FlagMode};
use crate::error::{Error, IoContext, Result};
use crate::placement::place;
use crate::protocol::{
    decode_frame, encode_error, encode_frame, encode_record, encode_report, encode_template, push_list, result_tag,
    unsupported_error, Fields, Frame, IndexHook, MessageType, ProtocolError, Request,
};
use crate::record::EntryKind;
use crate::sds::{
    extract_attributes, extract_queued, index_offline, ExtractorRegistry, FileTriples, IndexQueue, IndexSink,
    QueueThresholds, SpecSet, StatContext,
};

#[derive(Debug, Clone)]
pub struct ShardConfig {
    pub dtn_index: usize,
    pub dtn_count: usize,
    pub backend_root: PathBuf,
    pub flag_mode: FlagMode,
    pub specs: SpecSet,
    pub thresholds: QueueThresholds,
    pub store: StoreOptions,
    pub workers: usize,
    /// Run the background drain worker. Without it the queue only drains
    /// on explicit flush.
    pub drain_worker: bool,
}

impl ShardConfig {
    pub fn new(dtn_index: usize, dtn_count: usize, backend_root: impl Into<PathBuf>) -> Self {
        ShardConfig {
            dtn_index,
            dtn_count,
            backend_root: backend_root.into(),
            flag_mode: FlagMode::MarkerTree,
            specs: SpecSet::default(),
            thresholds: QueueThresholds::default(),
            store: StoreOptions::default(),
            workers: 4,
            drain_worker: true,
        }
    }
}

struct Inner {
    dtn_index: usize,
    dtn_count: usize,
    store: Mutex<ShardStore>,
    queue: Mutex<IndexQueue>,
    queue_cv: Condvar,
    // Serializes draining with offline indexing and explicit flushes.
    maintenance: Mutex<()>,
    backend: Backend,
    registry: ExtractorRegistry,
    specs: SpecSet,
    shutdown: AtomicBool,
    received: [AtomicU64; 11],
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
    readers: Mutex<Vec<JoinHandle<()>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

/// Index sink that takes the store lock per batch, so queries keep flowing
/// during long indexing runs.
struct LockedSink<'a>(&'a Mutex<ShardStore>);

impl IndexSink for LockedSink<'_> {
    fn store_triples(&mut self, batch: Vec<FileTriples>) -> Result<()> {
        lock(self.0).store_triples(batch)
    }
}

struct Job {
    frame: Frame,
    writer: Arc<Mutex<TcpStream>>,
}

pub struct ShardServer {
    addr: SocketAddr,
    inner: Arc<Inner>,
    acceptor: Option<JoinHandle<()>>,
    workers: Vec<JoinHandle<()>>,
    drainer: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for ShardServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardServer")
            .field("addr", &self.addr)
            .field("dtn_index", &self.inner.dtn_index)
            .finish()
    }
}

impl ShardServer {
    /// Opens the store and starts serving on `bind` (port 0 picks a free
    /// port; see [`ShardServer::local_addr`]).
    pub fn start(cfg: ShardConfig, bind: SocketAddr) -> Result<Self> {
        let store = ShardStore::open(&cfg.backend_root, cfg.dtn_index, cfg.dtn_count, cfg.store)?;
        let listener = TcpListener::bind(bind).ctx(|| format!("bind {bind}"))?;
        let addr = listener.local_addr().ctx(|| "local addr".into())?;
        let inner = Arc::new(Inner {
            dtn_index: cfg.dtn_index,
            dtn_count: cfg.dtn_count,
            store: Mutex::new(store),
            queue: Mutex::new(IndexQueue::new(cfg.thresholds)),
            queue_cv: Condvar::new(),
            maintenance: Mutex::new(()),
            backend: Backend::new(&cfg.backend_root, cfg.flag_mode),
            registry: ExtractorRegistry::default(),
            specs: cfg.specs,
            shutdown: AtomicBool::new(false),
            received: Default::default(),
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
            readers: Mutex::new(Vec::new()),
        });
        let (tx, rx) = crossbeam_channel::unbounded::<Job>();
        let workers = (0..cfg.workers.max(1))
            .map(|i| {
                let inner = inner.clone();
                let rx = rx.clone();
                thread::Builder::new()
                    .name(format!("shard{}-worker{i}", cfg.dtn_index))
                    .spawn(move || worker_loop(&inner, rx))
                    .expect("spawn worker")
            })
            .collect();
        let acceptor = {
            let inner = inner.clone();
            thread::Builder::new()
                .name(format!("shard{}-accept", cfg.dtn_index))
                .spawn(move || accept_loop(&inner, listener, tx))
                .expect("spawn acceptor")
        };
        let drainer = cfg.drain_worker.then(|| {
            let inner = inner.clone();
            thread::Builder::new()
                .name(format!("shard{}-drain", cfg.dtn_index))
                .spawn(move || drain_loop(&inner))
                .expect("spawn drainer")
        });
        log::info!("shard {} serving on {addr}", cfg.dtn_index);
        Ok(ShardServer {
            addr,
            inner,
            acceptor: Some(acceptor),
            workers,
            drainer,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn dtn_index(&self) -> usize {
        self.inner.dtn_index
    }

    /// Frames received of one message type since start or the last reset.
    pub fn received(&self, ty: MessageType) -> u64 {
        self.inner.received[ty as usize].load(Ordering::SeqCst)
    }

    pub fn reset_counters(&self) {
        for c in &self.inner.received {
            c.store(0, Ordering::SeqCst);
        }
    }

    pub fn dump(&self) -> ShardDump {
        lock(&self.inner.store).dump()
    }

    pub fn queue_len(&self) -> usize {
        lock(&self.inner.queue).len()
    }

    /// Runs `f` against the store under its lock.
    pub fn with_store<R>(&self, f: impl FnOnce(&mut ShardStore) -> R) -> R {
        f(&mut lock(&self.inner.store))
    }

    /// Blocks until the serving threads exit. Used by `serve-shard`.
    pub fn wait(mut self) {
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        self.stop();
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        // Wake the acceptor.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        for (_, c) in lock(&self.inner.conns).drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
        let readers: Vec<_> = lock(&self.inner.readers).drain(..).collect();
        for r in readers {
            let _ = r.join();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        {
            let _q = lock(&self.inner.queue);
            self.inner.queue_cv.notify_all();
        }
        if let Some(d) = self.drainer.take() {
            let _ = d.join();
        }
    }
}

impl Drop for ShardServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(inner: &Arc<Inner>, listener: TcpListener, tx: Sender<Job>) {
    for conn in listener.incoming() {
        if inner.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        let (reader, writer) = match (stream.try_clone(), stream.try_clone()) {
            (Ok(r), Ok(w)) => (r, w),
            _ => continue,
        };
        let id = inner.next_conn.fetch_add(1, Ordering::Relaxed);
        lock(&inner.conns).insert(id, stream);
        let inner2 = inner.clone();
        let tx = tx.clone();
        let handle = thread::spawn(move || {
            read_loop(&inner2, reader, Arc::new(Mutex::new(writer)), tx);
            lock(&inner2.conns).remove(&id);
        });
        let mut readers = lock(&inner.readers);
        readers.retain(|h| !h.is_finished());
        readers.push(handle);
    }
}

fn read_loop(inner: &Inner, stream: TcpStream, writer: Arc<Mutex<TcpStream>>, tx: Sender<Job>) {
    let mut reader = BufReader::with_capacity(64 * 1024, stream);
    loop {
        match decode_frame(&mut reader) {
            Ok(frame) => {
                if let Some(c) = inner.received.get(frame.msg_type as usize) {
                    c.fetch_add(1, Ordering::SeqCst);
                }
                if tx
                    .send(Job {
                        frame,
                        writer: writer.clone(),
                    })
                    .is_err()
                {
                    break;
                }
            }
            Err(ProtocolError::Closed) => break,
            Err(ProtocolError::OversizedFrame(n)) => {
                let err = Fields::new()
                    .u16(1, crate::protocol::ErrorCode::BadRequest as u16)
                    .str(2, &format!("frame length {n} exceeds limit"));
                send(&writer, MessageType::Error, 0, &err);
                let _ = lock(&writer).shutdown(Shutdown::Both);
                break;
            }
            Err(e) => {
                if !inner.shutdown.load(Ordering::SeqCst) {
                    log::debug!("connection dropped: {e}");
                }
                break;
            }
        }
    }
}

fn send(writer: &Mutex<TcpStream>, ty: MessageType, id: u32, fields: &Fields) {
    let bytes = match encode_frame(ty as u16, id, &fields.encode()) {
        Ok(b) => b,
        Err(e) => {
            let f = encode_error(&Error::Protocol(e));
            encode_frame(MessageType::Error as u16, id, &f.encode()).expect("small frame")
        }
    };
    if let Err(e) = lock(writer).write_all(&bytes) {
        log::debug!("response write failed: {e}");
    }
}

fn worker_loop(inner: &Inner, rx: Receiver<Job>) {
    for job in rx {
        let id = job.frame.request_id;
        let (ty, fields) = match Request::decode(job.frame.msg_type, &job.frame.payload) {
            Ok(req) => match handle(inner, req) {
                Ok(f) => (MessageType::Result, f),
                Err(e) => (MessageType::Error, encode_error(&e)),
            },
            Err(ProtocolError::UnknownMessageType(t)) => (
                MessageType::Error,
                unsupported_error(&format!("unknown message type {t}")),
            ),
            Err(e) => (MessageType::Error, encode_error(&Error::Protocol(e))),
        };
        send(&job.writer, ty, id, &fields);
    }
}

fn handle(inner: &Inner, req: Request) -> Result<Fields> {
    match req {
        Request::PutFile {
            record,
            index,
            exclusive,
            ..
        } => {
            let is_file = record.kind == EntryKind::File;
            match index {
                IndexHook::Sync if is_file => {
                    let rel = record.path.backend_rel();
                    let stat = inner.backend.stat(rel)?;
                    let bytes = inner.backend.get(rel)?;
                    let ctx = StatContext {
                        size: stat.size,
                        mtime: stat.mtime,
                    };
                    let triples =
                        extract_attributes(&inner.registry, record.path.as_str(), &bytes, &inner.specs, Some(ctx));
                    lock(&inner.store).put_file(record, Some(triples), exclusive)?;
                }
                IndexHook::Async if is_file => {
                    let (path, size) = (record.path.as_str().to_owned(), record.size);
                    lock(&inner.store).put_file(record, None, exclusive)?;
                    lock(&inner.queue).enqueue(&path, size)?;
                    inner.queue_cv.notify_all();
                }
                _ => lock(&inner.store).put_file(record, None, exclusive)?,
            }
            Ok(Fields::new())
        }
        Request::GetFile { requester, path } => {
            let store = lock(&inner.store);
            let record = store.get_file(&path, &requester)?;
            let template = store.resolve_namespace(&path)?;
            Ok(Fields::new()
                .nested(result_tag::RECORDS, &encode_record(record))
                .nested(result_tag::TEMPLATES, &encode_template(template)))
        }
        Request::ListVisible {
            requester,
            prefix,
            namespaces,
        } => {
            let store = lock(&inner.store);
            let mut f = Fields::new();
            if namespaces {
                for t in store.namespaces() {
                    f.push(result_tag::TEMPLATES, encode_template(&t).encode());
                }
            } else {
                let records = store.list_visible(&requester, prefix.as_ref());
                drop(store);
                push_list(
                    &mut f,
                    result_tag::RECORDS,
                    records.iter().map(|r| encode_record(r).encode()),
                );
            }
            Ok(f)
        }
        Request::BatchExport { dtn_index, records, .. } => {
            if dtn_index != inner.dtn_index {
                return Err(Error::WrongShard {
                    path: records.first().map(|r| r.path.to_string()).unwrap_or_default(),
                    expected: dtn_index,
                    actual: inner.dtn_index,
                });
            }
            let n = lock(&inner.store).batch_export(records)?;
            Ok(Fields::new().u64(result_tag::COUNT, n as u64))
        }
        Request::EnqueueIndex {
            paths,
            offline_selector,
            flush,
            ..
        } => {
            let mut f = Fields::new();
            if !paths.is_empty() {
                let mut q = lock(&inner.queue);
                for p in &paths {
                    let size = inner.backend.stat(p.backend_rel()).map(|s| s.size).unwrap_or(0);
                    q.enqueue(p.as_str(), size)?;
                }
                inner.queue_cv.notify_all();
            }
            if let Some(selector) = offline_selector {
                let _m = lock(&inner.maintenance);
                let (idx, n) = (inner.dtn_index, inner.dtn_count);
                let report = index_offline(
                    &mut LockedSink(&inner.store),
                    &inner.backend,
                    &selector,
                    &inner.registry,
                    &inner.specs,
                    |p| place(p, n).is_ok_and(|d| d == idx),
                )?;
                f = f.nested(result_tag::REPORT, &encode_report(&report));
            }
            let count = if flush {
                drain_all(inner)? as u64
            } else {
                lock(&inner.queue).len() as u64
            };
            Ok(f.u64(result_tag::COUNT, count))
        }
        Request::Query { requester, predicate } => {
            let hits = lock(&inner.store).query(&predicate, &requester);
            let mut f = Fields::new();
            push_list(&mut f, result_tag::PATHS, hits.iter().map(|s| s.as_bytes()));
            Ok(f)
        }
        Request::Tag {
            requester,
            path,
            name,
            value,
        } => {
            lock(&inner.store).tag(&path, &requester, &name, value)?;
            Ok(Fields::new())
        }
        Request::RegisterNs { template, .. } => {
            lock(&inner.store).register_namespace(template)?;
            Ok(Fields::new())
        }
    }
}

/// One bounded drain. Caller holds the maintenance lock.
fn drain_batch(inner: &Inner) -> Result<Option<usize>> {
    let batch = lock(&inner.queue).take_batch();
    if batch.is_empty() {
        return Ok(None);
    }
    let extracted = extract_queued(&inner.backend, &inner.registry, &inner.specs, &batch);
    let n = extracted.len();
    match lock(&inner.store).store_triples(extracted) {
        Ok(()) => Ok(Some(n)),
        Err(e) => {
            lock(&inner.queue).requeue_front(batch);
            Err(e)
        }
    }
}

fn drain_all(inner: &Inner) -> Result<usize> {
    let _m = lock(&inner.maintenance);
    let mut total = 0;
    while let Some(n) = drain_batch(inner)? {
        total += n;
    }
    Ok(total)
}

fn drain_loop(inner: &Inner) {
    loop {
        {
            let mut q = lock(&inner.queue);
            loop {
                if inner.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                match q.time_to_flush(Instant::now()) {
                    Some(d) if d.is_zero() => break,
                    Some(d) => q = inner.queue_cv.wait_timeout(q, d).unwrap_or_else(|p| p.into_inner()).0,
                    None => q = inner.queue_cv.wait(q).unwrap_or_else(|p| p.into_inner()),
                }
            }
        }
        let _m = lock(&inner.maintenance);
        // The threshold may have been satisfied by a flush meanwhile.
        if !lock(&inner.queue).should_flush(Instant::now()) {
            continue;
        }
        if let Err(e) = drain_batch(inner) {
            log::warn!("index drain failed, will retry: {e}");
            thread::sleep(Duration::from_millis(50));
        }
    }
}
