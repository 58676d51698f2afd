//! Durable state of one DTN's metadata and discovery shards.
//!
//! Layout under `<backend_root>/.scispace/shard/`:
//!
//! ```text
//! IDENTITY   "<dtn_index> <dtn_count>\n"
//! LOCK       held with an exclusive file lock while the store is open
//! snapshot   "SSSN" | version u16 | generation u64 | entry*
//! log        "SSLG" | version u16 | generation u64 | entry*
//! entry      length u32 | crc32 u32 | payload (field codec)
//! ```
//!
//! A snapshot of generation `g` contains everything written to logs of
//! generation `<= g`; a log whose generation is not newer than the snapshot
//! is stale and discarded on open. A torn trailing entry is truncated.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, IoContext, Result};
use crate::path::{WorkspacePath, RESERVED_DIR};
use crate::placement::place;
use crate::protocol::{
    decode_record, decode_template, decode_triple, encode_record, encode_template, encode_triple, FieldReader, Fields,
    ProtocolError,
};
use crate::query::Predicate;
use crate::record::{FileRecord, NamespaceTemplate};
use crate::sdf::AttributeValue;
use crate::sds::{AttributeTriple, DiscoveryIndex, FileTriples, IndexSink, TripleSource};

pub const LOG_MAGIC: &[u8; 4] = b"SSLG";
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SSSN";
pub const STORE_VERSION: u16 = 1;
const HEADER_LEN: u64 = 14;

/// Records per log entry; keeps every payload under the field-count limit.
pub const MAX_BATCH: usize = 60_000;
const GROUPS_PER_ENTRY: usize = 4096;

const KIND_PUT: u8 = 1;
const KIND_BATCH: u8 = 2;
const KIND_NAMESPACE: u8 = 3;
const KIND_INDEX: u8 = 4;
const KIND_TAG: u8 = 5;
const KIND_REMOVE: u8 = 6;

pub fn shard_dir(backend_root: &Path) -> PathBuf {
    backend_root.join(RESERVED_DIR).join("shard")
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// Write a snapshot and start a new log after this many entries.
    pub snapshot_every: usize,
    /// fsync the log after every entry. Without it an acknowledged entry
    /// survives a process crash but not a host crash.
    pub fsync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            snapshot_every: 4096,
            fsync: false,
        }
    }
}

/// Complete logical contents, for equality checks.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShardDump {
    pub files: Vec<FileRecord>,
    pub namespaces: Vec<NamespaceTemplate>,
    pub triples: Vec<AttributeTriple>,
}

fn corrupt(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("corrupt shard {what}: {e}"))
}

fn encode_group(file: &str, triples: &[AttributeTriple]) -> Fields {
    let mut f = Fields::new().str(1, file);
    for t in triples {
        f.push(2, encode_triple(t).encode());
    }
    f
}

fn decode_group(buf: &[u8]) -> Result<FileTriples, ProtocolError> {
    let r = FieldReader::parse(buf)?;
    let file = r.str(1)?.to_owned();
    let triples = r.all(2).map(decode_triple).collect::<Result<_, _>>()?;
    Ok((file, triples))
}

/// One state change, as logged.
#[derive(Debug, Clone, PartialEq)]
enum Op {
    Put {
        record: FileRecord,
        triples: Option<Vec<AttributeTriple>>,
    },
    Batch(Vec<FileRecord>),
    Namespace(NamespaceTemplate),
    Index(Vec<FileTriples>),
    Tag(AttributeTriple),
    Remove(String),
}

impl Op {
    fn encode(&self) -> Vec<u8> {
        let f = match self {
            Op::Put { record, triples } => {
                let f = Fields::new().u8(1, KIND_PUT).nested(2, &encode_record(record));
                match triples {
                    Some(t) => f.nested(3, &encode_group(record.path.as_str(), t)),
                    None => f,
                }
            }
            Op::Batch(records) => {
                let mut f = Fields::new().u8(1, KIND_BATCH);
                for r in records {
                    f.push(2, encode_record(r).encode());
                }
                f
            }
            Op::Namespace(t) => Fields::new().u8(1, KIND_NAMESPACE).nested(4, &encode_template(t)),
            Op::Index(groups) => {
                let mut f = Fields::new().u8(1, KIND_INDEX);
                for (file, triples) in groups {
                    f.push(3, encode_group(file, triples).encode());
                }
                f
            }
            Op::Tag(t) => Fields::new().u8(1, KIND_TAG).nested(5, &encode_triple(t)),
            Op::Remove(path) => Fields::new().u8(1, KIND_REMOVE).str(6, path),
        };
        f.encode()
    }

    fn decode(buf: &[u8]) -> Result<Op, ProtocolError> {
        let r = FieldReader::parse(buf)?;
        Ok(match r.u8(1)? {
            KIND_PUT => Op::Put {
                record: decode_record(r.req(2)?)?,
                triples: match r.get(3) {
                    Some(g) => Some(decode_group(g)?.1),
                    None => None,
                },
            },
            KIND_BATCH => Op::Batch(r.all(2).map(decode_record).collect::<Result<_, _>>()?),
            KIND_NAMESPACE => Op::Namespace(decode_template(r.req(4)?)?),
            KIND_INDEX => Op::Index(r.all(3).map(decode_group).collect::<Result<_, _>>()?),
            KIND_TAG => Op::Tag(decode_triple(r.req(5)?)?),
            KIND_REMOVE => Op::Remove(r.str(6)?.to_owned()),
            k => return Err(ProtocolError::Malformed(format!("log entry kind {k}"))),
        })
    }
}

/// Frames one entry: `length u32 | crc32 u32 | payload`.
pub fn frame_entry(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

fn header(magic: &[u8; 4], generation: u64) -> Vec<u8> {
    let mut h = Vec::with_capacity(HEADER_LEN as usize);
    h.extend_from_slice(magic);
    h.extend_from_slice(&STORE_VERSION.to_be_bytes());
    h.extend_from_slice(&generation.to_be_bytes());
    h
}

fn parse_header(buf: &[u8], magic: &[u8; 4]) -> Option<u64> {
    if buf.len() < HEADER_LEN as usize || &buf[..4] != magic {
        return None;
    }
    if u16::from_be_bytes([buf[4], buf[5]]) != STORE_VERSION {
        return None;
    }
    Some(u64::from_be_bytes(buf[6..14].try_into().unwrap()))
}

/// Splits framed entries off `buf`. Returns the payloads and the length of
/// the valid prefix; anything after it is a torn or corrupt tail.
fn split_entries(buf: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut out = Vec::new();
    let mut pos = 0;
    while buf.len() - pos >= 8 {
        let len = u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_be_bytes(buf[pos + 4..pos + 8].try_into().unwrap());
        let Some(payload) = buf.get(pos + 8..pos + 8 + len) else {
            break;
        };
        if crc32fast::hash(payload) != crc {
            break;
        }
        out.push(payload);
        pos += 8 + len;
    }
    (out, pos)
}

#[derive(Debug, Default, Clone)]
struct State {
    files: BTreeMap<String, FileRecord>,
    namespaces: BTreeMap<String, NamespaceTemplate>,
    index: DiscoveryIndex,
}

impl State {
    fn bootstrap() -> Self {
        let mut s = State::default();
        let public = NamespaceTemplate::public();
        s.namespaces.insert(public.name.clone(), public);
        s
    }

    fn upsert(&mut self, record: FileRecord) -> bool {
        match self.files.get(record.path.as_str()) {
            Some(old) if old.mtime > record.mtime => false,
            _ => {
                self.files.insert(record.path.as_str().to_owned(), record);
                true
            }
        }
    }

    fn apply(&mut self, op: Op) {
        match op {
            Op::Put { record, triples } => {
                let file = record.path.as_str().to_owned();
                if self.upsert(record) {
                    if let Some(t) = triples {
                        self.index.replace_extracted(&file, &t);
                    }
                }
            }
            Op::Batch(records) => {
                for r in records {
                    self.upsert(r);
                }
            }
            Op::Namespace(t) => {
                self.namespaces.insert(t.name.clone(), t);
            }
            Op::Index(groups) => {
                for (file, triples) in groups {
                    self.index.replace_extracted(&file, &triples);
                }
            }
            Op::Tag(t) => self.index.upsert_manual(&t.attribute, &t.file, t.value),
            Op::Remove(path) => {
                self.files.remove(&path);
                self.index.remove_file(&path);
            }
        }
    }

    fn snapshot_ops(&self) -> Vec<Op> {
        let mut ops: Vec<Op> = self.namespaces.values().cloned().map(Op::Namespace).collect();
        let records: Vec<FileRecord> = self.files.values().cloned().collect();
        for chunk in records.chunks(MAX_BATCH) {
            ops.push(Op::Batch(chunk.to_vec()));
        }
        let mut extracted: BTreeMap<String, Vec<AttributeTriple>> = BTreeMap::new();
        let mut manual = Vec::new();
        for t in self.index.triples() {
            match t.source {
                TripleSource::Extracted => extracted.entry(t.file.clone()).or_default().push(t),
                TripleSource::Manual => manual.push(t),
            }
        }
        let groups: Vec<FileTriples> = extracted.into_iter().collect();
        for chunk in groups.chunks(GROUPS_PER_ENTRY) {
            ops.push(Op::Index(chunk.to_vec()));
        }
        ops.extend(manual.into_iter().map(Op::Tag));
        ops
    }
}

pub struct ShardStore {
    dtn_index: usize,
    dtn_count: usize,
    dir: PathBuf,
    state: State,
    log: File,
    generation: u64,
    entries_in_log: usize,
    opts: StoreOptions,
    _lock: File,
}

impl std::fmt::Debug for ShardStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardStore")
            .field("dtn_index", &self.dtn_index)
            .field("dir", &self.dir)
            .field("files", &self.state.files.len())
            .finish()
    }
}

impl ShardStore {
    /// Opens (creating if needed) the shard stored under `backend_root`.
    pub fn open(backend_root: &Path, dtn_index: usize, dtn_count: usize, opts: StoreOptions) -> Result<Self> {
        if dtn_count == 0 {
            return Err(Error::ZeroDtnCount);
        }
        if dtn_index >= dtn_count {
            return Err(Error::Config(format!(
                "dtn index {dtn_index} out of range for {dtn_count} dtns"
            )));
        }
        let dir = shard_dir(backend_root);
        fs::create_dir_all(&dir).ctx(|| format!("create {}", dir.display()))?;

        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(dir.join("LOCK"))
            .ctx(|| "open shard lock".into())?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(Error::LockHeld(format!("shard at {}", dir.display()))),
            Err(fs::TryLockError::Error(e)) => return Err(Error::io("lock shard", e)),
        }

        check_identity(&dir, dtn_index, dtn_count)?;

        let mut state = State::bootstrap();
        let snap_gen = load_snapshot(&dir.join("snapshot"), &mut state)?;

        let log_path = dir.join("log");
        let mut log = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&log_path)
            .ctx(|| "open shard log".into())?;
        let mut buf = Vec::new();
        log.read_to_end(&mut buf).ctx(|| "read shard log".into())?;
        let mut entries_in_log = 0;
        let generation = match parse_header(&buf, LOG_MAGIC) {
            Some(g) if g > snap_gen => {
                let (payloads, valid) = split_entries(&buf[HEADER_LEN as usize..]);
                for p in &payloads {
                    state.apply(Op::decode(p).map_err(|e| corrupt("log", e))?);
                }
                entries_in_log = payloads.len();
                let end = HEADER_LEN + valid as u64;
                if end < buf.len() as u64 {
                    log::warn!("truncating {} torn bytes from shard log", buf.len() as u64 - end);
                    log.set_len(end).ctx(|| "truncate shard log".into())?;
                }
                log.seek(SeekFrom::Start(end)).ctx(|| "seek shard log".into())?;
                g
            }
            _ => {
                if !buf.is_empty() && buf.len() >= 4 && &buf[..4] != LOG_MAGIC {
                    return Err(corrupt("log", "bad magic"));
                }
                // Missing, torn header, or already folded into the snapshot.
                reset_log(&mut log, snap_gen + 1)?;
                snap_gen + 1
            }
        };

        Ok(ShardStore {
            dtn_index,
            dtn_count,
            dir,
            state,
            log,
            generation,
            entries_in_log,
            opts,
            _lock: lock,
        })
    }

    pub fn dtn_index(&self) -> usize {
        self.dtn_index
    }

    pub fn dtn_count(&self) -> usize {
        self.dtn_count
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append(&mut self, op: Op) -> Result<()> {
        let entry = frame_entry(&op.encode());
        self.log.write_all(&entry).ctx(|| "append shard log".into())?;
        if self.opts.fsync {
            self.log.sync_data().ctx(|| "sync shard log".into())?;
        }
        self.state.apply(op);
        self.entries_in_log += 1;
        if self.entries_in_log >= self.opts.snapshot_every.max(1) {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Folds the log into a fresh snapshot and starts a new log.
    pub fn snapshot(&mut self) -> Result<()> {
        let mut buf = header(SNAPSHOT_MAGIC, self.generation);
        for op in self.state.snapshot_ops() {
            buf.extend_from_slice(&frame_entry(&op.encode()));
        }
        let tmp = self.dir.join("snapshot.tmp");
        {
            let mut f = File::create(&tmp).ctx(|| "create snapshot".into())?;
            f.write_all(&buf).ctx(|| "write snapshot".into())?;
            f.sync_all().ctx(|| "sync snapshot".into())?;
        }
        fs::rename(&tmp, self.dir.join("snapshot")).ctx(|| "install snapshot".into())?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        self.generation += 1;
        reset_log(&mut self.log, self.generation)?;
        self.entries_in_log = 0;
        Ok(())
    }

    fn check_routing(&self, record: &FileRecord) -> Result<()> {
        let expected = place(&record.path, self.dtn_count)?;
        if expected != self.dtn_index || record.dtn_index != self.dtn_index {
            return Err(Error::WrongShard {
                path: record.path.as_str().to_owned(),
                expected,
                actual: self.dtn_index,
            });
        }
        Ok(())
    }

    fn check_record(&self, record: &FileRecord) -> Result<()> {
        self.check_routing(record)?;
        if !self.state.namespaces.contains_key(record.path.namespace()) {
            return Err(Error::UnknownNamespace(format!(
                "{} (in {})",
                record.path.namespace(),
                record.path
            )));
        }
        if record.path.is_namespace_root() {
            return Err(Error::BadRequest(format!("{} is a namespace root", record.path)));
        }
        Ok(())
    }

    /// Upserts one record (last writer by mtime wins). With `triples`, the
    /// file's extracted index entries are replaced in the same log entry.
    /// With `exclusive`, an existing record is an error.
    pub fn put_file(
        &mut self,
        record: FileRecord,
        triples: Option<Vec<AttributeTriple>>,
        exclusive: bool,
    ) -> Result<()> {
        self.check_record(&record)?;
        if exclusive && self.state.files.contains_key(record.path.as_str()) {
            return Err(Error::Exists(record.path.as_str().to_owned()));
        }
        self.append(Op::Put { record, triples })
    }

    /// Upserts every record with `synced = true` in one log entry per
    /// `MAX_BATCH` records. Validation covers the whole batch first.
    pub fn batch_export(&mut self, mut records: Vec<FileRecord>) -> Result<usize> {
        for r in &records {
            self.check_record(r)?;
        }
        let mut seen = HashSet::new();
        // Keep the last occurrence of duplicated paths.
        records.reverse();
        records.retain(|r| seen.insert(r.path.as_str().to_owned()));
        records.reverse();
        let n = records.len();
        for r in &mut records {
            r.synced = true;
        }
        let mut rest = records;
        while !rest.is_empty() {
            let tail = rest.split_off(rest.len().min(MAX_BATCH));
            self.append(Op::Batch(rest))?;
            rest = tail;
        }
        Ok(n)
    }

    pub fn register_namespace(&mut self, template: NamespaceTemplate) -> Result<()> {
        let template = NamespaceTemplate::new(template.name, template.owner, template.scope)?;
        match self.state.namespaces.get(&template.name) {
            Some(existing) if *existing == template => Ok(()),
            Some(existing) => Err(Error::Conflict(format!(
                "namespace {} already registered by {} with scope {}",
                existing.name, existing.owner, existing.scope
            ))),
            None => self.append(Op::Namespace(template)),
        }
    }

    pub fn resolve_namespace(&self, path: &WorkspacePath) -> Result<&NamespaceTemplate> {
        self.namespace(path.namespace())
    }

    pub fn namespace(&self, name: &str) -> Result<&NamespaceTemplate> {
        self.state
            .namespaces
            .get(name)
            .ok_or_else(|| Error::UnknownNamespace(name.to_owned()))
    }

    pub fn namespaces(&self) -> Vec<NamespaceTemplate> {
        self.state.namespaces.values().cloned().collect()
    }

    /// The stored record. Unsynced records are hidden from everyone but
    /// their owner.
    pub fn get_file(&self, path: &WorkspacePath, requester: &str) -> Result<&FileRecord> {
        match self.state.files.get(path.as_str()) {
            Some(r) if r.synced || r.owner == requester => Ok(r),
            _ => Err(Error::NotFound(path.as_str().to_owned())),
        }
    }

    fn visible(&self, record: &FileRecord, requester: &str) -> bool {
        self.state
            .namespaces
            .get(record.path.namespace())
            .is_some_and(|t| t.visible(record, requester))
    }

    /// Visible records under `prefix` (the whole shard without one),
    /// sorted by path.
    pub fn list_visible(&self, requester: &str, prefix: Option<&WorkspacePath>) -> Vec<FileRecord> {
        let iter: Box<dyn Iterator<Item = &FileRecord>> = match prefix {
            Some(p) => {
                let start = format!("{}/", p.as_str());
                Box::new(
                    self.state
                        .files
                        .range(start.clone()..)
                        .take_while(move |(k, _)| k.starts_with(&start))
                        .map(|(_, r)| r),
                )
            }
            None => Box::new(self.state.files.values()),
        };
        iter.filter(|r| self.visible(r, requester)).cloned().collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &FileRecord> {
        self.state.files.values()
    }

    pub fn record(&self, path: &str) -> Option<&FileRecord> {
        self.state.files.get(path)
    }

    /// Manual tag; requires a record the requester may see or owns.
    pub fn tag(&mut self, path: &WorkspacePath, requester: &str, name: &str, value: AttributeValue) -> Result<()> {
        let ok = self
            .state
            .files
            .get(path.as_str())
            .is_some_and(|r| r.owner == requester || self.visible(r, requester));
        if !ok {
            return Err(Error::NotFound(path.as_str().to_owned()));
        }
        if name.is_empty() {
            return Err(Error::BadName("empty attribute name".into()));
        }
        self.append(Op::Tag(AttributeTriple {
            attribute: name.to_owned(),
            file: path.as_str().to_owned(),
            value,
            source: TripleSource::Manual,
        }))
    }

    /// Drops a record and its index entries.
    pub fn remove(&mut self, path: &str) -> Result<()> {
        if !self.state.files.contains_key(path) && !self.state.index.has_file(path) {
            return Ok(());
        }
        self.append(Op::Remove(path.to_owned()))
    }

    pub fn index(&self) -> &DiscoveryIndex {
        &self.state.index
    }

    /// Files whose index entries satisfy every clause and that `requester`
    /// may see, sorted.
    pub fn query(&self, pred: &Predicate, requester: &str) -> Vec<String> {
        let clauses = pred.clauses();
        let idx = &self.state.index;
        let mut out: Vec<String> = idx
            .attribute_values(&clauses[0].attribute)
            .filter(|(_, v)| clauses[0].matches(v))
            .filter(|(f, _)| {
                clauses[1..]
                    .iter()
                    .all(|c| idx.value(&c.attribute, f).is_some_and(|v| c.matches(v)))
            })
            .filter(|(f, _)| self.state.files.get(*f).is_some_and(|r| self.visible(r, requester)))
            .map(|(f, _)| f.to_owned())
            .collect();
        out.sort_unstable();
        out
    }

    pub fn dump(&self) -> ShardDump {
        ShardDump {
            files: self.state.files.values().cloned().collect(),
            namespaces: self.namespaces(),
            triples: self.state.index.triples(),
        }
    }
}

impl IndexSink for ShardStore {
    fn store_triples(&mut self, batch: Vec<FileTriples>) -> Result<()> {
        let mut rest = batch;
        while !rest.is_empty() {
            let tail = rest.split_off(rest.len().min(GROUPS_PER_ENTRY));
            self.append(Op::Index(rest))?;
            rest = tail;
        }
        Ok(())
    }
}

fn reset_log(log: &mut File, generation: u64) -> Result<()> {
    log.set_len(0).ctx(|| "reset shard log".into())?;
    log.seek(SeekFrom::Start(0)).ctx(|| "reset shard log".into())?;
    log.write_all(&header(LOG_MAGIC, generation))
        .ctx(|| "write shard log header".into())?;
    log.sync_data().ctx(|| "sync shard log".into())
}

fn check_identity(dir: &Path, dtn_index: usize, dtn_count: usize) -> Result<()> {
    let path = dir.join("IDENTITY");
    let want = format!("{dtn_index} {dtn_count}\n");
    match fs::read_to_string(&path) {
        Ok(have) if have == want => Ok(()),
        Ok(have) => Err(Error::Config(format!(
            "shard at {} was created as dtn {:?} (index count), opened as {:?}",
            dir.display(),
            have.trim(),
            want.trim()
        ))),
        Err(e) if e.kind() == io::ErrorKind::NotFound => fs::write(&path, want).ctx(|| "write shard identity".into()),
        Err(e) => Err(Error::io("read shard identity", e)),
    }
}

fn load_snapshot(path: &Path, state: &mut State) -> Result<u64> {
    let buf = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(Error::io("read snapshot", e)),
    };
    let generation = parse_header(&buf, SNAPSHOT_MAGIC).ok_or_else(|| corrupt("snapshot", "bad header"))?;
    let body = &buf[HEADER_LEN as usize..];
    let (payloads, valid) = split_entries(body);
    if valid != body.len() {
        // Snapshots are renamed into place whole, so this is real damage.
        return Err(corrupt("snapshot", "trailing garbage"));
    }
    for p in payloads {
        state.apply(Op::decode(p).map_err(|e| corrupt("snapshot", e))?);
    }
    Ok(generation)
}
