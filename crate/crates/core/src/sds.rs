//! Scientific discovery service: attribute extraction, the in-memory
//! discovery index, the asynchronous index queue and the offline indexer.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::backend::Backend;
use crate::error::{Error, Result};
use crate::path::WorkspacePath;
use crate::record::EntryKind;
use crate::sdf::{self, AttributeValue, ValueType};

pub const FS_SIZE: &str = "fs.size";
pub const FS_MTIME: &str = "fs.mtime";

/// Maximum number of distinct paths waiting in an [`IndexQueue`].
pub const QUEUE_CAPACITY: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IndexMode {
    InlineSync,
    InlineAsync,
    LwOffline,
}

impl IndexMode {
    pub fn name(self) -> &'static str {
        match self {
            IndexMode::InlineSync => "inline-sync",
            IndexMode::InlineAsync => "inline-async",
            IndexMode::LwOffline => "lw-offline",
        }
    }
}

impl fmt::Display for IndexMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inline-sync" => Ok(IndexMode::InlineSync),
            "inline-async" => Ok(IndexMode::InlineAsync),
            "lw-offline" => Ok(IndexMode::LwOffline),
            other => Err(Error::Config(format!("unknown indexing mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AttributeSpec {
    pub name: String,
    pub value_type: ValueType,
}

/// Attributes collaborators asked to index, keyed by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpecSet {
    specs: BTreeMap<String, ValueType>,
}

impl SpecSet {
    pub fn new(specs: impl IntoIterator<Item = AttributeSpec>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for s in specs {
            if out.insert(s.name.clone(), s.value_type).is_some() {
                return Err(Error::Config(format!("duplicate attribute spec {:?}", s.name)));
            }
        }
        Ok(SpecSet { specs: out })
    }

    /// Parses `name:type` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut specs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, ty) = line
                .rsplit_once(':')
                .ok_or_else(|| Error::Config(format!("spec line {}: expected name:type", i + 1)))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(Error::Config(format!("spec line {}: empty name", i + 1)));
            }
            let value_type = ValueType::from_name(ty.trim())
                .ok_or_else(|| Error::Config(format!("spec line {}: unknown type {:?}", i + 1, ty.trim())))?;
            specs.push(AttributeSpec {
                name: name.to_owned(),
                value_type,
            });
        }
        Self::new(specs)
    }

    pub fn get(&self, name: &str) -> Option<ValueType> {
        self.specs.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = AttributeSpec> + '_ {
        self.specs.iter().map(|(n, t)| AttributeSpec {
            name: n.clone(),
            value_type: *t,
        })
    }

    pub fn to_text(&self) -> String {
        self.specs.iter().map(|(n, t)| format!("{n}:{t}\n")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TripleSource {
    Extracted,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeTriple {
    pub attribute: String,
    pub file: String,
    pub value: AttributeValue,
    pub source: TripleSource,
}

/// File-system facts the caller knows about the file being indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatContext {
    pub size: u64,
    pub mtime: i64,
}

/// Reads self-describing attributes out of one file format.
pub trait Extractor: Send + Sync {
    /// `None` when the bytes are not in this extractor's format.
    fn extract(&self, bytes: &[u8]) -> Option<Vec<(String, AttributeValue)>>;
}

pub struct SdfExtractor;

impl Extractor for SdfExtractor {
    fn extract(&self, bytes: &[u8]) -> Option<Vec<(String, AttributeValue)>> {
        sdf::decode_view(bytes).ok().map(|v| v.attributes)
    }
}

/// Extractors keyed by file-name suffix.
#[derive(Clone)]
pub struct ExtractorRegistry {
    by_suffix: Vec<(String, Arc<dyn Extractor>)>,
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut r = ExtractorRegistry { by_suffix: vec![] };
        r.register(sdf::SUFFIX, Arc::new(SdfExtractor));
        r
    }
}

impl fmt::Debug for ExtractorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.by_suffix.iter().map(|(s, _)| s)).finish()
    }
}

impl ExtractorRegistry {
    pub fn register(&mut self, suffix: &str, extractor: Arc<dyn Extractor>) {
        self.by_suffix.retain(|(s, _)| s != suffix);
        self.by_suffix.push((suffix.to_owned(), extractor));
    }

    pub fn for_name(&self, name: &str) -> Option<&dyn Extractor> {
        self.by_suffix
            .iter()
            .filter(|(s, _)| name.ends_with(s.as_str()))
            .max_by_key(|(s, _)| s.len())
            .map(|(_, e)| e.as_ref())
    }

    pub fn handles(&self, name: &str) -> bool {
        self.for_name(name).is_some()
    }
}

/// Extracts the triples for one file: every self-described attribute whose
/// name and type match a spec, plus `fs.size` / `fs.mtime` when a stat
/// context is supplied. Never fails; unreadable formats just contribute
/// nothing.
pub fn extract_attributes(
    registry: &ExtractorRegistry,
    file: &str,
    bytes: &[u8],
    specs: &SpecSet,
    stat: Option<StatContext>,
) -> Vec<AttributeTriple> {
    let mut out = Vec::new();
    if !specs.is_empty() {
        if let Some(attrs) = registry.for_name(file).and_then(|e| e.extract(bytes)) {
            for (name, value) in attrs {
                if specs.get(&name) == Some(value.value_type()) {
                    out.push(AttributeTriple {
                        attribute: name,
                        file: file.to_owned(),
                        value,
                        source: TripleSource::Extracted,
                    });
                }
            }
        }
    }
    if let Some(stat) = stat {
        for (name, v) in [(FS_SIZE, stat.size as i64), (FS_MTIME, stat.mtime)] {
            out.push(AttributeTriple {
                attribute: name.to_owned(),
                file: file.to_owned(),
                value: AttributeValue::Int(v),
                source: TripleSource::Extracted,
            });
        }
    }
    out
}

/// Triples grouped by file, for bulk replacement.
pub type FileTriples = (String, Vec<AttributeTriple>);

#[derive(Debug, Clone)]
struct Slot {
    value: AttributeValue,
    source: TripleSource,
}

/// In-memory discovery shard contents: one value per (attribute, file).
///
/// Manual tags take precedence: extraction only ever replaces extracted
/// values.
#[derive(Debug, Default, Clone)]
pub struct DiscoveryIndex {
    by_attr: HashMap<String, HashMap<String, Slot>>,
    by_file: HashMap<String, HashSet<String>>,
}

impl DiscoveryIndex {
    fn insert(&mut self, attribute: &str, file: &str, slot: Slot) {
        self.by_attr
            .entry(attribute.to_owned())
            .or_default()
            .insert(file.to_owned(), slot);
        self.by_file
            .entry(file.to_owned())
            .or_default()
            .insert(attribute.to_owned());
    }

    fn remove(&mut self, attribute: &str, file: &str) {
        if let Some(m) = self.by_attr.get_mut(attribute) {
            m.remove(file);
            if m.is_empty() {
                self.by_attr.remove(attribute);
            }
        }
        if let Some(s) = self.by_file.get_mut(file) {
            s.remove(attribute);
            if s.is_empty() {
                self.by_file.remove(file);
            }
        }
    }

    fn slot(&self, attribute: &str, file: &str) -> Option<&Slot> {
        self.by_attr.get(attribute).and_then(|m| m.get(file))
    }

    /// Replaces every extracted triple of `file` with `triples`.
    pub fn replace_extracted(&mut self, file: &str, triples: &[AttributeTriple]) {
        let old: Vec<String> = self
            .by_file
            .get(file)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default();
        for attr in old {
            if matches!(self.slot(&attr, file), Some(s) if s.source == TripleSource::Extracted) {
                self.remove(&attr, file);
            }
        }
        for t in triples {
            if matches!(self.slot(&t.attribute, file), Some(s) if s.source == TripleSource::Manual) {
                continue;
            }
            self.insert(
                &t.attribute,
                file,
                Slot {
                    value: t.value.clone(),
                    source: TripleSource::Extracted,
                },
            );
        }
    }

    pub fn upsert_manual(&mut self, attribute: &str, file: &str, value: AttributeValue) {
        self.insert(
            attribute,
            file,
            Slot {
                value,
                source: TripleSource::Manual,
            },
        );
    }

    pub fn remove_file(&mut self, file: &str) {
        if let Some(attrs) = self.by_file.remove(file) {
            for a in attrs {
                if let Some(m) = self.by_attr.get_mut(&a) {
                    m.remove(file);
                    if m.is_empty() {
                        self.by_attr.remove(&a);
                    }
                }
            }
        }
    }

    /// (file, value) pairs recorded for one attribute.
    pub fn attribute_values<'a>(&'a self, attribute: &str) -> impl Iterator<Item = (&'a str, &'a AttributeValue)> + 'a {
        self.by_attr
            .get(attribute)
            .into_iter()
            .flat_map(|m| m.iter().map(|(f, s)| (f.as_str(), &s.value)))
    }

    pub fn value(&self, attribute: &str, file: &str) -> Option<&AttributeValue> {
        self.slot(attribute, file).map(|s| &s.value)
    }

    pub fn has_file(&self, file: &str) -> bool {
        self.by_file.contains_key(file)
    }

    pub fn len(&self) -> usize {
        self.by_attr.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_attr.is_empty()
    }

    /// All triples, sorted.
    pub fn triples(&self) -> Vec<AttributeTriple> {
        let mut out: Vec<AttributeTriple> = self
            .by_attr
            .iter()
            .flat_map(|(a, m)| {
                m.iter().map(move |(f, s)| AttributeTriple {
                    attribute: a.clone(),
                    file: f.clone(),
                    value: s.value.clone(),
                    source: s.source,
                })
            })
            .collect();
        out.sort();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueThresholds {
    pub flush_count: usize,
    pub flush_ms: u64,
    pub flush_bytes: u64,
}

impl Default for QueueThresholds {
    fn default() -> Self {
        QueueThresholds {
            flush_count: 64,
            flush_ms: 500,
            flush_bytes: 64 * 1024 * 1024,
        }
    }
}

/// Pending index requests. Enqueuing a path that is already pending is a
/// no-op; the file is read when the entry is drained, so the newest bytes
/// win.
#[derive(Debug)]
pub struct IndexQueue {
    pending: VecDeque<(String, u64)>,
    members: HashSet<String>,
    pending_bytes: u64,
    oldest: Option<Instant>,
    thresholds: QueueThresholds,
    capacity: usize,
}

impl IndexQueue {
    pub fn new(thresholds: QueueThresholds) -> Self {
        Self::with_capacity(thresholds, QUEUE_CAPACITY)
    }

    pub fn with_capacity(thresholds: QueueThresholds, capacity: usize) -> Self {
        IndexQueue {
            pending: VecDeque::new(),
            members: HashSet::new(),
            pending_bytes: 0,
            oldest: None,
            thresholds: QueueThresholds {
                flush_count: thresholds.flush_count.max(1),
                ..thresholds
            },
            capacity,
        }
    }

    pub fn thresholds(&self) -> QueueThresholds {
        self.thresholds
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn enqueue(&mut self, path: &str, size: u64) -> Result<()> {
        if self.members.contains(path) {
            return Ok(());
        }
        if self.pending.len() >= self.capacity {
            return Err(Error::QueueFull);
        }
        self.members.insert(path.to_owned());
        self.pending.push_back((path.to_owned(), size));
        self.pending_bytes = self.pending_bytes.saturating_add(size);
        self.oldest.get_or_insert_with(Instant::now);
        Ok(())
    }

    /// Time until the age threshold fires, or zero if any threshold already
    /// has. `None` when nothing is pending.
    pub fn time_to_flush(&self, now: Instant) -> Option<Duration> {
        let oldest = self.oldest?;
        if self.pending.len() >= self.thresholds.flush_count || self.pending_bytes >= self.thresholds.flush_bytes {
            return Some(Duration::ZERO);
        }
        let deadline = oldest + Duration::from_millis(self.thresholds.flush_ms);
        Some(deadline.saturating_duration_since(now))
    }

    pub fn should_flush(&self, now: Instant) -> bool {
        self.time_to_flush(now) == Some(Duration::ZERO)
    }

    /// Removes up to `flush_count` entries from the front.
    pub fn take_batch(&mut self) -> Vec<String> {
        let n = self.thresholds.flush_count.min(self.pending.len());
        let mut batch = Vec::with_capacity(n);
        for (p, size) in self.pending.drain(..n) {
            self.members.remove(&p);
            self.pending_bytes = self.pending_bytes.saturating_sub(size);
            batch.push(p);
        }
        // Remaining entries keep the original age so they are not starved.
        if self.pending.is_empty() {
            self.pending_bytes = 0;
            self.oldest = None;
        }
        batch
    }

    /// Puts a batch back at the front after a failed drain.
    pub fn requeue_front(&mut self, batch: Vec<String>) {
        for p in batch.into_iter().rev() {
            if self.members.insert(p.clone()) {
                self.pending.push_front((p, 0));
            }
        }
        if !self.pending.is_empty() {
            self.oldest.get_or_insert_with(Instant::now);
        }
    }
}

/// Storage side of indexing; implemented by the shard store.
pub trait IndexSink {
    /// Atomically replaces the extracted triples of each listed file.
    fn store_triples(&mut self, batch: Vec<FileTriples>) -> Result<()>;
}

/// Indexes one file before returning; the caller's write must not be
/// acknowledged until this succeeds.
pub fn index_sync<S: IndexSink>(
    sink: &mut S,
    registry: &ExtractorRegistry,
    path: &WorkspacePath,
    bytes: &[u8],
    specs: &SpecSet,
    stat: StatContext,
) -> Result<usize> {
    let triples = extract_attributes(registry, path.as_str(), bytes, specs, Some(stat));
    let n = triples.len();
    sink.store_triples(vec![(path.as_str().to_owned(), triples)])?;
    Ok(n)
}

/// Reads and extracts the current contents of queued files. Returns the
/// per-file triples; files that vanished are dropped with a warning.
pub fn extract_queued(
    backend: &Backend,
    registry: &ExtractorRegistry,
    specs: &SpecSet,
    batch: &[String],
) -> Vec<FileTriples> {
    let mut out = Vec::with_capacity(batch.len());
    for display in batch {
        let path = match WorkspacePath::parse(display) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("dropping unparsable queued path {display:?}: {e}");
                continue;
            }
        };
        let rel = path.backend_rel();
        let (stat, bytes) = match backend.stat(rel).and_then(|s| Ok((s, backend.get(rel)?))) {
            Ok(v) => v,
            Err(Error::NotFound(_)) => {
                log::warn!("queued file {display} vanished before indexing");
                continue;
            }
            Err(e) => {
                log::warn!("cannot read queued file {display}: {e}");
                continue;
            }
        };
        if stat.kind == EntryKind::Directory {
            continue;
        }
        let ctx = StatContext {
            size: stat.size,
            mtime: stat.mtime,
        };
        out.push((
            display.clone(),
            extract_attributes(registry, display, &bytes, specs, Some(ctx)),
        ));
    }
    out
}

/// One bounded drain of the queue. On a storage failure the batch goes
/// back to the front of the queue.
pub fn drain_step<S: IndexSink>(
    queue: &mut IndexQueue,
    sink: &mut S,
    backend: &Backend,
    registry: &ExtractorRegistry,
    specs: &SpecSet,
) -> Result<usize> {
    let batch = queue.take_batch();
    if batch.is_empty() {
        return Ok(0);
    }
    let extracted = extract_queued(backend, registry, specs, &batch);
    let n = extracted.len();
    match sink.store_triples(extracted) {
        Ok(()) => Ok(n),
        Err(e) => {
            queue.requeue_front(batch);
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexReport {
    pub files_seen: u64,
    pub files_indexed: u64,
    pub triples_written: u64,
    pub scan_ms: f64,
    pub extract_ms: f64,
    pub store_ms: f64,
}

impl IndexReport {
    pub fn total_ms(&self) -> f64 {
        self.scan_ms + self.extract_ms + self.store_ms
    }
}

const OFFLINE_CHUNK: usize = 1024;

/// Scans a backend subtree and indexes every file with a registered
/// extractor suffix. `accept` filters which files belong to this shard.
pub fn index_offline<S: IndexSink>(
    sink: &mut S,
    backend: &Backend,
    selector: &str,
    registry: &ExtractorRegistry,
    specs: &SpecSet,
    accept: impl Fn(&WorkspacePath) -> bool,
) -> Result<IndexReport> {
    let mut report = IndexReport::default();
    let t0 = Instant::now();
    let entries = backend.scan_entries(selector)?;
    report.scan_ms = ms_since(t0);
    let mut pending: Vec<FileTriples> = Vec::new();
    for entry in entries.iter().filter(|e| e.kind == EntryKind::File) {
        report.files_seen += 1;
        if !registry.handles(&entry.rel_path) {
            continue;
        }
        let Ok(path) = WorkspacePath::from_backend_rel(&entry.rel_path) else {
            continue;
        };
        if path.is_namespace_root() || !accept(&path) {
            continue;
        }
        let t = Instant::now();
        let bytes = match backend.get(&entry.rel_path) {
            Ok(b) => b,
            Err(Error::NotFound(_)) => continue,
            Err(e) => return Err(e),
        };
        let ctx = StatContext {
            size: entry.size,
            mtime: entry.mtime,
        };
        let triples = extract_attributes(registry, path.as_str(), &bytes, specs, Some(ctx));
        report.extract_ms += ms_since(t);
        report.files_indexed += 1;
        report.triples_written += triples.len() as u64;
        pending.push((path.as_str().to_owned(), triples));
        if pending.len() >= OFFLINE_CHUNK {
            let t = Instant::now();
            sink.store_triples(std::mem::take(&mut pending))?;
            report.store_ms += ms_since(t);
        }
    }
    if !pending.is_empty() {
        let t = Instant::now();
        sink.store_triples(pending)?;
        report.store_ms += ms_since(t);
    }
    Ok(report)
}

pub(crate) fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::FlagMode;
    use crate::sdf::SdfDocument;

    fn specs(s: &str) -> SpecSet {
        SpecSet::parse(s).unwrap()
    }

    fn sdf_bytes(attrs: Vec<(&str, AttributeValue)>) -> Vec<u8> {
        sdf::encode(&SdfDocument {
            attributes: attrs.into_iter().map(|(n, v)| (n.to_owned(), v)).collect(),
            payload: vec![1, 2, 3],
        })
        .unwrap()
    }

    const STAT: StatContext = StatContext { size: 7, mtime: 1000 };

    #[test]
    fn spec_file_parsing() {
        let s = specs("# comment\nLocation:text\n\nDayNight : int # trailing\nScore:FLOAT\n");
        assert_eq!(s.get("Location"), Some(ValueType::Text));
        assert_eq!(s.get("DayNight"), Some(ValueType::Int));
        assert_eq!(s.get("Score"), Some(ValueType::Float));
        assert!(SpecSet::parse("a:int\na:text").is_err());
        assert!(SpecSet::parse("a:blob").is_err());
        assert!(SpecSet::parse("novalue").is_err());
    }

    #[test]
    fn extraction_matches_name_and_type() {
        let reg = ExtractorRegistry::default();
        let bytes = sdf_bytes(vec![
            ("Location", AttributeValue::Text("Pacific".into())),
            ("Other", AttributeValue::Int(3)),
        ]);
        let t = extract_attributes(&reg, "/p/a.sdf", &bytes, &specs("Location:text"), Some(STAT));
        let names: Vec<_> = t.iter().map(|t| t.attribute.as_str()).collect();
        assert_eq!(names, ["Location", FS_SIZE, FS_MTIME]);
        assert_eq!(t[0].value, AttributeValue::Text("Pacific".into()));

        let bytes = sdf_bytes(vec![("Location", AttributeValue::Int(1))]);
        let t = extract_attributes(&reg, "/p/a.sdf", &bytes, &specs("Location:text"), Some(STAT));
        assert_eq!(t.len(), 2);

        let t = extract_attributes(&reg, "/p/a.sdf", b"garbage", &specs("Location:text"), None);
        assert!(t.is_empty());
        let t = extract_attributes(&reg, "/p/a.txt", &bytes, &specs("Location:int"), Some(STAT));
        assert_eq!(t.len(), 2, "no extractor for .txt; fs.* only");
    }

    #[test]
    fn manual_tags_survive_reextraction() {
        let mut idx = DiscoveryIndex::default();
        let t = |a: &str, v: i64| AttributeTriple {
            attribute: a.into(),
            file: "/p/f".into(),
            value: AttributeValue::Int(v),
            source: TripleSource::Extracted,
        };
        idx.replace_extracted("/p/f", &[t("a", 1), t("b", 2)]);
        idx.upsert_manual("a", "/p/f", AttributeValue::Int(99));
        idx.upsert_manual("m", "/p/f", AttributeValue::Int(5));
        idx.upsert_manual("m", "/p/f", AttributeValue::Int(6));
        idx.replace_extracted("/p/f", &[t("a", 3)]);
        assert_eq!(idx.value("a", "/p/f"), Some(&AttributeValue::Int(99)));
        assert_eq!(idx.value("b", "/p/f"), None);
        assert_eq!(idx.value("m", "/p/f"), Some(&AttributeValue::Int(6)));
        assert_eq!(idx.len(), 2);
    }

    #[test]
    fn queue_coalesces_and_bounds() {
        let mut q = IndexQueue::with_capacity(QueueThresholds::default(), 3);
        q.enqueue("/p/a", 1).unwrap();
        q.enqueue("/p/b", 1).unwrap();
        q.enqueue("/p/a", 1).unwrap();
        assert_eq!(q.len(), 2);
        q.enqueue("/p/c", 1).unwrap();
        assert!(matches!(q.enqueue("/p/d", 1), Err(Error::QueueFull)));
    }

    #[test]
    fn queue_thresholds() {
        let th = QueueThresholds {
            flush_count: 2,
            flush_ms: 10_000,
            flush_bytes: 100,
        };
        let mut q = IndexQueue::new(th);
        let now = Instant::now();
        assert_eq!(q.time_to_flush(now), None);
        q.enqueue("/p/a", 10).unwrap();
        assert!(!q.should_flush(now));
        q.enqueue("/p/b", 10).unwrap();
        assert!(q.should_flush(now));
        let mut q = IndexQueue::new(th);
        q.enqueue("/p/big", 100).unwrap();
        assert!(q.should_flush(now));
        let mut q = IndexQueue::new(QueueThresholds { flush_ms: 0, ..th });
        q.enqueue("/p/a", 0).unwrap();
        assert!(q.should_flush(Instant::now()));
    }

    struct MemSink {
        idx: DiscoveryIndex,
        fail: bool,
    }

    impl IndexSink for MemSink {
        fn store_triples(&mut self, batch: Vec<FileTriples>) -> Result<()> {
            if self.fail {
                return Err(Error::ShardUnavailable("down".into()));
            }
            for (f, t) in batch {
                self.idx.replace_extracted(&f, &t);
            }
            Ok(())
        }
    }

    #[test]
    fn drain_batches_and_vanished_files() {
        let dir = tempfile::tempdir().unwrap();
        let b = Backend::new(dir.path(), FlagMode::MarkerTree);
        let reg = ExtractorRegistry::default();
        let sp = specs("k:int");
        let mut q = IndexQueue::new(QueueThresholds {
            flush_count: 4,
            ..Default::default()
        });
        for i in 0..10 {
            b.put(&format!("p/f{i}.sdf"), &sdf_bytes(vec![("k", AttributeValue::Int(i))]))
                .unwrap();
            q.enqueue(&format!("/p/f{i}.sdf"), 0).unwrap();
        }
        let mut sink = MemSink {
            idx: DiscoveryIndex::default(),
            fail: false,
        };
        assert_eq!(drain_step(&mut q, &mut sink, &b, &reg, &sp).unwrap(), 4);
        b.remove_file("p/f5.sdf").unwrap();
        assert_eq!(drain_step(&mut q, &mut sink, &b, &reg, &sp).unwrap(), 3);
        sink.fail = true;
        assert!(drain_step(&mut q, &mut sink, &b, &reg, &sp).is_err());
        assert_eq!(q.len(), 2);
        sink.fail = false;
        assert_eq!(drain_step(&mut q, &mut sink, &b, &reg, &sp).unwrap(), 2);
        assert_eq!(drain_step(&mut q, &mut sink, &b, &reg, &sp).unwrap(), 0);
        assert_eq!(sink.idx.value("k", "/p/f9.sdf"), Some(&AttributeValue::Int(9)));
        assert_eq!(sink.idx.value("k", "/p/f5.sdf"), None);
    }

    #[test]
    fn coalesced_entry_indexes_latest_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let b = Backend::new(dir.path(), FlagMode::MarkerTree);
        let reg = ExtractorRegistry::default();
        let sp = specs("k:int");
        let mut q = IndexQueue::new(QueueThresholds::default());
        b.put("p/f.sdf", &sdf_bytes(vec![("k", AttributeValue::Int(1))]))
            .unwrap();
        q.enqueue("/p/f.sdf", 0).unwrap();
        b.put("p/f.sdf", &sdf_bytes(vec![("k", AttributeValue::Int(2))]))
            .unwrap();
        q.enqueue("/p/f.sdf", 0).unwrap();
        let mut sink = MemSink {
            idx: DiscoveryIndex::default(),
            fail: false,
        };
        assert_eq!(drain_step(&mut q, &mut sink, &b, &reg, &sp).unwrap(), 1);
        assert_eq!(sink.idx.value("k", "/p/f.sdf"), Some(&AttributeValue::Int(2)));
    }

    #[test]
    fn offline_counts_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let b = Backend::new(dir.path(), FlagMode::MarkerTree);
        let reg = ExtractorRegistry::default();
        let sp = specs("k:int");
        let mut sink = MemSink {
            idx: DiscoveryIndex::default(),
            fail: false,
        };
        b.mkdir("p/empty").unwrap();
        let r = index_offline(&mut sink, &b, "p/empty", &reg, &sp, |_| true).unwrap();
        assert_eq!((r.files_seen, r.files_indexed, r.triples_written), (0, 0, 0));
        b.put("p/a.sdf", &sdf_bytes(vec![("k", AttributeValue::Int(1))]))
            .unwrap();
        b.put("p/sub/b.sdf", &sdf_bytes(vec![("k", AttributeValue::Int(2))]))
            .unwrap();
        b.put("p/notes.txt", b"hello").unwrap();
        let r = index_offline(&mut sink, &b, "", &reg, &sp, |_| true).unwrap();
        assert_eq!((r.files_seen, r.files_indexed, r.triples_written), (3, 2, 6));
        let first = sink.idx.triples();
        index_offline(&mut sink, &b, "", &reg, &sp, |_| true).unwrap();
        assert_eq!(sink.idx.triples(), first);
        assert!(matches!(
            index_offline(&mut sink, &b, "nope", &reg, &sp, |_| true),
            Err(Error::NotFound(_))
        ));
    }
}
