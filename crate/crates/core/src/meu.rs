//! Metadata export: find locally written entries by their sync flags and
//! commit them to the shards in one message per shard.
//!
//! Flag invariant maintained by every writer: a directory whose flag is set
//! has every entry below it set too. Writers clear flags up the ancestor
//! chain until they meet one that is already clear, so a scan may skip any
//! flagged directory outright.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::backend::{parent_rel, Backend, BackendEntry, FlagMode};
use crate::error::{Error, IoContext, Result};
use crate::path::{WorkspacePath, RESERVED_DIR};
use crate::placement::place;
use crate::record::{EntryKind, FileRecord};
use crate::sds::{ms_since, IndexReport};
use crate::workspace::Session;

pub const LOCK_STALE_AFTER: Duration = Duration::from_secs(60);

/// Records per BATCH_EXPORT frame; larger exports use several frames.
pub const EXPORT_FRAME_RECORDS: usize = 200_000;

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// Clears directory flags above a freshly written `rel`. Directories in
/// `created` are new and carry no flag; the walk starts above them and
/// stops at the first ancestor whose flag is already clear.
pub fn invalidate_ancestors(backend: &Backend, rel: &str, created: &[String]) -> Result<()> {
    let flags = backend.flags();
    let mut cur = match created.first() {
        Some(top) => parent_rel(top),
        None => parent_rel(rel),
    };
    while let Some(dir) = cur {
        if !flags.get_kind(dir, EntryKind::Directory)? {
            break;
        }
        flags.set_kind(dir, EntryKind::Directory, false)?;
        cur = parent_rel(dir);
    }
    Ok(())
}

/// Writes a file directly into a backend, bypassing the workspace.
pub fn local_write(backend: &Backend, rel: &str, bytes: &[u8]) -> Result<BackendEntry> {
    let (entry, created) = backend.put_tracked(rel, bytes)?;
    // An overwritten file keeps its extended attributes.
    backend.flags().set_kind(&entry.rel_path, EntryKind::File, false)?;
    invalidate_ancestors(backend, &entry.rel_path, &created)?;
    Ok(entry)
}

pub fn local_mkdir(backend: &Backend, rel: &str) -> Result<()> {
    let created = backend.mkdir(rel)?;
    invalidate_ancestors(backend, rel, &created)
}

/// Removes a local file. Its shard record, if any, goes stale until a
/// scrub.
pub fn local_remove(backend: &Backend, rel: &str) -> Result<()> {
    backend.remove_file(rel)?;
    backend.flags().forget(rel)
}

/// Renames within one backend. The moved entry and everything below it
/// become unsynced.
pub fn local_rename(backend: &Backend, from: &str, to: &str) -> Result<()> {
    let created = match parent_rel(to) {
        Some(p) if !p.is_empty() => backend.mkdir(p)?,
        _ => Vec::new(),
    };
    backend.rename(from, to)?;
    let flags = backend.flags();
    flags.forget(from)?;
    match flags.mode() {
        FlagMode::MarkerTree => flags.forget(to)?,
        FlagMode::NativeXattr => {
            let kind = backend.stat(to)?.kind;
            flags.set_kind(to, kind, false)?;
            if kind == EntryKind::Directory {
                for e in backend.scan(to)? {
                    let e = e?;
                    flags.set_kind(&e.rel_path, e.kind, false)?;
                }
            }
        }
    }
    invalidate_ancestors(backend, to, &created)
}

/// Single-instance guard: `<backend_root>/.scispace/meu.lock`.
#[derive(Debug)]
pub struct MeuLock {
    path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockInfo {
    pub holder: String,
    pub pid: u32,
    pub timestamp_ms: i64,
}

impl LockInfo {
    fn parse(text: &str) -> Option<LockInfo> {
        let mut holder = None;
        let mut pid = None;
        let mut ts = None;
        for line in text.lines() {
            match line.split_once('=') {
                Some(("holder", v)) => holder = Some(v.to_owned()),
                Some(("pid", v)) => pid = v.parse().ok(),
                Some(("timestamp_ms", v)) => ts = v.parse().ok(),
                _ => {}
            }
        }
        Some(LockInfo {
            holder: holder?,
            pid: pid?,
            timestamp_ms: ts?,
        })
    }

    fn render(&self) -> String {
        format!(
            "holder={}\npid={}\ntimestamp_ms={}\n",
            self.holder, self.pid, self.timestamp_ms
        )
    }

    fn is_stale(&self) -> bool {
        if now_ms() - self.timestamp_ms > LOCK_STALE_AFTER.as_millis() as i64 {
            return true;
        }
        let proc_root = Path::new("/proc");
        proc_root.join("self").exists() && !proc_root.join(self.pid.to_string()).exists()
    }
}

impl MeuLock {
    pub fn path_for(backend_root: &Path) -> PathBuf {
        backend_root.join(RESERVED_DIR).join("meu.lock")
    }

    pub fn acquire(backend_root: &Path, holder: &str) -> Result<MeuLock> {
        let path = Self::path_for(backend_root);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).ctx(|| "create lock dir".into())?;
        }
        let info = LockInfo {
            holder: holder.to_owned(),
            pid: std::process::id(),
            timestamp_ms: now_ms(),
        };
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    f.write_all(info.render().as_bytes()).ctx(|| "write meu lock".into())?;
                    return Ok(MeuLock { path });
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    let existing = fs::read_to_string(&path).ok().and_then(|t| LockInfo::parse(&t));
                    match existing {
                        Some(ex) if !ex.is_stale() => {
                            return Err(Error::LockHeld(format!(
                                "export already running: holder {} pid {}",
                                ex.holder, ex.pid
                            )))
                        }
                        _ => {
                            log::warn!("removing stale export lock {}", path.display());
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(e) => return Err(Error::io("create meu lock", e)),
            }
        }
        Err(Error::LockHeld("export lock contended".into()))
    }
}

impl Drop for MeuLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanReport {
    pub dirs_visited: u64,
    pub dirs_skipped: u64,
    pub files_unsynced: Vec<String>,
    pub elapsed_ms: f64,
    /// Visited directories in scan order.
    pub visited: Vec<String>,
    unsynced_entries: Vec<BackendEntry>,
}

/// Depth-first walk from `start_rel` that skips flagged directories and
/// collects unflagged files. The caller holds the [`MeuLock`].
pub fn meu_scan(backend: &Backend, start_rel: &str) -> Result<ScanReport> {
    let t = Instant::now();
    let flags = backend.flags();
    let start = backend.stat(start_rel)?;
    if start.kind != EntryKind::Directory {
        return Err(Error::NotFound(format!("{start_rel} is not a directory")));
    }
    let start_rel = start.rel_path;
    let mut report = ScanReport::default();
    if flags.get_kind(&start_rel, EntryKind::Directory)? {
        report.dirs_skipped = 1;
        report.elapsed_ms = ms_since(t);
        return Ok(report);
    }
    report.dirs_visited = 1;
    report.visited.push(start_rel.clone());
    let mut scan = backend.scan(&start_rel)?;
    while let Some(entry) = scan.next() {
        let entry = entry?;
        match entry.kind {
            EntryKind::Directory => {
                if flags.get_kind(&entry.rel_path, EntryKind::Directory)? {
                    report.dirs_skipped += 1;
                    scan.skip_subtree();
                } else {
                    report.dirs_visited += 1;
                    report.visited.push(entry.rel_path);
                }
            }
            EntryKind::File => {
                if !flags.get_kind(&entry.rel_path, EntryKind::File)? {
                    report.files_unsynced.push(entry.rel_path.clone());
                    report.unsynced_entries.push(entry);
                }
            }
        }
    }
    report.elapsed_ms = ms_since(t);
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    /// Backend-relative subtree to export; empty for the whole backend.
    pub start_rel: String,
    /// Index the subtree offline on this DTN's shard afterwards.
    pub index: bool,
    /// Stop right after the first shard acknowledgement, before any flag
    /// is written. Simulates a crash for recovery tests.
    #[doc(hidden)]
    pub crash_after_ack: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ExportReport {
    pub scan: ScanReport,
    pub exported: u64,
    pub per_shard: BTreeMap<usize, u64>,
    pub frames_sent: u64,
    /// Files whose pathname places them on another DTN; left unsynced.
    pub misplaced: Vec<String>,
    /// Files in namespaces no shard knows; left unsynced.
    pub unregistered: Vec<String>,
    /// Shards whose batch failed, with the error.
    pub failed: BTreeMap<usize, String>,
    pub index: Option<IndexReport>,
    pub elapsed_ms: f64,
}

impl ExportReport {
    pub fn is_partial(&self) -> bool {
        !self.failed.is_empty()
    }
}

fn children_synced(backend: &Backend, dir: &str) -> Result<bool> {
    let flags = backend.flags();
    let mut scan = backend.scan(dir)?;
    while let Some(e) = scan.next() {
        let e = e?;
        if e.kind == EntryKind::Directory {
            scan.skip_subtree();
        }
        if !flags.get_kind(&e.rel_path, e.kind)? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Scans the backend of DTN `dtn` and exports every unsynced file it
/// hosts, one BATCH_EXPORT per shard.
pub fn meu_export(session: &Session, dtn: usize, opts: &ExportOptions) -> Result<ExportReport> {
    let t = Instant::now();
    let backend = session.backend(dtn);
    let _lock = MeuLock::acquire(backend.root(), session.collaborator())?;
    let mut report = ExportReport {
        scan: meu_scan(backend, &opts.start_rel)?,
        ..Default::default()
    };

    let mut groups: BTreeMap<usize, Vec<FileRecord>> = BTreeMap::new();
    if !report.scan.unsynced_entries.is_empty() {
        let known: Vec<String> = session
            .client(dtn)
            .list_namespaces(session.collaborator())?
            .into_iter()
            .map(|t| t.name)
            .collect();
        for entry in &report.scan.unsynced_entries {
            let Ok(path) = WorkspacePath::from_backend_rel(&entry.rel_path) else {
                log::warn!("skipping unexportable name {:?}", entry.rel_path);
                continue;
            };
            if path.is_namespace_root() {
                continue;
            }
            if !known.iter().any(|n| n == path.namespace()) {
                report.unregistered.push(entry.rel_path.clone());
                continue;
            }
            let d = place(&path, session.dtn_count())?;
            if d != dtn {
                report.misplaced.push(entry.rel_path.clone());
                continue;
            }
            groups.entry(d).or_default().push(FileRecord {
                path,
                kind: EntryKind::File,
                size: entry.size,
                owner: session.collaborator().to_owned(),
                mtime: entry.mtime,
                dtn_index: d,
                synced: true,
            });
        }
    }

    let flags = backend.flags();
    for (shard, records) in groups {
        for chunk in records.chunks(EXPORT_FRAME_RECORDS) {
            let sent = session
                .client(shard)
                .batch_export(session.collaborator(), shard, chunk.to_vec());
            report.frames_sent += 1;
            match sent {
                Ok(n) => {
                    report.exported += n;
                    *report.per_shard.entry(shard).or_default() += n;
                    if opts.crash_after_ack {
                        report.elapsed_ms = ms_since(t);
                        return Ok(report);
                    }
                    for r in chunk {
                        flags.set_kind(r.path.backend_rel(), EntryKind::File, true)?;
                    }
                }
                Err(e) => {
                    log::warn!("export to shard {shard} failed: {e}");
                    report.failed.insert(shard, e.to_string());
                    break;
                }
            }
        }
    }

    // Children were visited after their parents, so reverse order settles
    // each directory after everything below it.
    let mut dirs: Vec<&str> = report.scan.visited.iter().map(String::as_str).rev().collect();
    let above: Vec<&str> = {
        let mut v = Vec::new();
        let mut cur = parent_rel(&opts.start_rel);
        while let Some(d) = cur {
            v.push(d);
            cur = parent_rel(d);
        }
        v
    };
    let start_count = dirs.len();
    dirs.extend(above);
    for (i, dir) in dirs.into_iter().enumerate() {
        if children_synced(backend, dir)? {
            flags.set_kind(dir, EntryKind::Directory, true)?;
        } else if i >= start_count {
            break;
        }
    }

    if opts.index {
        report.index = Some(
            session
                .client(dtn)
                .index_offline(session.collaborator(), &opts.start_rel)?,
        );
    }
    report.elapsed_ms = ms_since(t);
    Ok(report)
}
