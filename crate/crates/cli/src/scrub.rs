//! Offline reconciliation of one shard against its backend. Remote
//! collaborators cannot delete, so owners remove data locally and scrub
//! drops the records left behind.

use scispace::backend::Backend;
use scispace::meu::invalidate_ancestors;
use scispace::shard::{ShardStore, StoreOptions};
use scispace::{EntryKind, Error, Result, WorkspacePath};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScrubReport {
    pub records_checked: u64,
    /// Records whose backend entry is gone; removed with their triples.
    pub stale: Vec<String>,
    /// Records that disagree with the backend; flags cleared so the next
    /// export refreshes them.
    pub drifted: Vec<String>,
    /// Flagged backend files this shard has no record for; flags cleared.
    pub orphaned: Vec<String>,
}

impl ScrubReport {
    pub fn is_clean(&self) -> bool {
        self.stale.is_empty() && self.drifted.is_empty() && self.orphaned.is_empty()
    }
}

fn clear(backend: &Backend, rel: &str, kind: EntryKind) -> Result<()> {
    invalidate_ancestors(backend, rel, &[])?;
    backend.flags().set_kind(rel, kind, false)
}

/// Opens the shard of DTN `dtn` directly; its service must be stopped.
pub fn scrub(
    backend: &Backend,
    dtn: usize,
    dtn_count: usize,
    store_opts: StoreOptions,
    dry_run: bool,
) -> Result<ScrubReport> {
    let mut store = ShardStore::open(backend.root(), dtn, dtn_count, store_opts).map_err(|e| match e {
        Error::LockHeld(m) => Error::LockHeld(format!("{m}; stop serve-shard before scrubbing")),
        e => e,
    })?;
    let mut report = ScrubReport::default();
    let records: Vec<_> = store.records().cloned().collect();
    for r in &records {
        report.records_checked += 1;
        let rel = r.path.backend_rel();
        match backend.stat(rel) {
            Err(Error::NotFound(_)) => report.stale.push(r.path.to_string()),
            Err(e) => return Err(e),
            Ok(e) if e.kind != r.kind => report.stale.push(r.path.to_string()),
            Ok(e) => {
                if r.kind == EntryKind::File && (e.size != r.size || e.mtime != r.mtime) {
                    report.drifted.push(rel.to_owned());
                }
            }
        }
    }
    for e in backend.scan_entries("")? {
        if e.kind != EntryKind::File || !backend.flags().get_kind(&e.rel_path, e.kind)? {
            continue;
        }
        let Ok(path) = WorkspacePath::from_backend_rel(&e.rel_path) else {
            continue;
        };
        if store.record(path.as_str()).is_none() {
            report.orphaned.push(e.rel_path);
        }
    }
    if !dry_run {
        for p in &report.stale {
            store.remove(p)?;
        }
        for rel in report.drifted.iter().chain(&report.orphaned) {
            clear(backend, rel, EntryKind::File)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use scispace::backend::FlagMode;
    use scispace::meu::{local_remove, local_write};
    use scispace::FileRecord;

    fn record(rel: &str, b: &Backend) -> FileRecord {
        let e = b.stat(rel).unwrap();
        FileRecord {
            path: WorkspacePath::from_backend_rel(rel).unwrap(),
            kind: EntryKind::File,
            size: e.size,
            owner: "alice".into(),
            mtime: e.mtime,
            dtn_index: 0,
            synced: true,
        }
    }

    #[test]
    fn finds_and_repairs_each_kind_of_drift() {
        let d = tempfile::tempdir().unwrap();
        let b = Backend::new(d.path(), FlagMode::MarkerTree);
        for f in ["public/keep", "public/gone", "public/changed", "public/orphan"] {
            local_write(&b, f, b"v1").unwrap();
        }
        {
            let mut s = ShardStore::open(d.path(), 0, 1, StoreOptions::default()).unwrap();
            for f in ["public/keep", "public/gone", "public/changed"] {
                s.put_file(record(f, &b), None, false).unwrap();
            }
        }
        for f in ["public/keep", "public/gone", "public/changed", "public/orphan"] {
            b.flags().set_kind(f, EntryKind::File, true).unwrap();
        }
        local_remove(&b, "public/gone").unwrap();
        std::thread::sleep(std::time::Duration::from_millis(5));
        b.put("public/changed", b"version two").unwrap();
        b.flags().set_kind("public/changed", EntryKind::File, true).unwrap();

        let dry = scrub(&b, 0, 1, StoreOptions::default(), true).unwrap();
        assert_eq!(dry.records_checked, 3);
        assert_eq!(dry.stale, ["/public/gone"]);
        assert_eq!(dry.drifted, ["public/changed"]);
        assert_eq!(dry.orphaned, ["public/orphan"]);
        assert!(b.flags().get_kind("public/orphan", EntryKind::File).unwrap());

        let applied = scrub(&b, 0, 1, StoreOptions::default(), false).unwrap();
        assert_eq!(applied, dry);
        assert!(!b.flags().get_kind("public/orphan", EntryKind::File).unwrap());
        assert!(!b.flags().get_kind("public/changed", EntryKind::File).unwrap());
        assert!(b.flags().get_kind("public/keep", EntryKind::File).unwrap());
        let again = scrub(&b, 0, 1, StoreOptions::default(), false).unwrap();
        assert!(again.drifted == ["public/changed"] && again.stale.is_empty());
    }
}
