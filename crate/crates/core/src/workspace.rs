//! Client side of the collaboration workspace.

use std::collections::{BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::backend::{Backend, FlagMode};
use crate::error::{Error, Result};
use crate::meu::invalidate_ancestors;
use crate::path::WorkspacePath;
use crate::placement::{place, DtnDescriptor};
use crate::protocol::IndexHook;
use crate::query::Predicate;
use crate::record::{EntryKind, FileRecord, NamespaceTemplate};
use crate::sdf::AttributeValue;
use crate::sds::{IndexMode, IndexReport};
use crate::shard::{ShardClient, DEFAULT_CALL_TIMEOUT};

#[derive(Debug, Clone)]
pub struct SessionOptions {
    pub mode: IndexMode,
    pub flag_mode: FlagMode,
    pub call_timeout: Duration,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            mode: IndexMode::LwOffline,
            flag_mode: FlagMode::MarkerTree,
            call_timeout: DEFAULT_CALL_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub paths: Vec<String>,
    pub elapsed_ms: f64,
}

/// One collaborator's view of the workspace. Backends are reached as local
/// directories; shards over TCP.
#[derive(Debug)]
pub struct Session {
    collaborator: String,
    dtns: Vec<DtnDescriptor>,
    backends: Vec<Backend>,
    clients: Vec<Arc<ShardClient>>,
    mode: IndexMode,
    namespaces: Mutex<HashMap<String, NamespaceTemplate>>,
}

impl Session {
    /// `dtns` must be densely indexed (see [`crate::placement::assign_indices`]).
    pub fn new(collaborator: impl Into<String>, dtns: Vec<DtnDescriptor>, opts: SessionOptions) -> Result<Self> {
        if dtns.is_empty() {
            return Err(Error::ZeroDtnCount);
        }
        for (i, d) in dtns.iter().enumerate() {
            if d.index != i {
                return Err(Error::Config(format!(
                    "dtn {:?} has index {}, expected {i}",
                    d.id, d.index
                )));
            }
        }
        let backends = dtns
            .iter()
            .map(|d| Backend::new(&d.backend_root, opts.flag_mode))
            .collect();
        let clients = dtns
            .iter()
            .map(|d| Arc::new(ShardClient::with_timeout(d.endpoint, opts.call_timeout)))
            .collect();
        Ok(Session {
            collaborator: collaborator.into(),
            dtns,
            backends,
            clients,
            mode: opts.mode,
            namespaces: Mutex::new(HashMap::new()),
        })
    }

    pub fn collaborator(&self) -> &str {
        &self.collaborator
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn dtn_count(&self) -> usize {
        self.dtns.len()
    }

    pub fn dtns(&self) -> &[DtnDescriptor] {
        &self.dtns
    }

    pub fn backend(&self, dtn: usize) -> &Backend {
        &self.backends[dtn]
    }

    pub fn backends(&self) -> &[Backend] {
        &self.backends
    }

    pub fn client(&self, dtn: usize) -> &ShardClient {
        &self.clients[dtn]
    }

    pub fn place(&self, path: &WorkspacePath) -> usize {
        place(path, self.dtns.len()).expect("session has at least one dtn")
    }

    /// The template for `name`, refreshed from `dtn`'s registry on a miss.
    pub fn namespace(&self, name: &str, dtn: usize) -> Result<NamespaceTemplate> {
        if let Some(t) = self.namespaces.lock().unwrap().get(name) {
            return Ok(t.clone());
        }
        let all = self.clients[dtn].list_namespaces(&self.collaborator)?;
        let mut cache = self.namespaces.lock().unwrap();
        for t in all {
            cache.insert(t.name.clone(), t);
        }
        cache
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownNamespace(name.to_owned()))
    }

    fn hook(&self) -> IndexHook {
        match self.mode {
            IndexMode::InlineSync => IndexHook::Sync,
            IndexMode::InlineAsync => IndexHook::Async,
            IndexMode::LwOffline => IndexHook::None,
        }
    }

    /// Writes through the workspace: data to the placed backend, then the
    /// record (plus the mode's indexing hook) to the placed shard, then the
    /// sync flag. A failure after the data write leaves flag-false bytes
    /// that a later export picks up.
    pub fn ws_write(&self, path: &WorkspacePath, bytes: &[u8]) -> Result<FileRecord> {
        if path.is_namespace_root() {
            return Err(Error::BadRequest(format!("{path} is a namespace root")));
        }
        let d = self.place(path);
        self.namespace(path.namespace(), d)?;
        let backend = &self.backends[d];
        let rel = path.backend_rel();
        let (entry, created) = backend.put_tracked(rel, bytes)?;
        invalidate_ancestors(backend, rel, &created)?;
        let record = FileRecord {
            path: path.clone(),
            kind: EntryKind::File,
            size: entry.size,
            owner: self.collaborator.clone(),
            mtime: entry.mtime,
            dtn_index: d,
            synced: true,
        };
        self.clients[d].put_file(&self.collaborator, record.clone(), self.hook(), false)?;
        let flags = backend.flags();
        flags.set_kind(rel, EntryKind::File, true)?;
        for dir in created.iter().rev() {
            flags.set_kind(dir, EntryKind::Directory, true)?;
        }
        Ok(record)
    }

    fn visible_record(&self, path: &WorkspacePath) -> Result<FileRecord> {
        let d = self.place(path);
        let (record, template) = self.clients[d].get_file(&self.collaborator, path)?;
        if !template.visible(&record, &self.collaborator) {
            return Err(Error::NotVisible(path.to_string()));
        }
        Ok(record)
    }

    pub fn ws_read(&self, path: &WorkspacePath) -> Result<Vec<u8>> {
        let record = self.visible_record(path)?;
        if record.kind == EntryKind::Directory {
            return Err(Error::BadRequest(format!("{path} is a directory")));
        }
        self.backends[record.dtn_index].get(path.backend_rel())
    }

    pub fn ws_stat(&self, path: &WorkspacePath) -> Result<FileRecord> {
        self.visible_record(path)
    }

    /// Names of the immediate children of `dir`, from all shards. Fails as a
    /// whole if any shard fails.
    pub fn ws_readdir(&self, dir: &WorkspacePath) -> Result<Vec<String>> {
        let lists = self.fan_out(|c| c.list_visible(&self.collaborator, Some(dir)))?;
        let mut names = BTreeSet::new();
        for r in lists.iter().flatten() {
            if let Some(child) = r.path.child_of(dir) {
                names.insert(child.to_owned());
            }
        }
        Ok(names.into_iter().collect())
    }

    /// Names of the registered namespaces.
    pub fn list_namespaces(&self) -> Result<Vec<NamespaceTemplate>> {
        self.clients[0].list_namespaces(&self.collaborator)
    }

    pub fn ws_mkdir(&self, dir: &WorkspacePath) -> Result<FileRecord> {
        if dir.is_namespace_root() {
            return Err(Error::Exists(dir.to_string()));
        }
        let d = self.place(dir);
        self.namespace(dir.namespace(), d)?;
        let backend = &self.backends[d];
        let rel = dir.backend_rel();
        let created = backend.mkdir(rel)?;
        invalidate_ancestors(backend, rel, &created)?;
        let stat = backend.stat(rel)?;
        let record = FileRecord {
            path: dir.clone(),
            kind: EntryKind::Directory,
            size: 0,
            owner: self.collaborator.clone(),
            mtime: stat.mtime,
            dtn_index: d,
            synced: true,
        };
        self.clients[d].put_file(&self.collaborator, record.clone(), IndexHook::None, true)?;
        // Only directories made here are known to be fully synced.
        for c in created.iter().rev() {
            backend.flags().set_kind(c, EntryKind::Directory, true)?;
        }
        Ok(record)
    }

    pub fn tag(&self, path: &WorkspacePath, name: &str, value: AttributeValue) -> Result<()> {
        let d = self.place(path);
        self.clients[d].tag(&self.collaborator, path, name, value)
    }

    /// Scatter-gather query; fails as a whole if any shard fails.
    pub fn execute_query(&self, pred: &Predicate) -> Result<QueryResult> {
        let t = Instant::now();
        let parts = self.fan_out(|c| c.query(&self.collaborator, pred))?;
        let mut paths: Vec<String> = parts.into_iter().flatten().collect();
        paths.sort_unstable();
        paths.dedup();
        Ok(QueryResult {
            paths,
            elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Drains every shard's index queue; returns files indexed.
    pub fn flush(&self) -> Result<u64> {
        Ok(self.fan_out(|c| c.flush(&self.collaborator))?.into_iter().sum())
    }

    /// Offline indexing of `selector` (backend-relative) on every shard.
    pub fn index_offline(&self, selector: &str) -> Result<Vec<IndexReport>> {
        self.fan_out(|c| c.index_offline(&self.collaborator, selector))
    }

    /// Registers on every shard; all must accept. Safe to retry.
    pub fn register_namespace(&self, template: &NamespaceTemplate) -> Result<()> {
        self.fan_out(|c| c.register_namespace(&self.collaborator, template.clone()))?;
        self.namespaces
            .lock()
            .unwrap()
            .insert(template.name.clone(), template.clone());
        Ok(())
    }

    /// Runs `f` against every shard concurrently; results in DTN order.
    pub fn fan_out<T: Send>(&self, f: impl Fn(&ShardClient) -> Result<T> + Sync) -> Result<Vec<T>> {
        if self.clients.len() == 1 {
            return Ok(vec![f(&self.clients[0])?]);
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = self
                .clients
                .iter()
                .map(|c| {
                    let f = &f;
                    s.spawn(move || f(c))
                })
                .collect();
            let results: Vec<Result<T>> = handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::ShardUnavailable("worker panicked".into())))
                })
                .collect();
            results.into_iter().collect()
        })
    }

    /// DTN index whose backend root is `root`, if any.
    pub fn dtn_for_root(&self, root: &std::path::Path) -> Option<usize> {
        let want = root.canonicalize().ok()?;
        self.dtns
            .iter()
            .position(|d| d.backend_root.canonicalize().ok().as_deref() == Some(want.as_path()))
    }
}
