//! Brute-force reference evaluation straight off backend directories.
//!
//! Shares no code with the shard store or the wire protocol: every file is
//! re-extracted from disk and every predicate is evaluated in memory.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::Predicate;
use crate::backend::Backend;
use crate::path::WorkspacePath;
use crate::record::{EntryKind, NamespaceTemplate, Scope};
use crate::sdf::AttributeValue;
use crate::sds::{extract_attributes, ExtractorRegistry, SpecSet, StatContext};

/// Facts the oracle cannot read from the backends themselves.
#[derive(Debug, Clone, Default)]
pub struct OracleContext {
    pub namespaces: HashMap<String, NamespaceTemplate>,
    /// Owner per path display; paths not listed are owned by `default_owner`.
    pub owners: HashMap<String, String>,
    pub default_owner: String,
    /// Manual tags in application order: (file, attribute, value).
    pub manual: Vec<(String, String, AttributeValue)>,
    /// Index files without a registered extractor (fs.* only), as
    /// workspace writes do.
    pub index_unextractable: bool,
    /// Restrict to files whose sync flag is set.
    pub require_synced: bool,
}

impl OracleContext {
    fn owner(&self, file: &str) -> &str {
        self.owners.get(file).map(String::as_str).unwrap_or(&self.default_owner)
    }

    fn visible(&self, path: &WorkspacePath, requester: &str) -> bool {
        match self.namespaces.get(path.namespace()) {
            Some(t) => t.scope == Scope::Global || self.owner(path.as_str()) == requester,
            None => false,
        }
    }
}

/// Attribute values per file, as an index built from scratch would hold
/// them.
pub fn oracle_triples(
    backends: &[Backend],
    specs: &SpecSet,
    ctx: &OracleContext,
) -> BTreeMap<String, BTreeMap<String, AttributeValue>> {
    let registry = ExtractorRegistry::default();
    let mut out: BTreeMap<String, BTreeMap<String, AttributeValue>> = BTreeMap::new();
    for backend in backends {
        let Ok(entries) = backend.scan_entries("") else {
            continue;
        };
        for e in entries.into_iter().filter(|e| e.kind == EntryKind::File) {
            let Ok(path) = WorkspacePath::from_backend_rel(&e.rel_path) else {
                continue;
            };
            if path.is_namespace_root() {
                continue;
            }
            if ctx.require_synced && !backend.flags().get_kind(&e.rel_path, EntryKind::File).unwrap_or(false) {
                continue;
            }
            if !ctx.index_unextractable && !registry.handles(&e.rel_path) {
                continue;
            }
            let Ok(bytes) = backend.get(&e.rel_path) else {
                continue;
            };
            let stat = StatContext {
                size: e.size,
                mtime: e.mtime,
            };
            let attrs = out.entry(path.as_str().to_owned()).or_default();
            for t in extract_attributes(&registry, path.as_str(), &bytes, specs, Some(stat)) {
                attrs.insert(t.attribute, t.value);
            }
        }
    }
    for (file, attr, value) in &ctx.manual {
        if let Some(attrs) = out.get_mut(file) {
            attrs.insert(attr.clone(), value.clone());
        }
    }
    out
}

/// Files matching `pred` that `requester` may see, sorted.
pub fn oracle_scan(
    backends: &[Backend],
    specs: &SpecSet,
    pred: &Predicate,
    requester: &str,
    ctx: &OracleContext,
) -> Vec<String> {
    let ctx = OracleContext {
        require_synced: true,
        ..ctx.clone()
    };
    let all = oracle_triples(backends, specs, &ctx);
    let mut hits = BTreeSet::new();
    for (file, attrs) in &all {
        let Ok(path) = WorkspacePath::parse(file) else {
            continue;
        };
        if !ctx.visible(&path, requester) {
            continue;
        }
        if pred.matches_with(|a| attrs.get(a)) {
            hits.insert(file.clone());
        }
    }
    hits.into_iter().collect()
}
