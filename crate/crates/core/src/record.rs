use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::path::{validate_segment, WorkspacePath, RESERVED_DIR};

pub const PUBLIC_NAMESPACE: &str = "public";
pub const SYSTEM_OWNER: &str = "system";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntryKind {
    File,
    Directory,
}

/// Workspace metadata for one shared entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileRecord {
    pub path: WorkspacePath,
    pub kind: EntryKind,
    pub size: u64,
    pub owner: String,
    /// Milliseconds since the Unix epoch.
    pub mtime: i64,
    pub dtn_index: usize,
    pub synced: bool,
}

impl FileRecord {
    pub fn namespace(&self) -> &str {
        self.path.namespace()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    /// Entries are visible only to their owner.
    Local,
    Global,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Local => "local",
            Scope::Global => "global",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(Scope::Local),
            "global" => Ok(Scope::Global),
            other => Err(Error::Config(format!("unknown scope {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NamespaceTemplate {
    pub name: String,
    pub owner: String,
    pub scope: Scope,
}

impl NamespaceTemplate {
    pub fn new(name: impl Into<String>, owner: impl Into<String>, scope: Scope) -> Result<Self> {
        let name = name.into();
        validate_segment(&name).map_err(|m| Error::BadName(format!("{name:?}: {m}")))?;
        if name == RESERVED_DIR {
            return Err(Error::BadName(format!("{name:?} is reserved")));
        }
        Ok(NamespaceTemplate {
            name,
            owner: owner.into(),
            scope,
        })
    }

    /// The namespace every collaboration starts with.
    pub fn public() -> Self {
        NamespaceTemplate {
            name: PUBLIC_NAMESPACE.into(),
            owner: SYSTEM_OWNER.into(),
            scope: Scope::Global,
        }
    }

    /// Visibility rule shared by listing, reads and queries.
    pub fn visible(&self, record: &FileRecord, requester: &str) -> bool {
        record.synced && (self.scope == Scope::Global || record.owner == requester)
    }
}
