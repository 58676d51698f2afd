//! A unified collaboration workspace over several data-transfer-node
//! backends: pathname-hash placement, per-node metadata and discovery
//! shards reached over a small binary protocol, a local-write export
//! utility, and an attribute query language.

pub mod backend;
pub mod cluster;
pub mod error;
pub mod meu;
pub mod path;
pub mod placement;
pub mod protocol;
pub mod query;
pub mod record;
pub mod sdf;
pub mod sds;
pub mod shard;
pub mod workspace;

pub use error::{Error, Result};
pub use path::WorkspacePath;
pub use placement::{place, DtnDescriptor};
pub use record::{EntryKind, FileRecord, NamespaceTemplate, Scope};
pub use workspace::{Session, SessionOptions};
