//! Per-DTN metadata and discovery shards: durable store, TCP service and
//! client.

mod client;
mod service;
mod store;

pub use client::{ShardClient, DEFAULT_CALL_TIMEOUT};
pub use service::{ShardConfig, ShardServer};
pub use store::{
    frame_entry, shard_dir, ShardDump, ShardStore, StoreOptions, LOG_MAGIC, MAX_BATCH, SNAPSHOT_MAGIC, STORE_VERSION,
};
