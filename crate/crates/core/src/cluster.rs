//! In-process collaboration: N shard services on loopback, each with its
//! own backend directory under one root. Used by tests and benchmarks.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use crate::backend::{FlagMode, FlagStore};
use crate::error::{Error, IoContext, Result};
use crate::placement::DtnDescriptor;
use crate::sds::{IndexMode, QueueThresholds, SpecSet};
use crate::shard::{ShardConfig, ShardServer, StoreOptions};
use crate::workspace::{Session, SessionOptions};

#[derive(Debug, Clone)]
pub struct ClusterOptions {
    pub dtns: usize,
    pub specs: SpecSet,
    pub thresholds: QueueThresholds,
    /// `None` picks extended attributes when the filesystem supports them.
    pub flag_mode: Option<FlagMode>,
    pub store: StoreOptions,
    pub drain_worker: bool,
    pub workers: usize,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            dtns: 1,
            specs: SpecSet::default(),
            thresholds: QueueThresholds::default(),
            flag_mode: None,
            store: StoreOptions::default(),
            drain_worker: true,
            workers: 4,
        }
    }
}

#[derive(Debug)]
pub struct LocalCluster {
    dtns: Vec<DtnDescriptor>,
    servers: Vec<Option<ShardServer>>,
    flag_mode: FlagMode,
    opts: ClusterOptions,
}

impl LocalCluster {
    /// Backends go to `<root>/dtn<i>`.
    pub fn start(root: &Path, opts: ClusterOptions) -> Result<Self> {
        if opts.dtns == 0 {
            return Err(Error::ZeroDtnCount);
        }
        std::fs::create_dir_all(root).ctx(|| format!("create {}", root.display()))?;
        let flag_mode = opts.flag_mode.unwrap_or_else(|| {
            if FlagStore::xattr_supported(root) {
                FlagMode::NativeXattr
            } else {
                FlagMode::MarkerTree
            }
        });
        let mut cluster = LocalCluster {
            dtns: Vec::new(),
            servers: Vec::new(),
            flag_mode,
            opts,
        };
        for i in 0..cluster.opts.dtns {
            let backend_root: PathBuf = root.join(format!("dtn{i}"));
            std::fs::create_dir_all(&backend_root).ctx(|| format!("create {}", backend_root.display()))?;
            let server = cluster.spawn(i, &backend_root, "127.0.0.1:0".parse().unwrap())?;
            cluster.dtns.push(DtnDescriptor {
                index: i,
                id: format!("dtn{i}"),
                endpoint: server.local_addr(),
                backend_root,
            });
            cluster.servers.push(Some(server));
        }
        Ok(cluster)
    }

    fn spawn(&self, i: usize, backend_root: &Path, bind: SocketAddr) -> Result<ShardServer> {
        let mut cfg = ShardConfig::new(i, self.opts.dtns, backend_root);
        cfg.flag_mode = self.flag_mode;
        cfg.specs = self.opts.specs.clone();
        cfg.thresholds = self.opts.thresholds;
        cfg.store = self.opts.store;
        cfg.drain_worker = self.opts.drain_worker;
        cfg.workers = self.opts.workers;
        ShardServer::start(cfg, bind)
    }

    pub fn dtns(&self) -> &[DtnDescriptor] {
        &self.dtns
    }

    pub fn flag_mode(&self) -> FlagMode {
        self.flag_mode
    }

    pub fn backend_root(&self, i: usize) -> &Path {
        &self.dtns[i].backend_root
    }

    pub fn session(&self, collaborator: &str, mode: IndexMode) -> Result<Session> {
        Session::new(
            collaborator,
            self.dtns.clone(),
            SessionOptions {
                mode,
                flag_mode: self.flag_mode,
                ..Default::default()
            },
        )
    }

    /// The running server of DTN `i`. Panics if it was stopped.
    pub fn server(&self, i: usize) -> &ShardServer {
        self.servers[i].as_ref().expect("shard is stopped")
    }

    pub fn is_running(&self, i: usize) -> bool {
        self.servers[i].is_some()
    }

    pub fn stop(&mut self, i: usize) {
        if let Some(s) = self.servers[i].take() {
            s.shutdown();
        }
    }

    /// Restarts DTN `i` on its previous port from its persisted state.
    pub fn restart(&mut self, i: usize) -> Result<()> {
        self.stop(i);
        let d = &self.dtns[i];
        let server = self.spawn(i, &d.backend_root.clone(), d.endpoint)?;
        self.servers[i] = Some(server);
        Ok(())
    }
}
