//! Collaboration configuration: `key = value` lines under `[section]`
//! headers.
//!
//! ```text
//! [collaboration]
//! name = climate
//! collaborator = alice
//! flag_mode = marker-tree
//!
//! [dtn ornl]
//! host = 127.0.0.1
//! port = 7100
//! backend_root = data/ornl
//!
//! [sds]
//! mode = inline-async
//! flush_count = 64
//! flush_ms = 500
//! flush_bytes = 67108864
//! spec_file = specs.txt
//!
//! [namespace climate]
//! owner = alice
//! scope = global
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use scispace::backend::FlagMode;
use scispace::placement::assign_indices;
use scispace::sds::{IndexMode, QueueThresholds, SpecSet};
use scispace::shard::{ShardConfig, StoreOptions, DEFAULT_CALL_TIMEOUT};
use scispace::{DtnDescriptor, Error, NamespaceTemplate, Result, Scope, SessionOptions};

pub const CONFIG_ENV: &str = "SCISPACE_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtnConfig {
    pub id: String,
    pub host: String,
    pub port: u16,
    pub backend_root: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdsConfig {
    pub mode: IndexMode,
    pub thresholds: QueueThresholds,
    pub spec_file: Option<PathBuf>,
}

impl Default for SdsConfig {
    fn default() -> Self {
        SdsConfig {
            mode: IndexMode::LwOffline,
            thresholds: QueueThresholds::default(),
            spec_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollabConfig {
    pub name: String,
    pub collaborator: String,
    pub flag_mode: FlagMode,
    pub call_timeout: Duration,
    pub fsync: bool,
    /// Sorted by id; position is the DTN index.
    pub dtns: Vec<DtnConfig>,
    pub sds: SdsConfig,
    pub namespaces: Vec<NamespaceTemplate>,
}

fn err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("config line {line}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| err(line, format!("{key} must be a number, got {v:?}")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(err(line, format!("{key} must be true or false, got {v:?}"))),
    }
}

#[derive(Default)]
struct PartialDtn {
    id: String,
    line: usize,
    host: Option<String>,
    port: Option<u16>,
    backend_root: Option<PathBuf>,
}

#[derive(Default)]
struct PartialNs {
    name: String,
    line: usize,
    owner: Option<String>,
    scope: Option<Scope>,
}

enum Section {
    None,
    Collaboration,
    Dtn(usize),
    Sds,
    Namespace(usize),
}

impl CollabConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let resolve = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let mut name = None;
        let mut collaborator = None;
        let mut flag_mode = FlagMode::MarkerTree;
        let mut call_timeout = DEFAULT_CALL_TIMEOUT;
        let mut fsync = false;
        let mut sds = SdsConfig::default();
        let mut dtns: Vec<PartialDtn> = Vec::new();
        let mut nss: Vec<PartialNs> = Vec::new();
        let mut section = Section::None;

        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(h) = line.strip_prefix('[') {
                let h = h
                    .strip_suffix(']')
                    .ok_or_else(|| err(ln, "unterminated section header"))?
                    .trim();
                let (kind, arg) = match h.split_once(char::is_whitespace) {
                    Some((k, a)) => (k, a.trim()),
                    None => (h, ""),
                };
                section = match (kind, arg.is_empty()) {
                    ("collaboration", true) => Section::Collaboration,
                    ("sds", true) => Section::Sds,
                    ("dtn", false) => {
                        dtns.push(PartialDtn {
                            id: arg.to_owned(),
                            line: ln,
                            ..Default::default()
                        });
                        Section::Dtn(dtns.len() - 1)
                    }
                    ("namespace", false) => {
                        nss.push(PartialNs {
                            name: arg.to_owned(),
                            line: ln,
                            ..Default::default()
                        });
                        Section::Namespace(nss.len() - 1)
                    }
                    _ => return Err(err(ln, format!("unknown section [{h}]"))),
                };
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(ln, "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            match (&section, key) {
                (Section::None, _) => return Err(err(ln, "key outside any section")),
                (Section::Collaboration, "name") => name = Some(value.to_owned()),
                (Section::Collaboration, "collaborator") => collaborator = Some(value.to_owned()),
                (Section::Collaboration, "flag_mode") => flag_mode = value.parse().map_err(|e: Error| err(ln, e))?,
                (Section::Collaboration, "call_timeout_ms") => {
                    call_timeout = Duration::from_millis(parse_num(ln, key, value)?)
                }
                (Section::Collaboration, "fsync") => fsync = parse_bool(ln, key, value)?,
                (Section::Dtn(d), "host") => dtns[*d].host = Some(value.to_owned()),
                (Section::Dtn(d), "port") => dtns[*d].port = Some(parse_num(ln, key, value)?),
                (Section::Dtn(d), "backend_root") => dtns[*d].backend_root = Some(resolve(value)),
                (Section::Sds, "mode") => sds.mode = value.parse().map_err(|e: Error| err(ln, e))?,
                (Section::Sds, "flush_count") => sds.thresholds.flush_count = parse_num(ln, key, value)?,
                (Section::Sds, "flush_ms") => sds.thresholds.flush_ms = parse_num(ln, key, value)?,
                (Section::Sds, "flush_bytes") => sds.thresholds.flush_bytes = parse_num(ln, key, value)?,
                (Section::Sds, "spec_file") => sds.spec_file = Some(resolve(value)),
                (Section::Namespace(n), "owner") => nss[*n].owner = Some(value.to_owned()),
                (Section::Namespace(n), "scope") => nss[*n].scope = Some(value.parse().map_err(|e: Error| err(ln, e))?),
                _ => return Err(err(ln, format!("unknown key {key:?}"))),
            }
        }

        let collaborator = collaborator.ok_or_else(|| Error::Config("[collaboration] needs collaborator".into()))?;
        let mut out_dtns = Vec::with_capacity(dtns.len());
        for d in dtns {
            let missing = |k: &str| err(d.line, format!("[dtn {}] needs {k}", d.id));
            out_dtns.push(DtnConfig {
                host: d.host.ok_or_else(|| missing("host"))?,
                port: d.port.ok_or_else(|| missing("port"))?,
                backend_root: d.backend_root.ok_or_else(|| missing("backend_root"))?,
                id: d.id,
            });
        }
        if out_dtns.is_empty() {
            return Err(Error::Config("at least one [dtn <id>] section is required".into()));
        }
        out_dtns.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = out_dtns.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Config(format!("duplicate dtn id {:?}", w[0].id)));
        }
        let namespaces = nss
            .into_iter()
            .map(|n| {
                NamespaceTemplate::new(
                    n.name.clone(),
                    n.owner.unwrap_or_else(|| collaborator.clone()),
                    n.scope.unwrap_or(Scope::Global),
                )
                .map_err(|e| err(n.line, e))
            })
            .collect::<Result<_>>()?;
        Ok(CollabConfig {
            name: name.unwrap_or_else(|| "scispace".into()),
            collaborator,
            flag_mode,
            call_timeout,
            fsync,
            dtns: out_dtns,
            sds,
            namespaces,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// `explicit`, else `$SCISPACE_CONFIG`.
    pub fn locate(explicit: Option<&Path>) -> Result<PathBuf> {
        match explicit {
            Some(p) => Ok(p.to_owned()),
            None => std::env::var_os(CONFIG_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| Error::Config(format!("no --config given and {CONFIG_ENV} unset"))),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "[collaboration]\nname = {}\ncollaborator = {}\nflag_mode = {}\ncall_timeout_ms = {}\nfsync = {}\n",
            self.name,
            self.collaborator,
            match self.flag_mode {
                FlagMode::MarkerTree => "marker-tree",
                FlagMode::NativeXattr => "native-xattr",
            },
            self.call_timeout.as_millis(),
            self.fsync,
        );
        for d in &self.dtns {
            s += &format!(
                "\n[dtn {}]\nhost = {}\nport = {}\nbackend_root = {}\n",
                d.id,
                d.host,
                d.port,
                d.backend_root.display()
            );
        }
        let t = &self.sds.thresholds;
        s += &format!(
            "\n[sds]\nmode = {}\nflush_count = {}\nflush_ms = {}\nflush_bytes = {}\n",
            self.sds.mode, t.flush_count, t.flush_ms, t.flush_bytes
        );
        if let Some(f) = &self.sds.spec_file {
            s += &format!("spec_file = {}\n", f.display());
        }
        for n in &self.namespaces {
            s += &format!("\n[namespace {}]\nowner = {}\nscope = {}\n", n.name, n.owner, n.scope);
        }
        s
    }

    pub fn specs(&self) -> Result<SpecSet> {
        match &self.sds.spec_file {
            None => Ok(SpecSet::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("read {}: {e}", p.display())))?;
                SpecSet::parse(&text)
            }
        }
    }

    pub fn endpoint(&self, dtn: usize) -> Result<SocketAddr> {
        let d = &self.dtns[dtn];
        (d.host.as_str(), d.port)
            .to_socket_addrs()
            .map_err(|e| Error::Config(format!("resolve {}:{}: {e}", d.host, d.port)))?
            .next()
            .ok_or_else(|| Error::Config(format!("{}:{} resolves to nothing", d.host, d.port)))
    }

    pub fn descriptors(&self) -> Result<Vec<DtnDescriptor>> {
        let ds = (0..self.dtns.len())
            .map(|i| {
                Ok(DtnDescriptor {
                    index: i,
                    id: self.dtns[i].id.clone(),
                    endpoint: self.endpoint(i)?,
                    backend_root: self.dtns[i].backend_root.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        assign_indices(ds)
    }

    pub fn session_options(&self) -> SessionOptions {
        SessionOptions {
            mode: self.sds.mode,
            flag_mode: self.flag_mode,
            call_timeout: self.call_timeout,
        }
    }

    pub fn shard_config(&self, dtn: usize) -> Result<ShardConfig> {
        let d = &self.dtns[dtn];
        let mut c = ShardConfig::new(dtn, self.dtns.len(), &d.backend_root);
        c.flag_mode = self.flag_mode;
        c.specs = self.specs()?;
        c.thresholds = self.sds.thresholds;
        c.store = StoreOptions {
            fsync: self.fsync,
            ..Default::default()
        };
        Ok(c)
    }

    /// Index of the DTN named `id`, or a numeric index.
    pub fn dtn_index(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.dtns.iter().position(|d| d.id == key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.dtns.len() => Ok(i),
            _ => Err(Error::Config(format!("no dtn {key:?} in configuration"))),
        }
    }
}
