#![allow(dead_code)]

use scispace::cluster::{ClusterOptions, LocalCluster};
use scispace::sdf::{self, AttributeValue, SdfDocument};
use scispace::sds::{IndexMode, SpecSet};
use scispace::{Session, WorkspacePath};

pub fn p(s: &str) -> WorkspacePath {
    WorkspacePath::parse(s).unwrap()
}

pub fn sdf_file(attrs: &[(&str, AttributeValue)], payload: &[u8]) -> Vec<u8> {
    sdf::encode(&SdfDocument {
        attributes: attrs.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
        payload: payload.to_vec(),
    })
    .unwrap()
}

pub fn text(s: &str) -> AttributeValue {
    AttributeValue::Text(s.into())
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub cluster: LocalCluster,
}

impl Fixture {
    pub fn new(dtns: usize, specs: &str) -> Fixture {
        Self::with(ClusterOptions {
            dtns,
            specs: SpecSet::parse(specs).unwrap(),
            ..Default::default()
        })
    }

    pub fn with(opts: ClusterOptions) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let cluster = LocalCluster::start(dir.path(), opts).unwrap();
        Fixture { dir, cluster }
    }

    pub fn session(&self, who: &str, mode: IndexMode) -> Session {
        self.cluster.session(who, mode).unwrap()
    }
}

/// Paths under `/public/` that place on DTN `dtn` of `n`.
pub fn paths_on(dtn: usize, n: usize, prefix: &str, count: usize) -> Vec<WorkspacePath> {
    (0..)
        .map(|i| p(&format!("{prefix}/f{i}.sdf")))
        .filter(|wp| scispace::place(wp, n).unwrap() == dtn)
        .take(count)
        .collect()
}
