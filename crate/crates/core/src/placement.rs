//! Pathname-hash placement of entries onto data transfer nodes.

use std::net::SocketAddr;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::path::WorkspacePath;

const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
const FNV_PRIME: u64 = 1099511628211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET_BASIS, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// DTN index responsible for `path` in a collaboration of `dtn_count` DTNs.
pub fn place(path: &WorkspacePath, dtn_count: usize) -> Result<usize> {
    if dtn_count == 0 {
        return Err(Error::ZeroDtnCount);
    }
    Ok((fnv1a64(path.as_str().as_bytes()) % dtn_count as u64) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DtnDescriptor {
    pub index: usize,
    pub id: String,
    pub endpoint: SocketAddr,
    pub backend_root: PathBuf,
}

/// Assigns dense indices in lexicographic order of `id`, so placement does
/// not depend on the order DTNs were listed in configuration.
pub fn assign_indices(mut dtns: Vec<DtnDescriptor>) -> Result<Vec<DtnDescriptor>> {
    if dtns.is_empty() {
        return Err(Error::ZeroDtnCount);
    }
    dtns.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in dtns.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::Config(format!("duplicate dtn id {:?}", pair[0].id)));
        }
    }
    for (i, d) in dtns.iter_mut().enumerate() {
        d.index = i;
    }
    Ok(dtns)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Published FNV-1a 64-bit vectors, cross-checked with an independent
    // implementation.
    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 14695981039346656037);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        assert_eq!(fnv1a64(b"/public/f.sdf"), 0x76e5834bc76177e7);
    }

    #[test]
    fn place_modulo_one_is_zero() {
        let p = WorkspacePath::parse("/public/anything/at/all").unwrap();
        assert_eq!(place(&p, 1).unwrap(), 0);
        assert!(matches!(place(&p, 0), Err(Error::ZeroDtnCount)));
    }

    #[test]
    fn namespace_is_part_of_the_key() {
        let a = WorkspacePath::parse("/a/f").unwrap();
        let b = WorkspacePath::parse("/b/f").unwrap();
        assert_ne!(fnv1a64(a.as_str().as_bytes()), fnv1a64(b.as_str().as_bytes()));
    }

    #[test]
    fn indices_follow_id_order() {
        let mk = |id: &str| DtnDescriptor {
            index: 99,
            id: id.into(),
            endpoint: "127.0.0.1:1".parse().unwrap(),
            backend_root: PathBuf::from("/tmp"),
        };
        let out = assign_indices(vec![mk("zeta"), mk("alpha"), mk("mid")]).unwrap();
        let ids: Vec<_> = out.iter().map(|d| (d.index, d.id.as_str())).collect();
        assert_eq!(ids, [(0, "alpha"), (1, "mid"), (2, "zeta")]);
        assert!(assign_indices(vec![mk("x"), mk("x")]).is_err());
        assert!(assign_indices(vec![]).is_err());
    }
}
