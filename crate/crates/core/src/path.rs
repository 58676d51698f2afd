//! Canonical workspace paths.
//!
//! Every shared entry is addressed as `/<namespace>/<seg>/.../<seg>`. The
//! first segment selects the namespace; the canonical text form is also the
//! placement key.

use std::fmt;

use crate::error::{Error, Result};

/// Directory name reserved for internal state inside every backend root.
pub const RESERVED_DIR: &str = ".scispace";

#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorkspacePath {
    // Kept first so the derived ordering is the ordering of the display form.
    display: String,
    namespace: String,
    rel: Vec<String>,
}

pub(crate) fn validate_segment(seg: &str) -> std::result::Result<(), &'static str> {
    if seg.is_empty() {
        return Err("empty segment");
    }
    if seg == "." || seg == ".." {
        return Err("traversal segment");
    }
    if seg.contains('/') {
        return Err("segment contains '/'");
    }
    if seg.contains('\0') {
        return Err("segment contains NUL");
    }
    Ok(())
}

impl WorkspacePath {
    /// Parses raw text into a canonical path. Repeated slashes collapse;
    /// `.` and `..` segments are rejected rather than resolved.
    pub fn parse(raw: &str) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::MalformedPath("empty path".into()));
        }
        if raw.contains('\0') {
            return Err(Error::MalformedPath(format!("{raw:?}: contains NUL")));
        }
        let mut segs = raw.split('/').filter(|s| !s.is_empty());
        let namespace = segs
            .next()
            .ok_or_else(|| Error::MalformedPath(format!("{raw:?}: missing namespace segment")))?;
        let rel: Vec<&str> = segs.collect();
        Self::from_parts(namespace, &rel).map_err(|e| match e {
            Error::MalformedPath(m) => Error::MalformedPath(format!("{raw:?}: {m}")),
            other => other,
        })
    }

    pub fn from_parts<S: AsRef<str>>(namespace: &str, rel: &[S]) -> Result<Self> {
        validate_segment(namespace).map_err(|m| Error::MalformedPath(m.into()))?;
        if namespace == RESERVED_DIR {
            return Err(Error::MalformedPath(format!("namespace {RESERVED_DIR} is reserved")));
        }
        let mut display = String::with_capacity(namespace.len() + 1 + rel.len() * 8);
        display.push('/');
        display.push_str(namespace);
        let mut owned = Vec::with_capacity(rel.len());
        for seg in rel {
            let seg = seg.as_ref();
            validate_segment(seg).map_err(|m| Error::MalformedPath(m.into()))?;
            display.push('/');
            display.push_str(seg);
            owned.push(seg.to_owned());
        }
        Ok(WorkspacePath {
            display,
            namespace: namespace.to_owned(),
            rel: owned,
        })
    }

    /// Interprets a backend-relative path (`<namespace>/<rel...>`).
    pub fn from_backend_rel(rel_path: &str) -> Result<Self> {
        Self::parse(&format!("/{rel_path}"))
    }

    pub fn as_str(&self) -> &str {
        &self.display
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn rel(&self) -> &[String] {
        &self.rel
    }

    /// True when the path names the namespace itself.
    pub fn is_namespace_root(&self) -> bool {
        self.rel.is_empty()
    }

    /// Path relative to a backend root: `<namespace>/<rel...>`.
    pub fn backend_rel(&self) -> &str {
        &self.display[1..]
    }

    pub fn file_name(&self) -> &str {
        self.rel.last().map(String::as_str).unwrap_or(&self.namespace)
    }

    pub fn parent(&self) -> Option<WorkspacePath> {
        if self.rel.is_empty() {
            return None;
        }
        Self::from_parts(&self.namespace, &self.rel[..self.rel.len() - 1]).ok()
    }

    pub fn join(&self, seg: &str) -> Result<WorkspacePath> {
        let mut rel = self.rel.clone();
        rel.push(seg.to_owned());
        Self::from_parts(&self.namespace, &rel)
    }

    /// If `self` lies strictly below `dir`, the name of the child of `dir`
    /// that contains it.
    pub fn child_of<'a>(&'a self, dir: &WorkspacePath) -> Option<&'a str> {
        if self.namespace != dir.namespace || self.rel.len() <= dir.rel.len() {
            return None;
        }
        if self.rel[..dir.rel.len()] != dir.rel[..] {
            return None;
        }
        Some(&self.rel[dir.rel.len()])
    }
}

impl fmt::Display for WorkspacePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display)
    }
}

impl fmt::Debug for WorkspacePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "WorkspacePath({})", self.display)
    }
}

impl std::str::FromStr for WorkspacePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn collapses_repeated_slashes() {
        let p = WorkspacePath::parse("/climate/a//b.sdf").unwrap();
        assert_eq!(p.namespace(), "climate");
        assert_eq!(p.rel(), ["a", "b.sdf"]);
        assert_eq!(p.as_str(), "/climate/a/b.sdf");
    }

    #[test]
    fn rejects_traversal() {
        assert!(matches!(
            WorkspacePath::parse("/climate/../x"),
            Err(Error::MalformedPath(_))
        ));
        assert!(matches!(
            WorkspacePath::parse("/climate/./x"),
            Err(Error::MalformedPath(_))
        ));
    }

    #[test]
    fn rejects_empty_nul_and_missing_namespace() {
        for raw in ["", "/", "///", "/a/b\0c", "/.scispace/x"] {
            assert!(
                matches!(WorkspacePath::parse(raw), Err(Error::MalformedPath(_))),
                "{raw:?}"
            );
        }
    }

    #[test]
    fn display_round_trips() {
        let p = WorkspacePath::parse("/public/run1/out.sdf").unwrap();
        assert_eq!(p.to_string(), "/public/run1/out.sdf");
        assert_eq!(WorkspacePath::parse(&p.to_string()).unwrap(), p);
        assert_eq!(p.backend_rel(), "public/run1/out.sdf");
    }

    #[test]
    fn child_of_reports_immediate_child() {
        let dir = WorkspacePath::parse("/public/run").unwrap();
        let deep = WorkspacePath::parse("/public/run/a/b").unwrap();
        assert_eq!(deep.child_of(&dir), Some("a"));
        assert_eq!(dir.child_of(&dir), None);
        let other = WorkspacePath::parse("/public/runner/a").unwrap();
        assert_eq!(other.child_of(&dir), None);
        let ns = WorkspacePath::parse("/public").unwrap();
        assert_eq!(dir.child_of(&ns), Some("run"));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(segs in proptest::collection::vec("[a-zA-Z0-9._-]{1,8}|/", 1..10)) {
            let raw: String = segs.iter().map(|s| format!("/{s}")).collect();
            if let Ok(p) = WorkspacePath::parse(&raw) {
                let again = WorkspacePath::parse(p.as_str()).unwrap();
                prop_assert_eq!(&again, &p);
                prop_assert_eq!(again.as_str(), p.as_str());
            }
        }
    }
}
