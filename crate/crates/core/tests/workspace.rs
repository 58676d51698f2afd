mod common;

use std::collections::BTreeSet;

use common::{p, paths_on, Fixture};
use scispace::meu::local_write;
use scispace::sds::IndexMode;
use scispace::{Error, NamespaceTemplate, Scope};

#[test]
fn single_dtn_write_lands_on_backend_and_shard() {
    let f = Fixture::new(1, "");
    let s = f.session("alice", IndexMode::LwOffline);
    let rec = s.ws_write(&p("/public/a.sdf"), b"hello").unwrap();
    assert_eq!(rec.dtn_index, 0);
    assert_eq!(
        std::fs::read(f.cluster.backend_root(0).join("public/a.sdf")).unwrap(),
        b"hello"
    );
    let stored = f.cluster.server(0).dump().files;
    assert_eq!(stored.len(), 1);
    assert_eq!(stored[0].path.as_str(), "/public/a.sdf");
    assert!(stored[0].synced);
}

#[test]
fn read_stat_and_overwrite() {
    let f = Fixture::new(2, "");
    let s = f.session("alice", IndexMode::LwOffline);
    let path = p("/public/run/x.sdf");
    s.ws_write(&path, b"one").unwrap();
    s.ws_write(&path, b"second").unwrap();
    assert_eq!(s.ws_read(&path).unwrap(), b"second");
    assert_eq!(s.ws_stat(&path).unwrap().size, 6);
    let total: usize = (0..2).map(|i| f.cluster.server(i).dump().files.len()).sum();
    assert_eq!(total, 1);
    assert!(matches!(s.ws_read(&p("/public/never")), Err(Error::NotFound(_))));
    assert!(matches!(s.ws_stat(&p("/public/never")), Err(Error::NotFound(_))));
}

#[test]
fn unknown_namespace_is_rejected_before_any_write() {
    let f = Fixture::new(2, "");
    let s = f.session("alice", IndexMode::LwOffline);
    assert!(matches!(
        s.ws_write(&p("/nope/a"), b"x"),
        Err(Error::UnknownNamespace(_))
    ));
    for i in 0..2 {
        assert!(!f.cluster.backend_root(i).join("nope").exists());
    }
    assert!(matches!(s.ws_mkdir(&p("/nope/d")), Err(Error::UnknownNamespace(_))));
}

#[test]
fn readdir_merges_all_shards() {
    let f = Fixture::new(2, "");
    let s = f.session("alice", IndexMode::LwOffline);
    assert!(s.ws_readdir(&p("/public")).unwrap().is_empty());
    let mut written = BTreeSet::new();
    for dtn in 0..2 {
        for wp in paths_on(dtn, 2, "/public/run", 3) {
            s.ws_write(&wp, b"x").unwrap();
            written.insert(wp.file_name().to_owned());
        }
    }
    s.ws_write(&p("/public/run/sub/deep.sdf"), b"y").unwrap();
    written.insert("sub".into());
    let names: BTreeSet<String> = s.ws_readdir(&p("/public/run")).unwrap().into_iter().collect();
    assert_eq!(names, written);
    assert_eq!(s.ws_readdir(&p("/public")).unwrap(), ["run"]);
}

#[test]
fn mkdir_semantics() {
    let f = Fixture::new(2, "");
    let s = f.session("alice", IndexMode::LwOffline);
    s.ws_mkdir(&p("/public/empty")).unwrap();
    assert_eq!(s.ws_readdir(&p("/public")).unwrap(), ["empty"]);
    assert!(matches!(s.ws_mkdir(&p("/public/empty")), Err(Error::Exists(_))));
    let d = s.place(&p("/public/empty"));
    assert!(f.cluster.backend_root(d).join("public/empty").is_dir());
}

#[test]
fn scope_rules_for_foreign_collaborators() {
    let f = Fixture::new(2, "");
    let alice = f.session("alice", IndexMode::LwOffline);
    let bob = f.session("bob", IndexMode::LwOffline);
    alice
        .register_namespace(&NamespaceTemplate::new("mine", "alice", Scope::Local).unwrap())
        .unwrap();
    alice.ws_write(&p("/mine/secret.sdf"), b"s").unwrap();
    alice.ws_write(&p("/public/open.sdf"), b"o").unwrap();

    assert_eq!(alice.ws_read(&p("/mine/secret.sdf")).unwrap(), b"s");
    assert!(matches!(bob.ws_read(&p("/mine/secret.sdf")), Err(Error::NotVisible(_))));
    assert!(matches!(bob.ws_stat(&p("/mine/secret.sdf")), Err(Error::NotVisible(_))));
    assert!(bob.ws_readdir(&p("/mine")).unwrap().is_empty());
    assert_eq!(alice.ws_readdir(&p("/mine")).unwrap(), ["secret.sdf"]);
    assert_eq!(
        alice.ws_readdir(&p("/public")).unwrap(),
        bob.ws_readdir(&p("/public")).unwrap()
    );
}

#[test]
fn local_writes_are_invisible_until_exported() {
    let f = Fixture::new(1, "");
    let s = f.session("alice", IndexMode::LwOffline);
    local_write(s.backend(0), "public/lw.sdf", b"lw").unwrap();
    assert!(s.ws_readdir(&p("/public")).unwrap().is_empty());
    assert!(matches!(s.ws_read(&p("/public/lw.sdf")), Err(Error::NotFound(_))));
    let r = scispace::meu::meu_export(&s, 0, &Default::default()).unwrap();
    assert_eq!(r.exported, 1);
    assert_eq!(s.ws_readdir(&p("/public")).unwrap(), ["lw.sdf"]);
}

#[test]
fn readdir_fails_closed_when_a_shard_is_down() {
    let mut f = Fixture::new(2, "");
    let s = f.session("alice", IndexMode::LwOffline);
    s.ws_write(&p("/public/a"), b"x").unwrap();
    f.cluster.stop(1);
    assert!(matches!(s.ws_readdir(&p("/public")), Err(Error::ShardUnavailable(_))));
    f.cluster.restart(1).unwrap();
    assert_eq!(s.ws_readdir(&p("/public")).unwrap(), ["a"]);
}

#[test]
fn namespace_registration_reaches_every_shard() {
    let f = Fixture::new(3, "");
    let s = f.session("alice", IndexMode::LwOffline);
    let t = NamespaceTemplate::new("climate", "alice", Scope::Global).unwrap();
    s.register_namespace(&t).unwrap();
    s.register_namespace(&t).unwrap();
    for i in 0..3 {
        assert!(f.cluster.server(i).dump().namespaces.contains(&t));
    }
    let clash = NamespaceTemplate::new("climate", "alice", Scope::Local).unwrap();
    assert!(matches!(s.register_namespace(&clash), Err(Error::Conflict(_))));
}

#[test]
fn routing_soundness_audit() {
    let f = Fixture::new(3, "");
    let s = f.session("alice", IndexMode::LwOffline);
    for i in 0..30 {
        s.ws_write(&p(&format!("/public/d{}/f{i}", i % 4)), b"z").unwrap();
    }
    let mut seen = BTreeSet::new();
    for i in 0..3 {
        for r in f.cluster.server(i).dump().files {
            assert_eq!(r.dtn_index, i);
            assert_eq!(scispace::place(&r.path, 3).unwrap(), i);
            assert!(f.cluster.backend_root(i).join(r.path.backend_rel()).exists());
            assert!(seen.insert(r.path.to_string()), "{} on two shards", r.path);
        }
    }
    assert_eq!(seen.len(), 30);
}
