//! The `scispace` binary against real `serve-shard` processes.

use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use scispace::backend::{Backend, FlagMode};
use scispace::meu::{local_remove, local_write};
use scispace::sdf::{self, AttributeValue, SdfDocument};
use scispace::{place, WorkspacePath};

const BIN: &str = env!("CARGO_BIN_EXE_scispace");

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Site {
    dir: tempfile::TempDir,
    config: PathBuf,
    servers: Vec<Option<Child>>,
}

const DTNS: [&str; 2] = ["alpha", "beta"];

impl Site {
    fn new(mode: &str) -> Site {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("specs.txt"), "site:text\nlevel:int\n").unwrap();
        let mut cfg = "[collaboration]\nname = test\ncollaborator = alice\nflag_mode = marker-tree\n".to_owned();
        for id in DTNS {
            cfg += &format!(
                "\n[dtn {id}]\nhost = 127.0.0.1\nport = {}\nbackend_root = {id}\n",
                free_port()
            );
        }
        cfg += &format!("\n[sds]\nmode = {mode}\nspec_file = specs.txt\n");
        cfg += "\n[namespace lab]\nowner = alice\nscope = local\n";
        let config = dir.path().join("scispace.conf");
        std::fs::write(&config, cfg).unwrap();
        let mut site = Site {
            dir,
            config,
            servers: Vec::new(),
        };
        for i in 0..DTNS.len() {
            site.servers.push(None);
            site.start(i);
        }
        site
    }

    fn start(&mut self, i: usize) {
        let mut child = Command::new(BIN)
            .args([
                "--config",
                self.config.to_str().unwrap(),
                "serve-shard",
                "--dtn",
                DTNS[i],
            ])
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        assert!(line.starts_with("listening "), "{line:?}");
        self.servers[i] = Some(child);
    }

    fn kill(&mut self, i: usize) {
        if let Some(mut c) = self.servers[i].take() {
            c.kill().unwrap();
            c.wait().unwrap();
        }
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_as("alice", args)
    }

    fn run_as(&self, who: &str, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(["--config", self.config.to_str().unwrap(), "--as", who])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert_eq!(
            o.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn backend(&self, i: usize) -> Backend {
        Backend::new(self.dir.path().join(DTNS[i]), FlagMode::MarkerTree)
    }

    fn local(&self, name: &str, bytes: &[u8]) -> PathBuf {
        let p = self.dir.path().join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }
}

impl Drop for Site {
    fn drop(&mut self) {
        for i in 0..self.servers.len() {
            self.kill(i);
        }
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sdf_bytes(site: &str, level: i64) -> Vec<u8> {
    sdf::encode(&SdfDocument {
        attributes: vec![
            ("site".into(), AttributeValue::Text(site.into())),
            ("level".into(), AttributeValue::Int(level)),
        ],
        payload: vec![7; 32],
    })
    .unwrap()
}

#[test]
fn put_get_ls_stat_round_trip() {
    let site = Site::new("inline-sync");
    assert_eq!(site.ok(&["ls", "/public"]), "");

    let data: Vec<u8> = (0..200_000u32).map(|i| (i * 31 % 251) as u8).collect();
    let src = site.local("data.bin", &data);
    site.ok(&["put", "/public/run1/data.bin", s(&src)]);
    let got = site.run(&["get", "/public/run1/data.bin"]);
    assert_eq!(got.status.code(), Some(0));
    assert!(got.stdout == data, "bytes differ");
    let dst = site.dir.path().join("copy.bin");
    site.ok(&["get", "/public/run1/data.bin", s(&dst)]);
    assert!(std::fs::read(&dst).unwrap() == data);

    let stat = site.ok(&["stat", "/public/run1/data.bin"]);
    assert!(
        stat.contains("kind\tfile\n") && stat.contains("size\t200000\n") && stat.contains("owner\talice\n"),
        "{stat}"
    );
    site.ok(&["mkdir", "/public/empty"]);
    assert_eq!(site.ok(&["ls", "/public"]), "empty\nrun1\n");
    assert_eq!(site.ok(&["ls", "/public/run1"]), "data.bin\n");
    let ns = site.ok(&["namespaces"]);
    assert!(ns.contains("public\t") && ns.contains("lab\talice\tlocal"), "{ns}");
}

#[test]
fn scope_applies_across_invocations() {
    let site = Site::new("inline-sync");
    let src = site.local("n.txt", b"notes");
    site.ok(&["put", "/lab/n.txt", s(&src)]);
    assert_eq!(site.ok(&["ls", "/lab"]), "n.txt\n");
    let bob = site.run_as("bob", &["ls", "/lab"]);
    assert_eq!(bob.status.code(), Some(0));
    assert!(bob.stdout.is_empty());
    let bob = site.run_as("bob", &["get", "/lab/n.txt"]);
    assert_eq!(bob.status.code(), Some(1));
    site.ok(&["register-ns", "shared", "--scope", "global"]);
    let o = site.run_as("bob", &["put", "/shared/b.txt", s(&src)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(site.ok(&["ls", "/shared"]), "b.txt\n");
}

#[test]
fn tag_query_and_flush() {
    let site = Site::new("inline-async");
    for (i, name) in ["north", "south", "north"].iter().enumerate() {
        let src = site.local(&format!("f{i}.sdf"), &sdf_bytes(name, i as i64));
        site.ok(&["put", &format!("/public/obs/f{i}.sdf"), s(&src)]);
    }
    assert!(site.ok(&["flush"]).starts_with("indexed "));
    assert_eq!(
        site.ok(&["query", "site = \"north\""]),
        "/public/obs/f0.sdf\n/public/obs/f2.sdf\n"
    );
    assert_eq!(
        site.ok(&["query", "site = \"north\" and level > 0"]),
        "/public/obs/f2.sdf\n"
    );
    site.ok(&["tag", "/public/obs/f1.sdf", "quality=0.5"]);
    site.ok(&["tag", "/public/obs/f0.sdf", "run=7:text"]);
    assert_eq!(site.ok(&["query", "quality > 0.25"]), "/public/obs/f1.sdf\n");
    assert_eq!(site.ok(&["query", "run = \"7\""]), "/public/obs/f0.sdf\n");
    assert_eq!(site.ok(&["query", "run = 7"]), "");
    assert_eq!(site.run(&["query", "site = "]).status.code(), Some(1));
}

#[test]
fn export_publishes_local_writes() {
    let site = Site::new("lw-offline");
    let mut expected = Vec::new();
    for i in 0..6 {
        let wp = WorkspacePath::parse(&format!("/public/lw/f{i}.sdf")).unwrap();
        let d = place(&wp, DTNS.len()).unwrap();
        local_write(&site.backend(d), wp.backend_rel(), &sdf_bytes("east", i)).unwrap();
        expected.push(format!("f{i}.sdf"));
    }
    assert_eq!(site.ok(&["ls", "/public"]), "");
    let out = site.ok(&["export", "--index"]);
    let exported: u64 = out
        .lines()
        .map(|l| {
            l.split('\t')
                .find_map(|f| f.strip_prefix("exported="))
                .unwrap()
                .parse::<u64>()
                .unwrap()
        })
        .sum();
    assert_eq!(exported, 6, "{out}");
    assert_eq!(site.ok(&["ls", "/public/lw"]), expected.join("\n") + "\n");
    assert_eq!(site.ok(&["query", "site = \"east\""]).lines().count(), 6);
    let again = site.ok(&["export", "--dtn", "alpha"]);
    assert!(again.starts_with("alpha\texported=0\tframes=0"), "{again}");
}

#[test]
fn export_reports_an_unreachable_shard() {
    let mut site = Site::new("lw-offline");
    let wp = (0..)
        .map(|i| WorkspacePath::parse(&format!("/public/x{i}")).unwrap())
        .find(|w| place(w, 2).unwrap() == 1)
        .unwrap();
    local_write(&site.backend(1), wp.backend_rel(), b"x").unwrap();
    site.kill(1);
    let o = site.run(&["export", "--dtn", "beta"]);
    assert_ne!(o.status.code(), Some(0));
    site.start(1);
    site.ok(&["export", "--dtn", "beta"]);
    assert_eq!(site.ok(&["ls", "/public"]), format!("{}\n", wp.file_name()));
}

#[test]
fn scrub_needs_a_stopped_shard_and_drops_stale_records() {
    let mut site = Site::new("inline-sync");
    let wp = (0..)
        .map(|i| WorkspacePath::parse(&format!("/public/s{i}.dat")).unwrap())
        .find(|w| place(w, 2).unwrap() == 0)
        .unwrap();
    let src = site.local("s.dat", b"scrub me");
    site.ok(&["put", wp.as_str(), s(&src)]);

    let busy = site.run(&["scrub", "--dtn", "alpha"]);
    assert_eq!(busy.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&busy.stderr).contains("stop serve-shard"));

    site.kill(0);
    local_remove(&site.backend(0), wp.backend_rel()).unwrap();
    let dry = site.ok(&["scrub", "--dtn", "alpha", "--dry-run"]);
    assert!(dry.starts_with("checked=1\tstale=1\t"), "{dry}");
    let applied = site.ok(&["scrub", "--dtn", "alpha"]);
    assert!(applied.contains(&format!("stale\t{wp}")), "{applied}");
    assert!(site
        .ok(&["scrub", "--dtn", "0"])
        .starts_with("checked=0\tstale=0\tdrifted=0\torphaned=0"));
    site.start(0);
    assert_eq!(site.ok(&["ls", "/public"]), "");
}

#[test]
fn usage_and_user_errors_exit_1() {
    let site = Site::new("inline-sync");
    assert_eq!(site.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(site.run(&["get", "/public/missing"]).status.code(), Some(1));
    assert_eq!(site.run(&["ls", "/public/../etc"]).status.code(), Some(1));
    let help = Command::new(BIN).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));

    let env = Command::new(BIN)
        .env("SCISPACE_CONFIG", &site.config)
        .args(["ls", "/public"])
        .output()
        .unwrap();
    assert_eq!(env.status.code(), Some(0));
}
