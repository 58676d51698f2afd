//! Argument parsing and command dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use scispace::backend::Backend;
use scispace::meu::{meu_export, ExportOptions};
use scispace::query::parse_query;
use scispace::sdf::AttributeValue;
use scispace::shard::{ShardServer, StoreOptions};
use scispace::{Error, NamespaceTemplate, Result, Scope, Session, WorkspacePath};

use crate::bench::{self, BenchEnv, HitRatioParams, ModesParams};
use crate::config::CollabConfig;
use crate::report::BenchReport;
use crate::scrub::scrub;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "scispace",
    version,
    about = "Collaboration workspace over data transfer nodes"
)]
struct Cli {
    /// Collaboration config file; defaults to $SCISPACE_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Act as this collaborator instead of the one in the config.
    #[arg(long = "as", global = true, value_name = "COLLABORATOR")]
    as_user: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the shard service of one DTN until killed.
    ServeShard {
        /// DTN id or index.
        #[arg(long)]
        dtn: String,
    },
    /// Copy a local file into the workspace.
    Put { path: String, local: PathBuf },
    /// Copy a workspace file out; to stdout without LOCAL.
    Get { path: String, local: Option<PathBuf> },
    /// List the children of a workspace directory.
    Ls { path: String },
    /// Show the record of a workspace entry.
    Stat { path: String },
    /// Create a workspace directory.
    Mkdir { path: String },
    /// Export local writes on DTN backends to the workspace.
    Export {
        /// DTN id or index; every DTN when omitted.
        #[arg(long)]
        dtn: Vec<String>,
        /// Backend-relative subtree to export.
        #[arg(long, default_value = "")]
        start: String,
        /// Index the exported subtree offline afterwards.
        #[arg(long)]
        index: bool,
    },
    /// Attach a manual attribute: NAME=VALUE, optionally suffixed :int,
    /// :float or :text.
    Tag { path: String, assignment: String },
    /// Find files by attribute, e.g. 'site = "north" and level > 2'.
    Query { query: String },
    /// Drain every shard's pending index queue.
    Flush,
    /// Reconcile a stopped shard with its backend.
    Scrub {
        #[arg(long)]
        dtn: String,
        /// Report without changing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// List registered namespaces.
    Namespaces,
    /// Register a namespace owned by the acting collaborator.
    RegisterNs {
        name: String,
        #[arg(long, default_value = "global")]
        scope: String,
    },
    /// Run a benchmark and print its rows.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Meu,
    Modes,
    Hitratio,
    Io,
    Scaling,
    All,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(value_enum)]
    experiment: Experiment,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Scratch directory; a temporary one when omitted.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Write rows here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// meu: file counts.
    #[arg(long, value_delimiter = ',', default_value = "5000,10000,20000,40000")]
    counts: Vec<usize>,
    /// Repetitions per point.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// modes: attribute counts.
    #[arg(long, value_delimiter = ',', default_value = "0,5,20")]
    attrs: Vec<usize>,
    /// modes and hitratio: corpus size.
    #[arg(long, default_value_t = 2000)]
    files: usize,
    /// modes: payload bytes per file.
    #[arg(long, default_value_t = 64 * 1024)]
    payload: usize,
    /// hitratio: ratios of matching tuples.
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
    ratios: Vec<f64>,
    /// hitratio: queries per (attribute, ratio).
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    /// io: block sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "4096,16384,65536,262144,524288")]
    blocks: Vec<usize>,
    /// io: bytes moved per block size.
    #[arg(long, default_value_t = 32 * 1024 * 1024)]
    total_bytes: usize,
    /// scaling: concurrent sessions.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    sessions: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    dtns: usize,
}

fn wpath(s: &str) -> Result<WorkspacePath> {
    WorkspacePath::parse(s)
}

/// `NAME=VALUE[:type]`. Without a type, integers and floats are recognized
/// and anything else is text.
pub fn parse_assignment(a: &str) -> Result<(String, AttributeValue)> {
    let (name, raw) = a
        .split_once('=')
        .ok_or_else(|| Error::BadRequest(format!("expected NAME=VALUE, got {a:?}")))?;
    if name.is_empty() {
        return Err(Error::BadRequest("empty attribute name".into()));
    }
    let typed = raw
        .rsplit_once(':')
        .and_then(|(v, t)| scispace::sdf::ValueType::from_name(t).map(|t| (v, t)));
    let bad = |v: &str, t| Error::BadRequest(format!("{v:?} is not a valid {t}"));
    let value = match typed {
        Some((v, scispace::sdf::ValueType::Int)) => AttributeValue::Int(v.parse().map_err(|_| bad(v, "int"))?),
        Some((v, scispace::sdf::ValueType::Float)) => AttributeValue::Float(v.parse().map_err(|_| bad(v, "float"))?),
        Some((v, scispace::sdf::ValueType::Text)) => AttributeValue::Text(v.into()),
        None => {
            if let Ok(i) = raw.parse::<i64>() {
                AttributeValue::Int(i)
            } else if let Ok(f) = raw.parse::<f64>() {
                AttributeValue::Float(f)
            } else {
                AttributeValue::Text(raw.into())
            }
        }
    };
    Ok((name.to_owned(), value))
}

struct Ctx {
    cfg: CollabConfig,
    who: String,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Ctx> {
        let path = CollabConfig::locate(cli.config.as_deref())?;
        let cfg = CollabConfig::load(&path)?;
        let who = cli.as_user.clone().unwrap_or_else(|| cfg.collaborator.clone());
        Ok(Ctx { cfg, who })
    }

    /// A session with the configured namespaces registered.
    fn session(&self) -> Result<Session> {
        let s = Session::new(&self.who, self.cfg.descriptors()?, self.cfg.session_options())?;
        if !self.cfg.namespaces.is_empty() {
            let known = s.list_namespaces()?;
            for t in &self.cfg.namespaces {
                if !known.contains(t) {
                    s.register_namespace(t)?;
                }
            }
        }
        Ok(s)
    }
}

fn write_rows(report: &BenchReport, out: &mut dyn Write) -> Result<()> {
    out.write_all(report.to_rows().as_bytes())
        .map_err(|e| Error::io("write rows", e))
}

fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let mut env = BenchEnv::new(a.root.as_deref(), a.seed)?;
    let want = |e: Experiment| a.experiment == e || a.experiment == Experiment::All;
    let mut reports = Vec::new();
    if want(Experiment::Meu) {
        reports.push(bench::run_bench_meu(&mut env, &a.counts, a.reps)?);
    }
    if want(Experiment::Modes) {
        let p = ModesParams {
            attr_counts: a.attrs.clone(),
            files: a.files,
            payload: a.payload,
            reps: a.reps,
            dtns: a.dtns,
        };
        reports.push(bench::run_bench_modes(&mut env, &p)?);
    }
    if want(Experiment::Hitratio) {
        let p = HitRatioParams {
            ratios: a.ratios.clone(),
            files: a.files,
            queries: a.queries,
            dtns: a.dtns,
        };
        reports.push(bench::run_bench_hitratio(&mut env, &p)?);
    }
    if want(Experiment::Io) {
        reports.push(bench::run_bench_io(&mut env, &a.blocks, a.total_bytes)?);
    }
    if want(Experiment::Scaling) {
        reports.push(bench::run_bench_scaling(&mut env, &a.sessions, a.files / 4, a.dtns)?);
    }
    let mut file;
    let sink: &mut dyn Write = match &a.out {
        Some(p) => {
            file = std::fs::File::create(p).map_err(|e| Error::io(format!("create {}", p.display()), e))?;
            &mut file
        }
        None => out,
    };
    for r in &reports {
        eprint!("{r}");
        write_rows(r, sink)?;
    }
    Ok(())
}

fn export(ctx: &Ctx, dtns: &[String], start: &str, index: bool, out: &mut dyn Write) -> Result<bool> {
    let s = ctx.session()?;
    let targets: Vec<usize> = if dtns.is_empty() {
        (0..s.dtn_count()).collect()
    } else {
        dtns.iter().map(|d| ctx.cfg.dtn_index(d)).collect::<Result<_>>()?
    };
    let mut complete = true;
    for d in targets {
        let r = meu_export(
            &s,
            d,
            &ExportOptions {
                start_rel: start.to_owned(),
                index,
                ..Default::default()
            },
        )?;
        let p = |e| Error::io("write output", e);
        writeln!(
            out,
            "{}\texported={}\tframes={}\tdirs_visited={}\tdirs_skipped={}\tmisplaced={}\tunregistered={}\tfailed={}\telapsed_ms={:.3}",
            ctx.cfg.dtns[d].id,
            r.exported,
            r.frames_sent,
            r.scan.dirs_visited,
            r.scan.dirs_skipped,
            r.misplaced.len(),
            r.unregistered.len(),
            r.failed.len(),
            r.elapsed_ms
        )
        .map_err(p)?;
        for (shard, e) in &r.failed {
            eprintln!("export to shard {shard} failed: {e}");
        }
        complete &= !r.is_partial();
    }
    Ok(complete)
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let io = |e| Error::io("write output", e);
    if let Cmd::Bench(a) = &cli.cmd {
        run_bench(a, out)?;
        return Ok(EXIT_OK);
    }
    let ctx = Ctx::load(cli)?;
    match &cli.cmd {
        Cmd::Bench(_) => unreachable!(),
        Cmd::ServeShard { dtn } => {
            let i = ctx.cfg.dtn_index(dtn)?;
            let server = ShardServer::start(ctx.cfg.shard_config(i)?, ctx.cfg.endpoint(i)?)?;
            log::info!("dtn {} serving on {}", ctx.cfg.dtns[i].id, server.local_addr());
            writeln!(out, "listening {}", server.local_addr()).map_err(io)?;
            out.flush().map_err(io)?;
            server.wait();
        }
        Cmd::Put { path, local } => {
            let bytes =
                std::fs::read(local).map_err(|e| Error::BadRequest(format!("read {}: {e}", local.display())))?;
            ctx.session()?.ws_write(&wpath(path)?, &bytes)?;
        }
        Cmd::Get { path, local } => {
            let bytes = ctx.session()?.ws_read(&wpath(path)?)?;
            match local {
                Some(l) => std::fs::write(l, bytes).map_err(|e| Error::io(format!("write {}", l.display()), e))?,
                None => out.write_all(&bytes).map_err(io)?,
            }
        }
        Cmd::Ls { path } => {
            for name in ctx.session()?.ws_readdir(&wpath(path)?)? {
                writeln!(out, "{name}").map_err(io)?;
            }
        }
        Cmd::Stat { path } => {
            let r = ctx.session()?.ws_stat(&wpath(path)?)?;
            let kind = match r.kind {
                scispace::EntryKind::File => "file",
                scispace::EntryKind::Directory => "directory",
            };
            writeln!(
                out,
                "path\t{}\nkind\t{kind}\nsize\t{}\nowner\t{}\nmtime\t{}\ndtn\t{}",
                r.path, r.size, r.owner, r.mtime, ctx.cfg.dtns[r.dtn_index].id
            )
            .map_err(io)?;
        }
        Cmd::Mkdir { path } => {
            ctx.session()?.ws_mkdir(&wpath(path)?)?;
        }
        Cmd::Export { dtn, start, index } => {
            if !export(&ctx, dtn, start, *index, out)? {
                return Ok(EXIT_INTERNAL);
            }
        }
        Cmd::Tag { path, assignment } => {
            let (name, value) = parse_assignment(assignment)?;
            ctx.session()?.tag(&wpath(path)?, &name, value)?;
        }
        Cmd::Query { query } => {
            let pred = parse_query(query)?;
            let r = ctx.session()?.execute_query(&pred)?;
            for p in &r.paths {
                writeln!(out, "{p}").map_err(io)?;
            }
            log::info!("{} matches in {:.3} ms", r.paths.len(), r.elapsed_ms);
        }
        Cmd::Flush => {
            let n = ctx.session()?.flush()?;
            writeln!(out, "indexed {n}").map_err(io)?;
        }
        Cmd::Scrub { dtn, dry_run } => {
            let i = ctx.cfg.dtn_index(dtn)?;
            let backend = Backend::new(&ctx.cfg.dtns[i].backend_root, ctx.cfg.flag_mode);
            let opts = StoreOptions {
                fsync: ctx.cfg.fsync,
                ..Default::default()
            };
            let r = scrub(&backend, i, ctx.cfg.dtns.len(), opts, *dry_run)?;
            writeln!(
                out,
                "checked={}\tstale={}\tdrifted={}\torphaned={}{}",
                r.records_checked,
                r.stale.len(),
                r.drifted.len(),
                r.orphaned.len(),
                if *dry_run { "\t(dry run)" } else { "" }
            )
            .map_err(io)?;
            for (what, list) in [("stale", &r.stale), ("drifted", &r.drifted), ("orphaned", &r.orphaned)] {
                for p in list {
                    writeln!(out, "{what}\t{p}").map_err(io)?;
                }
            }
        }
        Cmd::Namespaces => {
            for t in ctx.session()?.list_namespaces()? {
                writeln!(out, "{}\t{}\t{}", t.name, t.owner, t.scope).map_err(io)?;
            }
        }
        Cmd::RegisterNs { name, scope } => {
            let scope: Scope = scope.parse()?;
            let t = NamespaceTemplate::new(name.clone(), ctx.who.clone(), scope)?;
            ctx.session()?.register_namespace(&t)?;
        }
    }
    Ok(EXIT_OK)
}

/// Runs the CLI; returns the process exit code. Output goes to `out`,
/// diagnostics to stderr.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("scispace: {e}");
            if e.is_user_error() {
                EXIT_USER
            } else {
                EXIT_INTERNAL
            }
        }
    }
}

/// Writes `cfg` next to `dir` as `scispace.conf`; returns its path.
pub fn write_config(cfg: &CollabConfig, dir: &Path) -> Result<PathBuf> {
    let path = dir.join("scispace.conf");
    std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    Ok(path)
}
