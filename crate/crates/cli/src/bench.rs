//! Benchmark harness. Every experiment runs against fresh in-process
//! clusters under one scratch root, and every corpus derives from the seed.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scispace::cluster::{ClusterOptions, LocalCluster};
use scispace::meu::{local_write, meu_export, ExportOptions};
use scispace::query::{parse_query, Predicate};
use scispace::sdf::{self, AttributeValue, SdfDocument, ValueType};
use scispace::sds::{AttributeSpec, IndexMode, SpecSet, FS_MTIME};
use scispace::{Result, Session, WorkspacePath};

use crate::report::{linear_fit, linear_r2, summarize, BenchReport};

pub const MODES: [IndexMode; 3] = [IndexMode::InlineSync, IndexMode::InlineAsync, IndexMode::LwOffline];

/// Scratch space for clusters; each run gets its own subdirectory, removed
/// when the run ends.
pub struct BenchEnv {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
    pub seed: u64,
    runs: usize,
}

impl BenchEnv {
    pub fn new(root: Option<&Path>, seed: u64) -> Result<Self> {
        let (root, tmp) = match root {
            Some(r) => (r.to_owned(), None),
            None => {
                let t = tempfile::Builder::new()
                    .prefix("scispace-bench")
                    .tempdir()
                    .map_err(|e| scispace::Error::io("create bench dir", e))?;
                (t.path().to_owned(), Some(t))
            }
        };
        Ok(BenchEnv {
            root,
            _tmp: tmp,
            seed,
            runs: 0,
        })
    }

    fn cluster(&mut self, opts: ClusterOptions) -> Result<Run> {
        self.runs += 1;
        let dir = self.root.join(format!("run{}", self.runs));
        let cluster = LocalCluster::start(&dir, opts)?;
        Ok(Run { dir, cluster })
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

struct Run {
    dir: PathBuf,
    cluster: LocalCluster,
}

impl Drop for Run {
    fn drop(&mut self) {
        for i in 0..self.cluster.dtns().len() {
            self.cluster.stop(i);
        }
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

const POOL: [(&str, ValueType); 20] = [
    ("location", ValueType::Text),
    ("instrument", ValueType::Text),
    ("date", ValueType::Text),
    ("daynight", ValueType::Int),
    ("level", ValueType::Int),
    ("orbit", ValueType::Int),
    ("granule", ValueType::Int),
    ("band_count", ValueType::Int),
    ("cloud_pct", ValueType::Float),
    ("lat_min", ValueType::Float),
    ("lat_max", ValueType::Float),
    ("lon_min", ValueType::Float),
    ("lon_max", ValueType::Float),
    ("resolution_m", ValueType::Float),
    ("platform", ValueType::Text),
    ("processing", ValueType::Text),
    ("version", ValueType::Text),
    ("project", ValueType::Text),
    ("quality", ValueType::Text),
    ("units", ValueType::Text),
];

const WORDS: [&str; 8] = ["alpha", "bravo", "delta", "gamma", "omega", "sigma", "theta", "kappa"];

/// Specs for the first `n` attributes of the corpus pool (at most 20).
pub fn attribute_specs(n: usize) -> SpecSet {
    SpecSet::new(POOL.iter().take(n).map(|(name, t)| AttributeSpec {
        name: (*name).into(),
        value_type: *t,
    }))
    .expect("pool names are distinct")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFile {
    pub path: WorkspacePath,
    pub bytes: Vec<u8>,
}

fn pool_value(rng: &mut ChaCha8Rng, t: ValueType) -> AttributeValue {
    match t {
        ValueType::Int => AttributeValue::Int(rng.gen_range(0..1000)),
        ValueType::Float => AttributeValue::Float((rng.gen_range(-90_000..90_000) as f64) / 1000.0),
        ValueType::Text => AttributeValue::Text(format!("{}-{}", WORDS.choose(rng).unwrap(), rng.gen_range(0..100))),
    }
}

/// `files` SDF files under `/public`, each carrying every pool attribute
/// and a `payload`-byte body. Deterministic in `seed`.
pub fn generate_corpus(seed: u64, files: usize, payload: usize) -> Vec<CorpusFile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..files)
        .map(|i| {
            let attributes = POOL
                .iter()
                .map(|(n, t)| ((*n).to_owned(), pool_value(&mut rng, *t)))
                .collect();
            let mut body = vec![0u8; payload];
            rng.fill(&mut body[..]);
            let bytes = sdf::encode(&SdfDocument {
                attributes,
                payload: body,
            })
            .expect("pool attributes encode");
            CorpusFile {
                path: WorkspacePath::parse(&format!("/public/run{:02}/f{i:06}.sdf", i % 16)).expect("generated path"),
                bytes,
            }
        })
        .collect()
}

/// Exports `c` fresh zero-size local writes for each count and fits
/// elapsed time against the count.
pub fn run_bench_meu(env: &mut BenchEnv, counts: &[usize], reps: usize) -> Result<BenchReport> {
    let mut rep = BenchReport::new("meu");
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &c in counts {
        let mut elapsed = Vec::new();
        for r in 0..reps.max(1) {
            let run = env.cluster(ClusterOptions::default())?;
            let session = run.cluster.session("bench", IndexMode::LwOffline)?;
            let backend = session.backend(0);
            for i in 0..c {
                local_write(backend, &format!("public/d{:03}/f{i:07}", i / 1000), b"")?;
            }
            let first = meu_export(&session, 0, &ExportOptions::default())?;
            let again = meu_export(&session, 0, &ExportOptions::default())?;
            let p = [("files", s(c)), ("rep", s(r))];
            rep.push(&p, "elapsed_ms", first.elapsed_ms);
            rep.push(&p, "scan_ms", first.scan.elapsed_ms);
            rep.push(&p, "exported", first.exported as f64);
            rep.push(&p, "frames", first.frames_sent as f64);
            rep.push(&p, "rerun_exported", again.exported as f64);
            rep.push(&p, "rerun_frames", again.frames_sent as f64);
            rep.push(&p, "rerun_elapsed_ms", again.elapsed_ms);
            elapsed.push(first.elapsed_ms);
        }
        let m = summarize(&elapsed).median;
        rep.push(&[("files", s(c))], "median_elapsed_ms", m);
        xs.push(c as f64);
        ys.push(m);
    }
    if xs.len() >= 2 {
        let (slope, intercept) = linear_fit(&xs, &ys);
        rep.push(&[], "r2", linear_r2(&xs, &ys));
        rep.push(&[], "slope_ms_per_file", slope);
        rep.push(&[], "intercept_ms", intercept);
    }
    Ok(rep)
}

#[derive(Debug, Clone)]
pub struct ModesParams {
    pub attr_counts: Vec<usize>,
    pub files: usize,
    pub payload: usize,
    pub reps: usize,
    pub dtns: usize,
}

impl Default for ModesParams {
    fn default() -> Self {
        ModesParams {
            attr_counts: vec![0, 5, 20],
            files: 2000,
            payload: 64 * 1024,
            reps: 5,
            dtns: 2,
        }
    }
}

/// Attribute values per file on every shard, minus `fs.mtime`, which
/// depends on when each run wrote its files.
pub type TripleTable = BTreeMap<String, BTreeMap<String, AttributeValue>>;

pub fn shard_table(cluster: &LocalCluster) -> TripleTable {
    let mut t = TripleTable::new();
    for i in 0..cluster.dtns().len() {
        for tr in cluster.server(i).dump().triples {
            if tr.attribute != FS_MTIME {
                t.entry(tr.file).or_default().insert(tr.attribute, tr.value);
            }
        }
    }
    t
}

/// Timings of one ingest run.
#[derive(Debug, Clone, Default)]
pub struct ModeRun {
    pub acks_ms: Vec<f64>,
    pub ingest_ms: f64,
    pub post_ms: f64,
    pub extract_ms: f64,
    pub store_ms: f64,
    pub table: TripleTable,
}

impl ModeRun {
    pub fn e2e_ms(&self) -> f64 {
        self.ingest_ms + self.post_ms
    }
}

/// Writes `corpus` under `mode` and brings the index up to date: nothing
/// more for inline-sync, a full drain for inline-async, export plus offline
/// indexing for local writes.
pub fn ingest(
    env: &mut BenchEnv,
    mode: IndexMode,
    specs: &SpecSet,
    dtns: usize,
    corpus: &[CorpusFile],
) -> Result<ModeRun> {
    let run = env.cluster(ClusterOptions {
        dtns,
        specs: specs.clone(),
        ..Default::default()
    })?;
    let session = run.cluster.session("bench", mode)?;
    let mut out = ModeRun {
        acks_ms: Vec::with_capacity(corpus.len()),
        ..Default::default()
    };
    let t = Instant::now();
    for f in corpus {
        let w = Instant::now();
        match mode {
            IndexMode::LwOffline => {
                let d = session.place(&f.path);
                local_write(session.backend(d), f.path.backend_rel(), &f.bytes)?;
            }
            _ => {
                session.ws_write(&f.path, &f.bytes)?;
            }
        }
        out.acks_ms.push(ms(w));
    }
    out.ingest_ms = ms(t);
    let t = Instant::now();
    match mode {
        IndexMode::InlineSync => {}
        IndexMode::InlineAsync => {
            session.flush()?;
        }
        IndexMode::LwOffline => {
            for d in 0..dtns {
                let r = meu_export(
                    &session,
                    d,
                    &ExportOptions {
                        index: true,
                        ..Default::default()
                    },
                )?;
                if let Some(ix) = r.index {
                    out.extract_ms += ix.extract_ms;
                    out.store_ms += ix.store_ms;
                }
            }
        }
    }
    out.post_ms = ms(t);
    out.table = shard_table(&run.cluster);
    Ok(out)
}

pub fn run_bench_modes(env: &mut BenchEnv, p: &ModesParams) -> Result<BenchReport> {
    let mut rep = BenchReport::new("modes");
    let corpus = generate_corpus(env.seed, p.files, p.payload);
    let mut e2e_by: HashMap<(usize, IndexMode), f64> = HashMap::new();
    for &a in &p.attr_counts {
        let specs = attribute_specs(a);
        let mut tables: Vec<TripleTable> = Vec::new();
        for mode in MODES {
            let mut ack_medians = Vec::new();
            let mut e2e = Vec::new();
            let mut last_ack = Vec::new();
            for r in 0..p.reps.max(1) {
                let run = ingest(env, mode, &specs, p.dtns, &corpus)?;
                let sum = summarize(&run.acks_ms);
                let params = [("attrs", s(a)), ("mode", s(mode)), ("rep", s(r))];
                rep.push(&params, "ack_median_ms", sum.median);
                rep.push(&params, "ack_p95_ms", sum.p95);
                rep.push(&params, "ack_mean_ms", sum.mean);
                rep.push(&params, "storage_ms", run.ingest_ms);
                rep.push(&params, "index_ms", run.post_ms);
                rep.push(&params, "extract_ms", run.extract_ms);
                rep.push(&params, "store_index_ms", run.store_ms);
                rep.push(&params, "e2e_ms", run.e2e_ms());
                ack_medians.push(sum.median);
                e2e.push(run.e2e_ms());
                last_ack.push(run.ingest_ms);
                if r == 0 {
                    tables.push(run.table);
                }
            }
            let params = [("attrs", s(a)), ("mode", s(mode))];
            rep.push(&params, "median_ack_ms", summarize(&ack_medians).median);
            rep.push(&params, "median_last_ack_ms", summarize(&last_ack).median);
            let m = summarize(&e2e).median;
            rep.push(&params, "median_e2e_ms", m);
            e2e_by.insert((a, mode), m);
        }
        let equivalent = tables.windows(2).all(|w| w[0] == w[1]);
        rep.push(&[("attrs", s(a))], "modes_equivalent", f64::from(u8::from(equivalent)));
        rep.push(&[("attrs", s(a))], "files_indexed", tables[0].len() as f64);
    }
    // Improvement of each deferred mode over inline-sync, end to end.
    let mut gains = Vec::new();
    for &a in &p.attr_counts {
        let base = e2e_by[&(a, IndexMode::InlineSync)];
        for mode in [IndexMode::InlineAsync, IndexMode::LwOffline] {
            let g = (base - e2e_by[&(a, mode)]) / base * 100.0;
            rep.push(&[("attrs", s(a)), ("mode", s(mode))], "improvement_pct", g);
            gains.push(g);
        }
    }
    rep.push(&[], "avg_improvement_pct", summarize(&gains).mean);
    Ok(rep)
}

/// The four query shapes: attribute, spec type, query matching the
/// planted value.
pub const HIT_ATTRIBUTES: [(&str, ValueType, &str); 4] = [
    ("Location", ValueType::Text, "Location = \"Antarctica\""),
    ("Instrument", ValueType::Text, "Instrument = \"MODIS\""),
    ("Date", ValueType::Text, "Date like \"2021-07-%\""),
    ("DayNight", ValueType::Int, "DayNight = 1"),
];

fn hit_value(attr: &str, hit: bool, rng: &mut ChaCha8Rng) -> AttributeValue {
    let t = |s: String| AttributeValue::Text(s);
    match (attr, hit) {
        ("Location", true) => t("Antarctica".into()),
        ("Location", false) => t(format!("Site-{}", rng.gen_range(0..500))),
        ("Instrument", true) => t("MODIS".into()),
        ("Instrument", false) => t(["VIIRS", "AVHRR", "ASTER", "CERES"].choose(rng).unwrap().to_string()),
        ("Date", true) => t(format!("2021-07-{:02}", rng.gen_range(1..=31))),
        ("Date", false) => t(format!(
            "20{:02}-{:02}-{:02}",
            rng.gen_range(10..21),
            rng.gen_range(1..=12),
            rng.gen_range(1..=28)
        )),
        (_, hit) => AttributeValue::Int(i64::from(hit)),
    }
}

#[derive(Debug, Clone)]
pub struct HitRatioParams {
    pub ratios: Vec<f64>,
    pub files: usize,
    pub queries: usize,
    pub dtns: usize,
}

impl Default for HitRatioParams {
    fn default() -> Self {
        HitRatioParams {
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            files: 2000,
            queries: 1000,
            dtns: 2,
        }
    }
}

/// Files matching at hit ratio `r` of `total` tuples.
pub fn planted(r: f64, total: usize) -> usize {
    ((r * total as f64).ceil() as usize).min(total)
}

pub fn run_bench_hitratio(env: &mut BenchEnv, p: &HitRatioParams) -> Result<BenchReport> {
    let mut rep = BenchReport::new("hitratio");
    let specs = SpecSet::new(HIT_ATTRIBUTES.iter().map(|(n, t, _)| AttributeSpec {
        name: (*n).into(),
        value_type: *t,
    }))?;
    let preds: Vec<Predicate> = HIT_ATTRIBUTES
        .iter()
        .map(|(_, _, q)| parse_query(q).expect("fixed query"))
        .collect();
    for (ri, &ratio) in p.ratios.iter().enumerate() {
        let mut rng = env.rng(ri as u64 + 1);
        let want = planted(ratio, p.files);
        // Hit membership per attribute, drawn independently.
        let members: Vec<Vec<bool>> = HIT_ATTRIBUTES
            .iter()
            .map(|_| {
                let mut v: Vec<bool> = (0..p.files).map(|i| i < want).collect();
                v.shuffle(&mut rng);
                v
            })
            .collect();
        let run = env.cluster(ClusterOptions {
            dtns: p.dtns,
            specs: specs.clone(),
            ..Default::default()
        })?;
        let session = run.cluster.session("bench", IndexMode::InlineSync)?;
        #[allow(clippy::needless_range_loop)]
        for i in 0..p.files {
            let attributes = HIT_ATTRIBUTES
                .iter()
                .enumerate()
                .map(|(a, (n, _, _))| ((*n).to_owned(), hit_value(n, members[a][i], &mut rng)))
                .collect();
            let bytes = sdf::encode(&SdfDocument {
                attributes,
                payload: Vec::new(),
            })
            .expect("hit corpus encodes");
            let path = WorkspacePath::parse(&format!("/public/obs{:02}/g{i:06}.sdf", i % 20))?;
            session.ws_write(&path, &bytes)?;
        }
        for (a, pred) in preds.iter().enumerate() {
            let mut lat = Vec::with_capacity(p.queries);
            let mut hits = 0;
            for _ in 0..p.queries {
                let r = session.execute_query(pred)?;
                lat.push(r.elapsed_ms);
                hits = r.paths.len();
            }
            let sum = summarize(&lat);
            let params = [("attr", s(HIT_ATTRIBUTES[a].0)), ("ratio", s(ratio))];
            rep.push(&params, "median_ms", sum.median);
            rep.push(&params, "p95_ms", sum.p95);
            rep.push(&params, "mean_ms", sum.mean);
            rep.push(&params, "hits", hits as f64);
            rep.push(&params, "tuples", p.files as f64);
        }
    }
    Ok(rep)
}

/// Sequential write and read throughput through the workspace and through
/// local writes, over a range of block (file) sizes.
pub fn run_bench_io(env: &mut BenchEnv, block_sizes: &[usize], total_bytes: usize) -> Result<BenchReport> {
    let mut rep = BenchReport::new("io");
    let mut rng = env.rng(100);
    for &bs in block_sizes {
        let n = (total_bytes / bs.max(1)).max(1);
        let mut block = vec![0u8; bs];
        rng.fill(&mut block[..]);
        let run = env.cluster(ClusterOptions::default())?;
        let session = run.cluster.session("bench", IndexMode::LwOffline)?;
        let backend = session.backend(0);
        let mb = (n * bs) as f64 / (1024.0 * 1024.0);
        let paths: Vec<WorkspacePath> = (0..n)
            .map(|i| WorkspacePath::parse(&format!("/public/ws/b{i:06}")))
            .collect::<Result<_>>()?;

        let t = Instant::now();
        for p in &paths {
            session.ws_write(p, &block)?;
        }
        let ws_write = mb / (ms(t) / 1e3);
        let t = Instant::now();
        for p in &paths {
            session.ws_read(p)?;
        }
        let ws_read = mb / (ms(t) / 1e3);

        let t = Instant::now();
        for i in 0..n {
            local_write(backend, &format!("public/lw/b{i:06}"), &block)?;
        }
        let lw_write = mb / (ms(t) / 1e3);
        let t = Instant::now();
        for i in 0..n {
            backend.get(&format!("public/lw/b{i:06}"))?;
        }
        let lw_read = mb / (ms(t) / 1e3);

        let params = [("block", s(bs)), ("blocks", s(n))];
        rep.push(&params, "workspace_write_mbps", ws_write);
        rep.push(&params, "workspace_read_mbps", ws_read);
        rep.push(&params, "local_write_mbps", lw_write);
        rep.push(&params, "local_read_mbps", lw_read);
        rep.push(&params, "write_gap_pct", (lw_write - ws_write) / lw_write * 100.0);
    }
    Ok(rep)
}

/// `m` concurrent collaborators each writing `files` files; checks every
/// file is listed afterwards and reports aggregate throughput.
pub fn run_bench_scaling(env: &mut BenchEnv, sessions: &[usize], files: usize, dtns: usize) -> Result<BenchReport> {
    let mut rep = BenchReport::new("scaling");
    for &m in sessions {
        let run = env.cluster(ClusterOptions {
            dtns,
            ..Default::default()
        })?;
        let all: Vec<Session> = (0..m)
            .map(|i| run.cluster.session(&format!("user{i}"), IndexMode::LwOffline))
            .collect::<Result<_>>()?;
        let t = Instant::now();
        let results: Vec<Result<()>> = std::thread::scope(|sc| {
            let handles: Vec<_> = all
                .iter()
                .enumerate()
                .map(|(i, sess)| {
                    sc.spawn(move || {
                        for k in 0..files {
                            let p = WorkspacePath::parse(&format!("/public/u{i}/f{k:05}"))?;
                            sess.ws_write(&p, b"scaling")?;
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("writer panicked"))
                .collect()
        });
        let elapsed = ms(t);
        results.into_iter().collect::<Result<()>>()?;
        let mut violations = 0;
        for i in 0..m {
            let dir = WorkspacePath::parse(&format!("/public/u{i}"))?;
            for sess in &all {
                if sess.ws_readdir(&dir)?.len() != files {
                    violations += 1;
                }
            }
        }
        let params = [("sessions", s(m))];
        rep.push(&params, "elapsed_ms", elapsed);
        rep.push(&params, "files_per_s", (m * files) as f64 / (elapsed / 1e3));
        rep.push(&params, "violations", f64::from(violations));
    }
    Ok(rep)
}
