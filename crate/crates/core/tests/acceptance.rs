//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any failed.
//!
//! Arguments that do not start with `-` select criteria by key substring,
//! e.g. `cargo test --test acceptance -- memory snapshot`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revblocks_core::builder::{self, BuildReport};
use revblocks_core::download::{download, file_sha1, list_files, DownloadOptions, FileStatus};
use revblocks_core::model::SegmentMetadata;
use revblocks_core::modifier::{self, ModifierProfile, ModifyConfig};
use revblocks_core::profiles::{
    apply_changes, parse_profile, Change, ChangeKind, EditDiffProfile, SnapshotConfig,
    SnapshotProfile,
};
use revblocks_core::warehouse::{open_segment, read_metadata, scan_warehouse};
use revblocks_core::{serialize_block, BuildConfig, NamespaceFilter};
use revblocks_testkit::dumpgen::{write_dump_file, DumpSpec, Packing};
use revblocks_testkit::mockhttp::{status_index, MockServer, Route};
use revblocks_testkit::reference;
use serde_json::{json, Map};

const MIB: u64 = 1 << 20;
const CHILD_ENV: &str = "REVBLOCKS_ACCEPTANCE_CHILD";

type Check = Result<String, String>;

struct Criterion {
    key: &'static str,
    title: &'static str,
    limit: Duration,
    run: fn(&mut Env) -> Check,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        key: "round-trip",
        title: "round-trip fidelity",
        limit: Duration::from_secs(120),
        run: round_trip,
    },
    Criterion {
        key: "random-access",
        title: "random access",
        limit: Duration::from_secs(60),
        run: random_access,
    },
    Criterion {
        key: "determinism",
        title: "worker-count determinism",
        limit: Duration::from_secs(300),
        run: determinism,
    },
    Criterion {
        key: "memory",
        title: "memory discipline",
        limit: Duration::from_secs(120),
        run: memory,
    },
    Criterion {
        key: "snapshot",
        title: "snapshot oracle equivalence",
        limit: Duration::from_secs(30),
        run: snapshot_oracle,
    },
    Criterion {
        key: "diff",
        title: "diff soundness",
        limit: Duration::from_secs(30),
        run: diff_soundness,
    },
    Criterion {
        key: "chaining",
        title: "chaining equivalence",
        limit: Duration::from_secs(120),
        run: chaining,
    },
    Criterion {
        key: "rotation",
        title: "warehouse rotation bound",
        limit: Duration::from_secs(60),
        run: rotation,
    },
    Criterion {
        key: "downloader",
        title: "downloader cap",
        limit: Duration::from_secs(60),
        run: downloader,
    },
    Criterion {
        key: "speedup",
        title: "parallel build speedup",
        limit: Duration::from_secs(600),
        run: speedup,
    },
];

/// Scratch space plus fixtures shared between criteria. Whichever criterion
/// first needs a fixture pays for building it.
struct Env {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    corpus: Option<Vec<PathBuf>>,
    builds: BTreeMap<usize, (PathBuf, BuildReport)>,
}

impl Env {
    fn corpus(&mut self) -> Vec<PathBuf> {
        let root = self.root.clone();
        self.corpus
            .get_or_insert_with(|| {
                let spec = DumpSpec {
                    seed: 2024,
                    articles: 400,
                    revisions: 1..=40,
                    lines: 5..=30,
                    line_len: 10..=120,
                    gap_secs: 60..=120 * 86_400,
                    talk_fraction: 0.2,
                    deleted_fraction: 0.02,
                    ..DumpSpec::default()
                };
                common::write_corpus(&root.join("corpus"), 8, &spec, Packing::Bz2)
            })
            .clone()
    }

    /// The corpus built with `workers` workers and a 1 MiB warehouse limit.
    fn build(&mut self, workers: usize) -> Result<(PathBuf, BuildReport), String> {
        if !self.builds.contains_key(&workers) {
            self.corpus();
            let out = self.root.join(format!("built-{workers}"));
            let config = BuildConfig {
                warehouse_size_limit: MIB,
                ..common::build_config(&out, workers)
            };
            let worklist = builder::preload(self.root.join("corpus")).map_err(|e| e.to_string())?;
            let report = builder::build(&worklist, &config).map_err(|e| e.to_string())?;
            if report.has_failures() {
                return Err(format!(
                    "build with {workers} workers had failures: {:?}",
                    report.files_failed
                ));
            }
            self.builds.insert(workers, (out, report));
        }
        Ok(self.builds[&workers].clone())
    }
}

fn ensure(ok: bool, message: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(message())
    }
}

fn round_trip(env: &mut Env) -> Check {
    let files = env.corpus();
    let (dir, report) = env.build(4)?;
    let stored = common::read_articles(&dir);
    let mut expected: BTreeMap<String, Vec<Vec<u8>>> = BTreeMap::new();
    for path in &files {
        for page in reference::parse_file(path)? {
            let lines = page
                .revisions
                .iter()
                .map(|r| serialize_block(&common::expected_block(&page, r)))
                .collect();
            ensure(expected.insert(page.id.clone(), lines).is_none(), || {
                format!("duplicate article {}", page.id)
            })?;
        }
    }
    ensure(stored.len() == expected.len(), || {
        format!(
            "{} articles stored, {} expected",
            stored.len(),
            expected.len()
        )
    })?;
    let mut revisions = 0;
    for (id, want) in &expected {
        let got = stored
            .get(id)
            .ok_or_else(|| format!("article {id} missing"))?;
        ensure(&got.lines == want, || {
            format!("article {id}: stored revisions differ from the reference parse")
        })?;
        revisions += want.len();
    }
    let mut scanned = common::sorted_lines(&dir);
    let mut all: Vec<Vec<u8>> = expected.into_values().flatten().collect();
    all.sort_unstable();
    scanned.sort_unstable();
    ensure(scanned == all, || {
        "full warehouse decode differs from the reference multiset".into()
    })?;
    Ok(format!(
        "{} files, {} articles, {revisions} revisions, {} warehouses",
        files.len(),
        stored.len(),
        report.warehouses_written
    ))
}

fn random_access(env: &mut Env) -> Check {
    let (dir, _) = env.build(4)?;
    let dataset = read_metadata(&dir).map_err(|e| e.to_string())?;
    let mut segments = 0;
    for entry in &dataset.warehouses {
        let scanned: Vec<Vec<u8>> = scan_warehouse(&entry.path)
            .map_err(|e| e.to_string())?
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let mut offset = 0usize;
        let file = fs::read(&entry.path).map_err(|e| e.to_string())?;
        let mut joined = Vec::with_capacity(file.len());
        for meta in &entry.segments {
            let lines: Vec<Vec<u8>> = open_segment(&entry.path, meta.byte_start, meta.byte_length)
                .map_err(|e| e.to_string())?
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let end = offset + lines.len();
            ensure(
                end <= scanned.len() && lines[..] == scanned[offset..end],
                || {
                    format!(
                        "{} article {}: random access differs from the scan",
                        entry.name, meta.article_id
                    )
                },
            )?;
            offset = end;
            joined.extend_from_slice(&file[meta.byte_start as usize..meta.byte_end() as usize]);
            segments += 1;
        }
        ensure(offset == scanned.len(), || {
            format!("{}: scan has lines outside any segment", entry.name)
        })?;
        ensure(joined == file, || {
            format!("{}: frames do not concatenate to the file", entry.name)
        })?;
    }
    Ok(format!(
        "{segments} segments in {} warehouses",
        dataset.warehouses.len()
    ))
}

fn determinism(env: &mut Env) -> Check {
    let mut built = Vec::new();
    for workers in [1, 2, 4] {
        built.push((workers, common::sorted_lines(&env.build(workers)?.0)));
    }
    for (workers, lines) in &built[1..] {
        ensure(*lines == built[0].1, || {
            format!("build with {workers} workers differs from 1 worker")
        })?;
    }
    let (dataset, _) = env.build(4)?;
    let worklist = modifier::preload(&dataset).map_err(|e| e.to_string())?;
    let profile = parse_profile("urldiff").map_err(|e| e.to_string())?;
    let mut modified = Vec::new();
    for workers in [1, 2, 4] {
        let out = env.root.join(format!("urldiff-{workers}"));
        let config = ModifyConfig {
            num_workers: workers,
            warehouse_size_limit: MIB,
            ..ModifyConfig::new(&out)
        };
        let report = modifier::start(&worklist, std::slice::from_ref(&profile), &config)
            .map_err(|e| e.to_string())?;
        ensure(!report.has_failures(), || {
            format!("urldiff with {workers} workers had failures")
        })?;
        modified.push((workers, common::sorted_lines(&out)));
        fs::remove_dir_all(&out).ok();
    }
    for (workers, lines) in &modified[1..] {
        ensure(*lines == modified[0].1, || {
            format!("urldiff with {workers} workers differs from 1 worker")
        })?;
    }
    Ok(format!(
        "{} block lines, {} urldiff lines identical across 1/2/4 workers",
        built[0].1.len(),
        modified[0].1.len()
    ))
}

fn memory(env: &mut Env) -> Check {
    let input = env.root.join("memory-in");
    fs::create_dir_all(&input).map_err(|e| e.to_string())?;
    write_dump_file(
        &input.join("one-article.xml.bz2"),
        &DumpSpec::single_article(10_000, 10 * 1024, 77),
        Packing::Bz2,
    )
    .map_err(|e| e.to_string())?;
    let out = env.root.join("memory-out");
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let output = Command::new(exe)
        .env(CHILD_ENV, "memory")
        .arg(&input)
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&output.stdout);
    ensure(output.status.success(), || {
        format!("child failed: {}", String::from_utf8_lossy(&output.stderr))
    })?;
    let field = |name: &str| -> Result<u64, String> {
        stdout
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(name)?.strip_prefix('=')?.parse().ok())
            .ok_or_else(|| format!("child output lacks {name}: {stdout}"))
    };
    let revisions = field("revisions")?;
    let text_bytes = field("text_bytes")?;
    let peak_kb = field("vmhwm_kb")?;
    fs::remove_dir_all(&out).ok();
    ensure(revisions == 10_000, || {
        format!("built {revisions} revisions, expected 10000")
    })?;
    let peak_mb = peak_kb as f64 / 1024.0;
    let detail = format!(
        "peak RSS {peak_mb:.1} MB for 10000 revisions / {:.1} MB of text (limit 256 MB)",
        text_bytes as f64 / MIB as f64
    );
    ensure(peak_kb < 256 * 1024, || detail.clone())?;
    Ok(detail)
}

/// Runs in a fresh process so the peak RSS covers only the build.
fn memory_child(args: &[String]) -> Result<(), String> {
    let [input, out] = args else {
        return Err("expected INPUT OUTPUT".into());
    };
    let worklist = builder::preload(input).map_err(|e| e.to_string())?;
    let config = BuildConfig {
        num_workers: 1,
        namespaces: NamespaceFilter::All,
        ..BuildConfig::new(out)
    };
    let report = builder::build(&worklist, &config).map_err(|e| e.to_string())?;
    let status = fs::read_to_string("/proc/self/status")
        .map_err(|e| format!("no /proc/self/status: {e}"))?;
    let hwm = status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse::<u64>().ok())
        .ok_or("VmHWM not found")?;
    let dataset = read_metadata(out).map_err(|e| e.to_string())?;
    let text_bytes: u64 = dataset.segments().map(|(_, s)| s.uncompressed_bytes).sum();
    println!(
        "revisions={} text_bytes={text_bytes} vmhwm_kb={hwm}",
        report.revisions_written
    );
    Ok(())
}

fn empty_meta() -> SegmentMetadata {
    SegmentMetadata {
        warehouse: String::new(),
        article_id: "1".into(),
        title: String::new(),
        namespace: Some(0),
        byte_start: 0,
        byte_length: 1,
        uncompressed_bytes: 0,
        num_revisions: 0,
        first_timestamp: None,
        last_timestamp: None,
        custom: Map::new(),
    }
}

fn snapshot_oracle(_: &mut Env) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(180);
    let window = 180 * 86_400i64;
    let mut total = 0;
    let mut kept_total = 0;
    for case in 0..1000 {
        let len = rng.gen_range(0..200);
        let mut t = rng.gen_range(978_307_200i64..1_600_000_000);
        let mut secs = Vec::with_capacity(len);
        for _ in 0..len {
            t += match rng.gen_range(0..6) {
                0 => 0,
                1 => window,
                2 => window - 1,
                3 => rng.gen_range(0..3600),
                4 => rng.gen_range(0..60 * 86_400),
                _ => rng.gen_range(0..400 * 86_400),
            };
            secs.push(t);
        }
        let stamps: Vec<String> = secs
            .iter()
            .map(|&s| {
                chrono::DateTime::from_timestamp(s, 0)
                    .unwrap()
                    .format("%Y-%m-%dT%H:%M:%SZ")
                    .to_string()
            })
            .collect();

        let mut want = Vec::new();
        for (i, &s) in secs.iter().enumerate() {
            if want.iter().all(|&k: &usize| s - secs[k] >= window) {
                want.push(i);
            }
        }

        let mut profile = SnapshotProfile::new(SnapshotConfig::default());
        let mut meta = empty_meta();
        let mut got = Vec::new();
        for (i, ts) in stamps.iter().enumerate() {
            let block = json!({"revision_id": i.to_string(), "timestamp": ts});
            if let Some(out) = profile.block(block, &mut meta).map_err(|e| e.to_string())? {
                got.push(
                    out["revision_id"]
                        .as_str()
                        .unwrap()
                        .parse::<usize>()
                        .unwrap(),
                );
            }
        }
        ensure(got == want, || {
            format!("sequence {case}: kept {got:?}, oracle kept {want:?}")
        })?;
        total += len;
        kept_total += want.len();
    }
    Ok(format!(
        "1000 sequences, {total} timestamps, {kept_total} kept"
    ))
}

fn random_line(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[&str] = &[
        "",
        "== Heading ==",
        "* item",
        "text",
        "{{cite}}",
        "\u{e9}t\u{e9}",
        "a & b < c",
    ];
    if rng.gen_bool(0.5) {
        POOL[rng.gen_range(0..POOL.len())].to_string()
    } else {
        (0..rng.gen_range(1..40))
            .map(|_| char::from(rng.gen_range(b' '..=b'~')))
            .collect()
    }
}

fn diff_soundness(_: &mut Env) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let mut changes_total = 0;
    for case in 0..500 {
        let mut lines: Vec<String> = (0..rng.gen_range(0..60))
            .map(|_| random_line(&mut rng))
            .collect();
        let old = lines.join("\n");
        for _ in 0..rng.gen_range(0..12) {
            match rng.gen_range(0..4) {
                0 if !lines.is_empty() => {
                    let at = rng.gen_range(0..lines.len());
                    lines.remove(at);
                }
                1 if !lines.is_empty() => {
                    let at = rng.gen_range(0..lines.len());
                    lines[at] = random_line(&mut rng);
                }
                2 if lines.len() > 1 => {
                    let (a, b) = (rng.gen_range(0..lines.len()), rng.gen_range(0..lines.len()));
                    lines.swap(a, b);
                }
                _ => {
                    let at = rng.gen_range(0..=lines.len());
                    lines.insert(at, random_line(&mut rng));
                }
            }
        }
        let new = lines.join("\n");

        let mut profile = EditDiffProfile::default();
        let mut meta = empty_meta();
        let block =
            |text: &str| json!({"timestamp": "2020-01-01T00:00:00Z", "text": {"#text": text}});
        profile
            .block(block(&old), &mut meta)
            .map_err(|e| e.to_string())?;
        let out = profile
            .block(block(&new), &mut meta)
            .map_err(|e| e.to_string())?
            .ok_or("second block dropped")?;
        let changes: Vec<Change> = out["changes"]
            .as_array()
            .ok_or("changes is not an array")?
            .iter()
            .map(|c| Change {
                kind: if c["type"] == "add" {
                    ChangeKind::Add
                } else {
                    ChangeKind::Remove
                },
                content: c["content"].as_str().unwrap_or_default().to_string(),
                line: c["line"].as_u64().unwrap_or(u64::MAX) as usize,
            })
            .collect();
        let rebuilt = apply_changes(&old, &changes).map_err(|e| format!("pair {case}: {e}"))?;
        ensure(rebuilt == new, || {
            format!("pair {case}: replay does not reproduce the target")
        })?;
        changes_total += changes.len();
    }
    Ok(format!("500 pairs, {changes_total} changes replayed"))
}

fn chaining(env: &mut Env) -> Check {
    let (dataset, _) = env.build(4)?;
    let worklist = modifier::preload(&dataset).map_err(|e| e.to_string())?;
    let profile = |spec: &str| parse_profile(spec).map_err(|e| e.to_string());
    let run = |worklist: &modifier::ModifyWorklist,
               out: &Path,
               profiles: &[modifier::Profile]|
     -> Result<(), String> {
        let config = ModifyConfig {
            num_workers: 2,
            warehouse_size_limit: MIB,
            ..ModifyConfig::new(out)
        };
        let report = modifier::start(worklist, profiles, &config).map_err(|e| e.to_string())?;
        ensure(!report.has_failures(), || {
            format!("modify into {} had failures", out.display())
        })
    };
    let chained = env.root.join("chained");
    run(
        &worklist,
        &chained,
        &[profile("snapshot")?, profile("editdiff")?],
    )?;
    let snap = env.root.join("snapshots");
    run(&worklist, &snap, &[profile("snapshot")?])?;
    let second = env.root.join("snapshot-diffs");
    run(
        &modifier::preload(&snap).map_err(|e| e.to_string())?,
        &second,
        &[profile("editdiff")?],
    )?;
    let a = common::sorted_lines(&chained);
    let b = common::sorted_lines(&second);
    ensure(a == b, || "one-pass chain differs from two passes".into())?;
    ensure(
        common::read_articles(&chained) == common::read_articles(&second),
        || "per-article output differs between one and two passes".into(),
    )?;
    for dir in [chained, snap, second] {
        fs::remove_dir_all(dir).ok();
    }
    Ok(format!("{} diff blocks identical", a.len()))
}

/// Warehouse name, compressed size, segment count.
type OverLimit = (String, u64, usize);

/// Checks sealed warehouses of one dataset against `[limit - max, limit + max]`.
/// Returns (sealed count, max segment, over-limit warehouses).
fn sealed_sizes(dir: &Path, limit: u64) -> Result<(usize, u64, Vec<OverLimit>), String> {
    let dataset = read_metadata(dir).map_err(|e| e.to_string())?;
    let max_segment = dataset
        .segments()
        .map(|(_, s)| s.byte_length)
        .max()
        .unwrap_or(0);
    let mut by_worker: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for entry in &dataset.warehouses {
        by_worker.entry(&entry.name[..9]).or_default().push(entry);
    }
    let mut sealed = 0;
    let mut over = Vec::new();
    for entries in by_worker.values() {
        for (i, entry) in entries.iter().enumerate() {
            let last = i + 1 == entries.len();
            if entry.file_size > limit {
                over.push((entry.name.clone(), entry.file_size, entry.segments.len()));
            }
            if last && entry.file_size < limit {
                continue;
            }
            sealed += 1;
            let (lo, hi) = (limit.saturating_sub(max_segment), limit + max_segment);
            ensure((lo..=hi).contains(&entry.file_size), || {
                format!(
                    "{} is {} bytes, outside [{lo}, {hi}]",
                    entry.name, entry.file_size
                )
            })?;
        }
    }
    Ok((sealed, max_segment, over))
}

fn rotation(env: &mut Env) -> Check {
    let (dir, _) = env.build(4)?;
    let (sealed, max_segment, _) = sealed_sizes(&dir, MIB)?;
    ensure(max_segment < MIB, || {
        format!("largest segment is {max_segment} bytes, fixture needs < 1 MiB")
    })?;
    ensure(sealed > 0, || {
        "no warehouse reached the limit; the check would be vacuous".into()
    })?;

    let input = env.root.join("oversized-in");
    fs::create_dir_all(&input).map_err(|e| e.to_string())?;
    write_dump_file(
        &input.join("big.xml"),
        &DumpSpec::single_article(4, 600_000, 3),
        Packing::Plain,
    )
    .map_err(|e| e.to_string())?;
    let small = DumpSpec {
        seed: 4,
        first_article_id: 100,
        articles: 50,
        ..DumpSpec::default()
    };
    write_dump_file(&input.join("small.xml"), &small, Packing::Plain).map_err(|e| e.to_string())?;
    let out = env.root.join("oversized-out");
    let config = BuildConfig {
        warehouse_size_limit: MIB,
        ..common::build_config(&out, 1)
    };
    builder::build(
        &builder::preload(&input).map_err(|e| e.to_string())?,
        &config,
    )
    .map_err(|e| e.to_string())?;
    let (_, big_segment, over) = sealed_sizes(&out, MIB)?;
    ensure(big_segment > MIB, || {
        format!("oversized fixture segment is only {big_segment} bytes")
    })?;
    ensure(over.len() == 1 && over[0].2 == 1, || {
        format!("over-limit warehouses: {over:?}")
    })?;
    fs::remove_dir_all(&out).ok();
    Ok(format!(
        "{sealed} sealed warehouses within limit +/- {max_segment} bytes; singleton warehouse {} is {} bytes",
        over[0].0, over[0].1
    ))
}

fn downloader(_: &mut Env) -> Check {
    let server = MockServer::start();
    let (wiki, date) = ("accwiki", "20240801");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bodies: Vec<Vec<u8>> = (0..8)
        .map(|_| (0..400_000).map(|_| rng.gen()).collect())
        .collect();
    let names: Vec<String> = (1..=8)
        .map(|i| format!("{wiki}-{date}-pages-meta-history{i}.xml-p1p9.bz2"))
        .collect();
    let hashes: Vec<String> = bodies
        .iter()
        .map(|b| {
            use sha1::Digest;
            sha1::Sha1::digest(b)
                .iter()
                .map(|x| format!("{x:02x}"))
                .collect()
        })
        .collect();
    let entries: Vec<(&str, u64, &str)> = names
        .iter()
        .zip(&bodies)
        .zip(&hashes)
        .map(|((n, b), h)| (n.as_str(), b.len() as u64, h.as_str()))
        .collect();
    server.add(
        &format!("/{wiki}/{date}/dumpstatus.json"),
        Route::new(status_index("metahistorybz2dump", "done", &entries)),
    );
    for (name, body) in names.iter().zip(&bodies) {
        let route = Route {
            chunk_delay: Duration::from_millis(20),
            ..Route::new(body.clone())
        };
        server.add(&format!("/{wiki}/{date}/{name}"), route);
    }

    let files = list_files(&server.url(), wiki, date, "ehd").map_err(|e| e.to_string())?;
    ensure(files.len() == 8, || format!("listed {} files", files.len()))?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let options = DownloadOptions {
        workers: 8,
        backoff: Duration::from_millis(50),
        ..DownloadOptions::default()
    };
    let report = download(&files, tmp.path(), &options).map_err(|e| e.to_string())?;
    let peak = server.max_concurrent();
    ensure(peak <= 3, || format!("{peak} concurrent connections"))?;
    ensure(report.failed() == 0, || {
        format!("{} downloads failed", report.failed())
    })?;
    for (name, hash) in names.iter().zip(&hashes) {
        let actual = file_sha1(&tmp.path().join(name)).map_err(|e| e.to_string())?;
        ensure(&actual == hash, || {
            format!("{name}: sha1 {actual}, index says {hash}")
        })?;
    }
    let first_bytes = server.body_bytes_sent();
    server.reset_counters();
    let rerun = download(&files, tmp.path(), &options).map_err(|e| e.to_string())?;
    ensure(
        rerun.files.iter().all(|f| f.status == FileStatus::Skipped),
        || "rerun downloaded again".into(),
    )?;
    ensure(
        server.body_bytes_sent() == 0 && rerun.bytes_transferred == 0,
        || format!("rerun transferred {} bytes", server.body_bytes_sent()),
    )?;
    Ok(format!(
        "peak {peak} connections with 8 requested, {first_bytes} bytes verified, rerun 0 bytes"
    ))
}

fn speedup(env: &mut Env) -> Check {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let input = env.root.join("speedup-in");
    fs::create_dir_all(&input).map_err(|e| e.to_string())?;
    let spec = DumpSpec {
        seed: 50,
        articles: 16_000,
        revisions: 1..=2,
        lines: 20..=60,
        line_len: 60..=120,
        gap_secs: 3600..=30 * 86_400,
        ..DumpSpec::default()
    };
    let files = common::write_corpus(&input, 8, &spec, Packing::Bz2);
    let compressed: u64 = files
        .iter()
        .map(|f| fs::metadata(f).map_or(0, |m| m.len()))
        .sum();
    let worklist = builder::preload(&input).map_err(|e| e.to_string())?;
    let timed = |workers: usize| -> Result<f64, String> {
        let out = env.root.join(format!("speedup-{workers}"));
        let config = BuildConfig {
            num_workers: workers,
            ..BuildConfig::new(&out)
        };
        let started = Instant::now();
        let report = builder::build(&worklist, &config).map_err(|e| e.to_string())?;
        let secs = started.elapsed().as_secs_f64();
        ensure(!report.has_failures(), || {
            format!("build with {workers} workers had failures")
        })?;
        fs::remove_dir_all(&out).ok();
        Ok(secs)
    };
    let one = timed(1)?;
    let four = timed(4)?;
    fs::remove_dir_all(&input).ok();
    let ratio = four / one;
    let detail = format!(
        "8 files, {:.1} MB bz2 each on average; 1 worker {one:.1}s, 4 workers {four:.1}s, ratio {ratio:.2} (need <= 0.60); {cores} CPU core(s) available",
        compressed as f64 / 8.0 / 1e6
    );
    ensure(cores >= 4, || {
        format!("{detail}; criterion requires a machine with at least 4 cores")
    })?;
    ensure(ratio <= 0.6, || detail.clone())?;
    Ok(detail)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Ok(mode) = std::env::var(CHILD_ENV) {
        return match mode.as_str() {
            "memory" => match memory_child(&args) {
                Ok(()) => ExitCode::SUCCESS,
                Err(err) => {
                    eprintln!("{err}");
                    ExitCode::FAILURE
                }
            },
            other => {
                eprintln!("unknown child mode {other}");
                ExitCode::FAILURE
            }
        };
    }
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.key.contains(f.as_str())))
        .collect();

    let tmp = tempfile::tempdir().expect("scratch directory");
    let mut env = Env {
        root: tmp.path().to_path_buf(),
        _tmp: tmp,
        corpus: None,
        builds: BTreeMap::new(),
    };
    let mut failed = 0;
    for criterion in &selected {
        let started = Instant::now();
        let result = (criterion.run)(&mut env);
        let elapsed = started.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= criterion.limit {
                Ok(detail)
            } else {
                Err(format!(
                    "{detail}; took longer than {}s",
                    criterion.limit.as_secs()
                ))
            }
        });
        let (status, detail) = match result {
            Ok(detail) => ("PASS", detail),
            Err(detail) => {
                failed += 1;
                ("FAIL", detail)
            }
        };
        println!(
            "{status} {:<28} {:>7.1}s / {:>3}s  {detail}",
            criterion.title,
            elapsed.as_secs_f64(),
            criterion.limit.as_secs()
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        selected.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
