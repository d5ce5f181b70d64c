use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use revblocks_core::download::file_sha1;
use revblocks_core::warehouse::read_metadata;
use revblocks_testkit::dumpgen::{write_dump_file, DumpSpec, Packing};
use revblocks_testkit::mockhttp::{status_index, MockServer, Route};
use serde_json::Value;
use tempfile::TempDir;

const WIKI: &str = "testwiki";
const DATE: &str = "20240801";

fn revblocks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revblocks"))
        .args(args)
        .env_remove("REVBLOCKS_MIRROR")
        .output()
        .expect("run revblocks")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not one JSON document ({e}):\n{}\nstderr:\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three small bz2 dump files with disjoint article ids.
fn corpus(root: &Path) -> PathBuf {
    let dir = root.join("dumps");
    fs::create_dir_all(&dir).unwrap();
    for i in 0..3u64 {
        let spec = DumpSpec {
            seed: 40 + i,
            first_article_id: 1 + i * 1000,
            articles: 12,
            talk_fraction: 0.25,
            ..DumpSpec::default()
        };
        write_dump_file(
            &dir.join(format!("wiki-pages-meta-history{i}.xml.bz2")),
            &spec,
            Packing::Bz2,
        )
        .unwrap();
    }
    dir
}

fn built(root: &Path) -> PathBuf {
    let input = corpus(root);
    let out = root.join("built");
    let run = revblocks(&[
        "build",
        "--input",
        s(&input),
        "--output",
        s(&out),
        "--namespaces",
        "all",
        "--workers",
        "2",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    out
}

#[test]
fn build_reports_and_limits() {
    let tmp = TempDir::new().unwrap();
    let out = built(tmp.path());
    let dataset = read_metadata(&out).unwrap();
    assert_eq!(dataset.num_segments(), 36);

    let input = tmp.path().join("dumps");
    let limited = tmp.path().join("limited");
    let report_path = tmp.path().join("report.json");
    let run = revblocks(&[
        "build",
        "--input",
        s(&input),
        "--output",
        s(&limited),
        "--namespaces",
        "all",
        "--limit-files",
        "1",
        "--warehouse-size",
        "1MiB",
        "--report",
        s(&report_path),
    ]);
    assert_eq!(code(&run), 0);
    assert!(run.stdout.is_empty());
    let report: Value = serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["files_processed"], 1);
    assert_eq!(report["articles_written"], 12);
    assert_eq!(read_metadata(&limited).unwrap().num_segments(), 12);

    // Default namespace filter keeps main-namespace pages only.
    let main = tmp.path().join("main");
    let run = revblocks(&["build", "--input", s(&input), "--output", s(&main)]);
    assert_eq!(code(&run), 0);
    let report = stdout_json(&run);
    let written = report["articles_written"].as_u64().unwrap();
    assert!(written > 0 && written < 36, "{written}");
}

#[test]
fn build_refuses_bad_input() {
    let tmp = TempDir::new().unwrap();
    let out = built(tmp.path());
    let input = tmp.path().join("dumps");
    let run = revblocks(&["build", "--input", s(&input), "--output", s(&out)]);
    assert_eq!(code(&run), 2, "non-empty output");
    assert!(String::from_utf8_lossy(&run.stderr).contains("error"));

    let missing = tmp.path().join("nope");
    let run = revblocks(&[
        "build",
        "--input",
        s(&missing),
        "--output",
        s(&tmp.path().join("x")),
    ]);
    assert_eq!(code(&run), 2);

    let run = revblocks(&[
        "build",
        "--input",
        s(&input),
        "--output",
        s(&tmp.path().join("y")),
        "--warehouse-size",
        "lots",
    ]);
    assert_eq!(code(&run), 1);
    let run = revblocks(&["build", "--output", "z"]);
    assert_eq!(code(&run), 1);
}

#[test]
fn modify_chains_profiles() {
    let tmp = TempDir::new().unwrap();
    let data = built(tmp.path());
    let out = tmp.path().join("slim");
    let run = revblocks(&[
        "modify",
        "--input",
        s(&data),
        "--output",
        s(&out),
        "--workers",
        "2",
        "--profile",
        "snapshot:30",
        "--profile",
        "links",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = stdout_json(&run);
    assert_eq!(report["segments_in"], 36);
    assert_eq!(report["segments_out"], 36);
    assert_eq!(report["profiles"].as_array().unwrap().len(), 2);
    assert!(report["blocks_out"].as_u64() <= report["blocks_in"].as_u64());

    let run = revblocks(&["inspect", "--input", s(&out), "--json"]);
    assert_eq!(code(&run), 0);
    let keys: Vec<String> = stdout_json(&run)["key_paths"]
        .as_array()
        .unwrap()
        .iter()
        .map(|k| k.as_str().unwrap().to_string())
        .collect();
    assert!(!keys.iter().any(|k| k == "comment"), "{keys:?}");
    assert!(keys.iter().any(|k| k == "internal_links"), "{keys:?}");
}

#[test]
fn modify_rejects_unknown_profiles() {
    let tmp = TempDir::new().unwrap();
    let data = built(tmp.path());
    let out = tmp.path().join("out");
    let run = revblocks(&[
        "modify",
        "--input",
        s(&data),
        "--output",
        s(&out),
        "--profile",
        "nosuch",
    ]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("snapshot"));
    assert!(!out.exists());
    let run = revblocks(&[
        "modify",
        "--input",
        s(&data),
        "--output",
        s(&out),
        "--profile",
        "snapshot:soon",
    ]);
    assert_eq!(code(&run), 1);
    let run = revblocks(&["modify", "--input", s(&data), "--output", s(&out)]);
    assert_eq!(code(&run), 1, "--profile is required");
    let run = revblocks(&[
        "modify",
        "--input",
        s(&data),
        "--output",
        s(&data),
        "--profile",
        "links",
    ]);
    assert_eq!(code(&run), 2, "in place");
}

#[test]
fn corrupt_frame_is_partial_or_fatal_under_strict() {
    let tmp = TempDir::new().unwrap();
    let data = built(tmp.path());
    let dataset = read_metadata(&data).unwrap();
    let entry = &dataset.warehouses[0];
    let target = entry
        .segments
        .iter()
        .max_by_key(|s| s.byte_length)
        .unwrap()
        .clone();
    let mut bytes = fs::read(&entry.path).unwrap();
    bytes[(target.byte_start + target.byte_length / 2) as usize] ^= 0xff;
    fs::write(&entry.path, bytes).unwrap();

    let lenient = tmp.path().join("lenient");
    let run = revblocks(&[
        "modify",
        "--input",
        s(&data),
        "--output",
        s(&lenient),
        "--profile",
        "links",
    ]);
    assert_eq!(code(&run), 3);
    let report = stdout_json(&run);
    assert_eq!(report["segments_failed"].as_array().unwrap().len(), 1);
    assert_eq!(report["segments_out"], 35);

    let strict = tmp.path().join("strict");
    let run = revblocks(&[
        "modify",
        "--input",
        s(&data),
        "--output",
        s(&strict),
        "--profile",
        "links",
        "--strict",
    ]);
    assert_eq!(code(&run), 4);
    assert!(!strict.exists());
}

#[test]
fn inspect_summary_and_article() {
    let tmp = TempDir::new().unwrap();
    let data = built(tmp.path());

    let run = revblocks(&["inspect", "--input", s(&data), "--sample", "5"]);
    assert_eq!(code(&run), 0);
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("segments            36"), "{text}");
    assert!(text.contains("text.#text"), "{text}");

    let run = revblocks(&["inspect", "--input", s(&data), "--json", "--sample", "5"]);
    let report = stdout_json(&run);
    assert_eq!(report["segments"], 36);
    assert_eq!(report["sampled_blocks"], 5);

    let dataset = read_metadata(&data).unwrap();
    let (_, meta) = dataset.segments().nth(7).unwrap();
    let run = revblocks(&[
        "inspect",
        "--input",
        s(&data),
        "--article",
        &meta.article_id,
    ]);
    assert_eq!(code(&run), 0);
    let lines: Vec<Value> = String::from_utf8(run.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len() as u64, meta.num_revisions);
    assert!(lines
        .iter()
        .all(|b| b["article_id"] == meta.article_id.as_str()));

    let run = revblocks(&[
        "inspect",
        "--input",
        s(&data),
        "--article",
        &meta.article_id,
        "--json",
    ]);
    let doc = stdout_json(&run);
    assert_eq!(
        doc["blocks"].as_array().unwrap().len() as u64,
        meta.num_revisions
    );

    let run = revblocks(&["inspect", "--input", s(&data), "--article", "999999"]);
    assert_eq!(code(&run), 2);
    let run = revblocks(&["inspect", "--input", s(&tmp.path().join("dumps"))]);
    assert_eq!(code(&run), 2, "not a dataset");
}

/// Serves `bodies` as history files; `bad_hash` lists indices whose index
/// entry carries the wrong checksum.
fn mirror(server: &MockServer, root: &Path, bodies: &[Vec<u8>], bad_hash: &[usize]) {
    let names: Vec<String> = (0..bodies.len())
        .map(|i| format!("{WIKI}-{DATE}-pages-meta-history{i}.xml-p1p9.bz2"))
        .collect();
    let hashes: Vec<String> = bodies
        .iter()
        .enumerate()
        .map(|(i, body)| {
            if bad_hash.contains(&i) {
                return "0".repeat(40);
            }
            let path = root.join(format!("body{i}"));
            fs::write(&path, body).unwrap();
            file_sha1(&path).unwrap()
        })
        .collect();
    let entries: Vec<(&str, u64, &str)> = names
        .iter()
        .zip(bodies)
        .zip(&hashes)
        .map(|((n, b), h)| (n.as_str(), b.len() as u64, h.as_str()))
        .collect();
    server.add(
        &format!("/{WIKI}/{DATE}/dumpstatus.json"),
        Route::new(status_index("metahistorybz2dump", "done", &entries)),
    );
    for (name, body) in names.iter().zip(bodies) {
        server.add(&format!("/{WIKI}/{DATE}/{name}"), Route::new(body.clone()));
    }
}

fn bodies(n: usize) -> Vec<Vec<u8>> {
    (0..n)
        .map(|i| format!("payload {i} ").repeat(500 + i * 37).into_bytes())
        .collect()
}

#[test]
fn download_fetches_and_reports() {
    let tmp = TempDir::new().unwrap();
    let server = MockServer::start();
    let files = bodies(4);
    mirror(&server, tmp.path(), &files, &[]);
    let out = tmp.path().join("dl");
    let args = [
        "download",
        "--wiki",
        WIKI,
        "--date",
        DATE,
        "--output",
        s(&out),
        "--workers",
        "8",
        "--mirror",
        &server.url(),
        "--backoff",
        "0.01",
    ];
    let run = revblocks(&args);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let report = stdout_json(&run);
    assert_eq!(report["effective_workers"], 3);
    assert_eq!(report["files"].as_array().unwrap().len(), 4);
    for (i, body) in files.iter().enumerate() {
        let name = format!("{WIKI}-{DATE}-pages-meta-history{i}.xml-p1p9.bz2");
        assert_eq!(&fs::read(out.join(name)).unwrap(), body);
    }
    let run = revblocks(&args);
    assert_eq!(code(&run), 0);
    assert_eq!(stdout_json(&run)["bytes_transferred"], 0);
}

#[test]
fn download_checksum_failure_is_partial() {
    let tmp = TempDir::new().unwrap();
    let server = MockServer::start();
    mirror(&server, tmp.path(), &bodies(5), &[2]);
    let out = tmp.path().join("dl");
    let run = revblocks(&[
        "download",
        "--wiki",
        WIKI,
        "--date",
        DATE,
        "--output",
        s(&out),
        "--mirror",
        &server.url(),
        "--backoff",
        "0.01",
    ]);
    assert_eq!(code(&run), 3, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(stdout_json(&run)["files_failed"], 1);
    let kept = fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            !e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".part")
        })
        .count();
    assert_eq!(kept, 4);
}

#[test]
fn download_argument_errors() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("dl");
    let run = revblocks(&["download", "--wiki", WIKI, "--output", s(&out)]);
    assert_eq!(code(&run), 1, "missing --date");
    let run = revblocks(&[
        "download",
        "--wiki",
        WIKI,
        "--date",
        "2024-08-01",
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&run), 2);
    let run = revblocks(&[
        "download",
        "--wiki",
        WIKI,
        "--date",
        DATE,
        "--pattern",
        "xyz",
        "--output",
        s(&out),
    ]);
    assert_eq!(code(&run), 1);

    let server = MockServer::start();
    server.add(
        &format!("/{WIKI}/{DATE}/dumpstatus.json"),
        Route::new(status_index("metahistorybz2dump", "in-progress", &[])),
    );
    let run = revblocks(&[
        "download",
        "--wiki",
        WIKI,
        "--date",
        DATE,
        "--output",
        s(&out),
        "--mirror",
        &server.url(),
    ]);
    assert_eq!(code(&run), 4);
    assert!(!out.exists());
}

#[test]
fn help_and_version() {
    let run = revblocks(&["--help"]);
    assert_eq!(code(&run), 0);
    let text = String::from_utf8(run.stdout).unwrap();
    for sub in ["download", "build", "modify", "inspect"] {
        assert!(text.contains(sub));
    }
    assert_eq!(code(&revblocks(&["--version"])), 0);
    assert_eq!(code(&revblocks(&["frobnicate"])), 1);
}
