#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use revblocks_core::builder::{self, BuildReport};
use revblocks_core::warehouse::{open_segment_in, read_metadata, scan_warehouse};
use revblocks_core::{
    parse_block_line, Block, BuildConfig, Contributor, NamespaceFilter, TextPayload,
};
use revblocks_testkit::dumpgen::{write_dump_file, DumpSpec, Packing};
use revblocks_testkit::reference::{RefPage, RefRevision};

/// Maps a reference revision onto the block the reader should produce.
pub fn expected_block(page: &RefPage, rev: &RefRevision) -> Block {
    Block {
        article_id: page.id.clone(),
        revision_id: rev.id.clone(),
        timestamp: rev.timestamp.clone(),
        contributor: Contributor {
            username: rev.username.clone(),
            id: rev.user_id.clone(),
            ip: rev.ip.clone(),
        },
        comment: rev.comment.clone(),
        format: rev.format.clone(),
        text: TextPayload {
            bytes: rev.text_bytes.clone(),
            text: rev.text.clone(),
            deleted: rev.text_deleted,
            extras: Default::default(),
        },
        sha1: rev.sha1.clone(),
        extras: Default::default(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredArticle {
    pub title: String,
    pub namespace: Option<i64>,
    pub lines: Vec<Vec<u8>>,
}

/// Every segment of a dataset, read through its sidecar record.
pub fn read_articles(dir: &Path) -> BTreeMap<String, StoredArticle> {
    let dataset = read_metadata(dir).expect("dataset metadata");
    let mut out = BTreeMap::new();
    for (_, meta) in dataset.segments() {
        let lines = open_segment_in(dir, meta)
            .expect("open segment")
            .collect::<Result<Vec<_>, _>>()
            .expect("decode segment");
        assert_eq!(lines.len() as u64, meta.num_revisions);
        let prev = out.insert(
            meta.article_id.clone(),
            StoredArticle {
                title: meta.title.clone(),
                namespace: meta.namespace,
                lines,
            },
        );
        assert!(prev.is_none(), "article {} stored twice", meta.article_id);
    }
    out
}

pub fn read_blocks(dir: &Path) -> BTreeMap<String, Vec<Block>> {
    read_articles(dir)
        .into_iter()
        .map(|(id, article)| {
            let blocks = article
                .lines
                .iter()
                .map(|l| parse_block_line(l).expect("block line"))
                .collect();
            (id, blocks)
        })
        .collect()
}

/// All lines of all warehouses decoded front to back, sorted.
pub fn sorted_lines(dir: &Path) -> Vec<Vec<u8>> {
    let dataset = read_metadata(dir).expect("dataset metadata");
    let mut lines = Vec::new();
    for entry in &dataset.warehouses {
        for line in scan_warehouse(&entry.path).expect("open warehouse") {
            lines.push(line.expect("decode warehouse"));
        }
    }
    lines.sort_unstable();
    lines
}

pub fn build_config(out: &Path, workers: usize) -> BuildConfig {
    BuildConfig {
        num_workers: workers,
        namespaces: NamespaceFilter::All,
        ..BuildConfig::new(out)
    }
}

pub fn build_dir(input: &Path, out: &Path, workers: usize) -> BuildReport {
    let worklist = builder::preload(input).expect("worklist");
    let report = builder::build(&worklist, &build_config(out, workers)).expect("build");
    assert!(!report.has_failures(), "build failures: {report:?}");
    report
}

/// Writes `files` dumps with disjoint article ids into `dir`.
pub fn write_corpus(dir: &Path, files: usize, spec: &DumpSpec, packing: Packing) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    let ext = match packing {
        Packing::Plain => "xml",
        Packing::Bz2 => "xml.bz2",
        Packing::Gzip => "xml.gz",
    };
    (0..files)
        .map(|i| {
            let path = dir.join(format!("wiki-pages-meta-history{}.{ext}", i + 1));
            let spec = DumpSpec {
                seed: spec.seed + i as u64,
                first_article_id: spec.first_article_id + (i * spec.articles) as u64 * 10,
                ..spec.clone()
            };
            write_dump_file(&path, &spec, packing).unwrap();
            path
        })
        .collect()
}
