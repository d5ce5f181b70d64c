//! Naive DOM parse of a whole export file, used as an oracle for the
//! streaming reader. Loads everything into memory; keep inputs small.

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefPage {
    pub id: String,
    pub title: String,
    pub namespace: Option<i64>,
    pub revisions: Vec<RefRevision>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RefRevision {
    pub id: String,
    pub timestamp: String,
    pub username: Option<String>,
    pub user_id: Option<String>,
    pub ip: Option<String>,
    pub comment: Option<String>,
    pub format: Option<String>,
    pub text_bytes: Option<String>,
    pub text: String,
    pub text_deleted: bool,
    pub sha1: Option<String>,
}

pub fn parse_str(xml: &str) -> Result<Vec<RefPage>, String> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| e.to_string())?;
    let mut pages = Vec::new();
    for page in doc
        .root_element()
        .children()
        .filter(|n| n.has_tag_name("page"))
    {
        let mut out = RefPage {
            id: String::new(),
            title: String::new(),
            namespace: None,
            revisions: Vec::new(),
        };
        for child in page.children().filter(|n| n.is_element()) {
            match child.tag_name().name() {
                "id" => out.id = text(child).trim().to_string(),
                "title" => out.title = text(child),
                "ns" => out.namespace = text(child).trim().parse().ok(),
                "revision" => out.revisions.push(revision(child)),
                _ => {}
            }
        }
        pages.push(out);
    }
    Ok(pages)
}

fn revision(node: roxmltree::Node<'_, '_>) -> RefRevision {
    let mut rev = RefRevision::default();
    for child in node.children().filter(|n| n.is_element()) {
        match child.tag_name().name() {
            "id" => rev.id = text(child).trim().to_string(),
            "timestamp" => rev.timestamp = text(child).trim().to_string(),
            "comment" => rev.comment = Some(text(child)),
            "format" => rev.format = Some(text(child)),
            "sha1" => rev.sha1 = Some(text(child)).filter(|s| !s.is_empty()),
            "text" => {
                rev.text = text(child);
                rev.text_bytes = child.attribute("bytes").map(str::to_string);
                rev.text_deleted = child.attribute("deleted").is_some();
            }
            "contributor" => {
                for c in child.children().filter(|n| n.is_element()) {
                    match c.tag_name().name() {
                        "username" => rev.username = Some(text(c)),
                        "id" => rev.user_id = Some(text(c).trim().to_string()),
                        "ip" => rev.ip = Some(text(c).trim().to_string()),
                        _ => {}
                    }
                }
            }
            _ => {}
        }
    }
    rev
}

fn text(node: roxmltree::Node<'_, '_>) -> String {
    node.children()
        .filter(|n| n.is_text())
        .filter_map(|n| n.text())
        .collect()
}

/// Reads a dump file, decompressing by extension.
pub fn read_dump(path: &Path) -> io::Result<String> {
    let file = File::open(path)?;
    let mut out = String::new();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bz2") => bzip2::read::MultiBzDecoder::new(file).read_to_string(&mut out)?,
        Some("gz") => flate2::read::MultiGzDecoder::new(file).read_to_string(&mut out)?,
        _ => io::BufReader::new(file).read_to_string(&mut out)?,
    };
    Ok(out)
}

pub fn parse_file(path: &Path) -> Result<Vec<RefPage>, String> {
    parse_str(&read_dump(path).map_err(|e| e.to_string())?)
}
