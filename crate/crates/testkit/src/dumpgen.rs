//! Seeded generator of MediaWiki export XML.
//!
//! Revisions of an article evolve by small line edits, so diffs between
//! neighbours stay small, while the line content itself is random enough to
//! keep compression ratios realistic for high-entropy text. Output is
//! streamed; only the current revision's lines are held in memory.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct DumpSpec {
    pub seed: u64,
    pub first_article_id: u64,
    pub articles: usize,
    pub revisions: RangeInclusive<usize>,
    pub lines: RangeInclusive<usize>,
    pub line_len: RangeInclusive<usize>,
    /// Seconds between consecutive revisions of an article.
    pub gap_secs: RangeInclusive<i64>,
    /// Share of pages placed in the talk namespace (1).
    pub talk_fraction: f64,
    /// Share of revisions whose text or contributor is suppressed.
    pub deleted_fraction: f64,
    /// Escapable and non-ASCII characters sprinkled into text.
    pub special_chars: bool,
    /// Number of distinct link targets per article.
    pub link_pool: usize,
}

impl Default for DumpSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            first_article_id: 1,
            articles: 10,
            revisions: 1..=8,
            lines: 3..=12,
            line_len: 10..=80,
            gap_secs: 3600..=60 * 86_400,
            talk_fraction: 0.0,
            deleted_fraction: 0.0,
            special_chars: true,
            link_pool: 6,
        }
    }
}

impl DumpSpec {
    /// One article with `revisions` revisions of roughly `text_bytes` each.
    pub fn single_article(revisions: usize, text_bytes: usize, seed: u64) -> Self {
        let line_len = 100;
        let lines = (text_bytes / (line_len + 1)).max(1);
        Self {
            seed,
            articles: 1,
            revisions: revisions..=revisions,
            lines: lines..=lines,
            line_len: line_len - 10..=line_len + 10,
            gap_secs: 60..=7200,
            special_chars: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DumpStats {
    pub articles: u64,
    pub revisions: u64,
    pub xml_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Packing {
    Plain,
    Bz2,
    Gzip,
}

struct Counter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for Counter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

const WORD_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const SPECIALS: &[&str] = &[
    "&",
    "<",
    ">",
    "\"",
    "'",
    "\u{e9}",
    "\u{263a}",
    "\u{1F600}",
    "\t",
];

pub fn write_dump<W: Write>(spec: &DumpSpec, out: W) -> io::Result<DumpStats> {
    let mut out = Counter {
        inner: out,
        count: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut stats = DumpStats::default();
    out.write_all(
        b"<mediawiki xmlns=\"http://www.mediawiki.org/xml/export-0.11/\" version=\"0.11\" xml:lang=\"en\">\n  <siteinfo>\n    <sitename>Synthetic</sitename>\n    <namespaces>\n      <namespace key=\"0\" case=\"first-letter\" />\n      <namespace key=\"1\" case=\"first-letter\">Talk</namespace>\n    </namespaces>\n  </siteinfo>\n",
    )?;
    let mut next_revision_id = spec.first_article_id * 1000;
    let epoch = Utc.with_ymd_and_hms(2001, 1, 15, 0, 0, 0).unwrap();
    for index in 0..spec.articles {
        let article_id = spec.first_article_id + index as u64;
        let talk = rng.gen_bool(spec.talk_fraction);
        let title = format!(
            "{}Article {article_id} {}",
            if talk { "Talk:" } else { "" },
            word(&mut rng, 3..=9)
        );
        writeln!(out, "  <page>")?;
        writeln!(out, "    <title>{}</title>", escape(&title))?;
        writeln!(out, "    <ns>{}</ns>", i32::from(talk))?;
        writeln!(out, "    <id>{article_id}</id>")?;
        let revisions = rng.gen_range(spec.revisions.clone());
        let mut lines: Vec<String> = (0..rng.gen_range(spec.lines.clone()))
            .map(|_| line(&mut rng, spec, article_id))
            .collect();
        let mut when = epoch + Duration::seconds(rng.gen_range(0..86_400 * 365));
        let mut parent = None;
        for r in 0..revisions {
            if r > 0 {
                edit(&mut rng, spec, article_id, &mut lines);
                when += Duration::seconds(rng.gen_range(spec.gap_secs.clone()));
            }
            next_revision_id += rng.gen_range(1..50);
            write_revision(
                &mut out,
                &mut rng,
                spec,
                next_revision_id,
                parent,
                when,
                &lines,
            )?;
            parent = Some(next_revision_id);
            stats.revisions += 1;
        }
        writeln!(out, "  </page>")?;
        stats.articles += 1;
    }
    out.write_all(b"</mediawiki>\n")?;
    out.flush()?;
    stats.xml_bytes = out.count;
    Ok(stats)
}

pub fn dump_string(spec: &DumpSpec) -> String {
    let mut buf = Vec::new();
    write_dump(spec, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("generator writes UTF-8")
}

pub fn write_dump_file(path: &Path, spec: &DumpSpec, packing: Packing) -> io::Result<DumpStats> {
    let file = BufWriter::with_capacity(1 << 20, File::create(path)?);
    match packing {
        Packing::Plain => write_dump(spec, file),
        Packing::Bz2 => {
            let mut enc = bzip2::write::BzEncoder::new(file, bzip2::Compression::new(6));
            let stats = write_dump(spec, &mut enc)?;
            enc.finish()?.flush()?;
            Ok(stats)
        }
        Packing::Gzip => {
            let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::fast());
            let stats = write_dump(spec, &mut enc)?;
            enc.finish()?.flush()?;
            Ok(stats)
        }
    }
}

fn write_revision<W: Write>(
    out: &mut W,
    rng: &mut ChaCha8Rng,
    spec: &DumpSpec,
    id: u64,
    parent: Option<u64>,
    when: DateTime<Utc>,
    lines: &[String],
) -> io::Result<()> {
    writeln!(out, "    <revision>")?;
    writeln!(out, "      <id>{id}</id>")?;
    if let Some(parent) = parent {
        writeln!(out, "      <parentid>{parent}</parentid>")?;
    }
    writeln!(
        out,
        "      <timestamp>{}</timestamp>",
        when.format("%Y-%m-%dT%H:%M:%SZ")
    )?;
    let deleted = rng.gen_bool(spec.deleted_fraction);
    if deleted && rng.gen_bool(0.5) {
        writeln!(out, "      <contributor deleted=\"deleted\" />")?;
    } else if rng.gen_bool(0.15) {
        let ip = if rng.gen_bool(0.8) {
            format!(
                "{}.{}.{}.{}",
                rng.gen_range(1..224),
                rng.gen::<u8>(),
                rng.gen::<u8>(),
                rng.gen_range(1..255)
            )
        } else {
            format!("2001:db8::{:x}:{:x}", rng.gen::<u16>(), rng.gen::<u16>())
        };
        writeln!(
            out,
            "      <contributor>\n        <ip>{ip}</ip>\n      </contributor>"
        )?;
    } else {
        let user = rng.gen_range(1..5000u32);
        writeln!(
            out,
            "      <contributor>\n        <username>User {} {user}</username>\n        <id>{user}</id>\n      </contributor>",
            escape(&word(rng, 2..=6))
        )?;
    }
    if rng.gen_bool(0.2) {
        writeln!(out, "      <minor />")?;
    }
    if rng.gen_bool(0.7) {
        let comment = format!("{} {}", word(rng, 2..=8), special(rng, spec));
        writeln!(out, "      <comment>{}</comment>", escape(comment.trim()))?;
    }
    writeln!(
        out,
        "      <model>wikitext</model>\n      <format>text/x-wiki</format>"
    )?;
    if deleted {
        writeln!(out, "      <text bytes=\"0\" deleted=\"deleted\" />")?;
    } else {
        let text = lines.join("\n");
        if text.is_empty() {
            writeln!(out, "      <text bytes=\"0\" xml:space=\"preserve\" />")?;
        } else {
            write!(
                out,
                "      <text bytes=\"{}\" xml:space=\"preserve\">",
                text.len()
            )?;
            out.write_all(escape(&text).as_bytes())?;
            writeln!(out, "</text>")?;
        }
    }
    let sha1: String = (0..31)
        .map(|_| char::from(b"0123456789abcdefghijklmnopqrstuvwxyz"[rng.gen_range(0..36)]))
        .collect();
    writeln!(out, "      <sha1>{sha1}</sha1>\n    </revision>")?;
    Ok(())
}

/// Line count stays within `spec.lines` once inside it.
fn edit(rng: &mut ChaCha8Rng, spec: &DumpSpec, article: u64, lines: &mut Vec<String>) {
    for _ in 0..rng.gen_range(1..=3) {
        match rng.gen_range(0..3) {
            0 if !lines.is_empty() => {
                let at = rng.gen_range(0..lines.len());
                lines[at] = line(rng, spec, article);
            }
            1 if lines.len() > (*spec.lines.start()).max(1) => {
                let at = rng.gen_range(0..lines.len());
                lines.remove(at);
            }
            _ if lines.len() >= *spec.lines.end() && !lines.is_empty() => {
                let at = rng.gen_range(0..lines.len());
                lines[at] = line(rng, spec, article);
            }
            _ => {
                let at = rng.gen_range(0..=lines.len());
                lines.insert(at, line(rng, spec, article));
            }
        }
    }
}

fn line(rng: &mut ChaCha8Rng, spec: &DumpSpec, article: u64) -> String {
    let target = rng.gen_range(spec.line_len.clone());
    let mut out = String::with_capacity(target + 32);
    while out.len() < target {
        match rng.gen_range(0..40) {
            0 if spec.link_pool > 0 => {
                let n = rng.gen_range(0..spec.link_pool);
                if rng.gen_bool(0.5) {
                    out.push_str(&format!("[[Topic {article} {n}]]"));
                } else {
                    out.push_str(&format!("[[Topic {article} {n}|label {n}]]"));
                }
            }
            1 if spec.link_pool > 0 => {
                let n = rng.gen_range(0..spec.link_pool);
                out.push_str(&format!("[https://example.org/{article}/{n} source {n}]"));
            }
            2 => out.push_str(special(rng, spec)),
            _ => out.push_str(&word(rng, 1..=12)),
        }
        out.push(' ');
    }
    out.truncate(out.trim_end().len());
    out
}

fn word(rng: &mut ChaCha8Rng, len: RangeInclusive<usize>) -> String {
    (0..rng.gen_range(len))
        .map(|_| char::from(WORD_CHARS[rng.gen_range(0..WORD_CHARS.len())]))
        .collect()
}

fn special(rng: &mut ChaCha8Rng, spec: &DumpSpec) -> &'static str {
    if spec.special_chars {
        SPECIALS[rng.gen_range(0..SPECIALS.len())]
    } else {
        "-"
    }
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 16);
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}
