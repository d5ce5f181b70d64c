use std::collections::VecDeque;
use std::io::{self, BufRead, Cursor, Read};
use std::sync::Arc;

use quick_xml::events::{BytesStart, Event};
use quick_xml::name::QName;
use quick_xml::{Reader, XmlVersion};

use super::source::DumpSource;
use super::{DumpEvent, IngestError, IngestOptions, RecoveryMode};
use crate::model::{Block, Contributor, TextPayload};

type Input = Box<dyn BufRead + Send>;

/// Event buffers that grew past this are released after each call.
const BUFFER_RETAIN: usize = 1 << 20;
const PAGE_TAG: &[u8] = b"<page";

/// Opens a dump file and positions the stream just inside `<mediawiki>`.
pub fn open_dump(source: &DumpSource, options: IngestOptions) -> Result<DumpReader, IngestError> {
    let mut reader = DumpReader::from_input(source.open_stream()?, options)?;
    reader.warnings.extend(source.warnings.iter().cloned());
    Ok(reader)
}

/// Pull-based event stream over one dump. Holds at most one revision in
/// memory at a time.
pub struct DumpReader {
    xml: Option<Reader<Input>>,
    buf: Vec<u8>,
    base_offset: u64,
    pending: VecDeque<DumpEvent>,
    state: State,
    options: IngestOptions,
    warnings: Vec<String>,
}

enum State {
    Top,
    Page {
        article_id: String,
        at_revision: bool,
    },
    Recover {
        open_article: Option<String>,
    },
    Finished,
}

enum PageEdge {
    Revision,
    End,
}

struct PageHeader {
    id: Option<String>,
    title: String,
    namespace: Option<i64>,
}

/// Low-level failure before it is attributed to an article.
enum Fault {
    Xml { offset: u64, message: String },
    Io { offset: u64, source: Arc<io::Error> },
}

enum Tok {
    Start(String, Vec<(String, String)>),
    Empty(String, Vec<(String, String)>),
    End(String),
    Other,
    Eof,
}

impl DumpReader {
    /// Wraps an already-decompressed XML byte stream.
    pub fn from_input(input: Input, options: IngestOptions) -> Result<Self, IngestError> {
        let mut this = Self {
            xml: Some(new_xml_reader(input)),
            buf: Vec::with_capacity(64 * 1024),
            base_offset: 0,
            pending: VecDeque::new(),
            state: State::Top,
            options,
            warnings: Vec::new(),
        };
        this.read_root()?;
        Ok(this)
    }

    pub fn from_bytes(
        bytes: impl Into<Vec<u8>>,
        options: IngestOptions,
    ) -> Result<Self, IngestError> {
        Self::from_input(Box::new(Cursor::new(bytes.into())), options)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Bytes of decompressed XML consumed so far.
    pub fn byte_offset(&self) -> u64 {
        self.base_offset + self.xml.as_ref().map_or(0, |x| x.buffer_position())
    }

    fn read_root(&mut self) -> Result<(), IngestError> {
        loop {
            match self.token().map_err(|f| fault_to_error(f, None))? {
                Tok::Start(name, _) if name == "mediawiki" => return Ok(()),
                Tok::Empty(name, _) if name == "mediawiki" => {
                    self.pending.push_back(DumpEvent::DumpEnd);
                    self.state = State::Finished;
                    return Ok(());
                }
                Tok::Start(name, _) | Tok::Empty(name, _) => {
                    return Err(IngestError::NotMediaWiki { found: name })
                }
                Tok::End(name) => {
                    return Err(IngestError::NotMediaWiki {
                        found: format!("/{name}"),
                    })
                }
                Tok::Eof => {
                    return Err(IngestError::NotMediaWiki {
                        found: "<none>".into(),
                    })
                }
                Tok::Other => {}
            }
        }
    }

    /// Returns the next event, `None` once the stream is exhausted.
    ///
    /// A recoverable error leaves the reader ready to resume at the next
    /// `<page>` (unless [`RecoveryMode::Abort`] is set); an article that was
    /// open when the error hit is closed with an `ArticleEnd` first.
    pub fn next_event(&mut self) -> Option<Result<DumpEvent, IngestError>> {
        if self.buf.capacity() > BUFFER_RETAIN {
            self.buf = Vec::with_capacity(64 * 1024);
        }
        if let Some(event) = self.pending.pop_front() {
            return Some(Ok(event));
        }
        match std::mem::replace(&mut self.state, State::Finished) {
            State::Finished => None,
            State::Top => self.step_top(),
            State::Page {
                article_id,
                at_revision,
            } => self.step_page(article_id, at_revision),
            State::Recover { open_article } => self.step_recover(open_article),
        }
    }

    fn step_top(&mut self) -> Option<Result<DumpEvent, IngestError>> {
        loop {
            let tok = match self.token() {
                Ok(tok) => tok,
                Err(fault) => return Some(Err(self.fail(fault, None))),
            };
            match tok {
                Tok::Start(name, _) if name == "page" => {
                    let (header, edge) = match self.page_header() {
                        Ok(found) => found,
                        Err((fault, id)) => return Some(Err(self.fail(fault, id))),
                    };
                    let Some(article_id) = header.id else {
                        let fault = Fault::Xml {
                            offset: self.byte_offset(),
                            message: "page without <id>".into(),
                        };
                        return Some(Err(self.fail(fault, None)));
                    };
                    if !self.options.namespaces.accepts(header.namespace) {
                        if let PageEdge::Revision = edge {
                            if let Err(fault) = self.skip("page") {
                                return Some(Err(self.fail(fault, Some(article_id))));
                            }
                        }
                        continue;
                    }
                    match edge {
                        PageEdge::Revision => {
                            self.state = State::Page {
                                article_id: article_id.clone(),
                                at_revision: true,
                            };
                        }
                        PageEdge::End => {
                            self.pending.push_back(DumpEvent::ArticleEnd {
                                article_id: article_id.clone(),
                            });
                            self.state = State::Top;
                        }
                    }
                    return Some(Ok(DumpEvent::ArticleStart {
                        article_id,
                        title: header.title,
                        namespace: header.namespace,
                    }));
                }
                Tok::Start(name, _) => {
                    if let Err(fault) = self.skip(&name) {
                        return Some(Err(self.fail(fault, None)));
                    }
                }
                Tok::End(name) if name == "mediawiki" => return Some(Ok(DumpEvent::DumpEnd)),
                Tok::End(name) => {
                    let fault = Fault::Xml {
                        offset: self.byte_offset(),
                        message: format!("unexpected </{name}>"),
                    };
                    return Some(Err(self.fail(fault, None)));
                }
                Tok::Eof => {
                    self.warnings
                        .push("document ended without </mediawiki>".to_string());
                    return Some(Ok(DumpEvent::DumpEnd));
                }
                Tok::Empty(..) | Tok::Other => {}
            }
        }
    }

    fn step_page(
        &mut self,
        article_id: String,
        mut at_revision: bool,
    ) -> Option<Result<DumpEvent, IngestError>> {
        loop {
            if at_revision {
                let start = self.byte_offset();
                return match self.revision(&article_id) {
                    Ok(Ok(block)) => {
                        self.state = State::Page {
                            article_id,
                            at_revision: false,
                        };
                        Some(Ok(DumpEvent::Revision(block)))
                    }
                    Ok(Err(message)) => {
                        let err = IngestError::MalformedRevision {
                            offset: start,
                            article_id: article_id.clone(),
                            message,
                        };
                        self.state = State::Page {
                            article_id,
                            at_revision: false,
                        };
                        Some(Err(err))
                    }
                    Err(fault) => Some(Err(self.fail(fault, Some(article_id)))),
                };
            }
            let tok = match self.token() {
                Ok(tok) => tok,
                Err(fault) => return Some(Err(self.fail(fault, Some(article_id)))),
            };
            match tok {
                Tok::Start(name, _) if name == "revision" => at_revision = true,
                Tok::Start(name, _) => {
                    if let Err(fault) = self.skip(&name) {
                        return Some(Err(self.fail(fault, Some(article_id))));
                    }
                }
                Tok::End(name) if name == "page" => {
                    self.state = State::Top;
                    return Some(Ok(DumpEvent::ArticleEnd { article_id }));
                }
                Tok::End(name) => {
                    let fault = Fault::Xml {
                        offset: self.byte_offset(),
                        message: format!("unexpected </{name}> inside <page>"),
                    };
                    return Some(Err(self.fail(fault, Some(article_id))));
                }
                Tok::Eof => {
                    let fault = Fault::Xml {
                        offset: self.byte_offset(),
                        message: "unexpected end of document inside <page>".into(),
                    };
                    return Some(Err(self.fail(fault, Some(article_id))));
                }
                Tok::Empty(..) | Tok::Other => {}
            }
        }
    }

    fn step_recover(
        &mut self,
        open_article: Option<String>,
    ) -> Option<Result<DumpEvent, IngestError>> {
        match self.seek_next_page() {
            Ok(true) => self.state = State::Top,
            Ok(false) => self.pending.push_back(DumpEvent::DumpEnd),
            Err(source) => {
                return Some(Err(IngestError::Io {
                    offset: self.byte_offset(),
                    source: Arc::new(source),
                }))
            }
        }
        match open_article {
            Some(article_id) => Some(Ok(DumpEvent::ArticleEnd { article_id })),
            None => self.next_event(),
        }
    }

    /// Converts a fault into an error and decides how the stream continues.
    fn fail(&mut self, fault: Fault, article_id: Option<String>) -> IngestError {
        let recoverable = matches!(fault, Fault::Xml { .. });
        self.state = if recoverable && self.options.recovery == RecoveryMode::SkipArticle {
            State::Recover {
                open_article: article_id.clone(),
            }
        } else {
            State::Finished
        };
        fault_to_error(fault, article_id)
    }

    /// Skips raw bytes up to the next `<page` tag and restarts the XML
    /// reader there. Returns false at end of input.
    fn seek_next_page(&mut self) -> io::Result<bool> {
        let xml = self.xml.take().expect("xml reader present");
        self.base_offset += xml.buffer_position();
        let mut input = xml.into_inner();
        let mut matched = 0usize;
        let mut skipped = 0u64;
        loop {
            let chunk = input.fill_buf()?;
            if chunk.is_empty() {
                self.xml = Some(new_xml_reader(Box::new(io::empty())));
                self.base_offset += skipped;
                return Ok(false);
            }
            let mut found = None;
            for (i, &b) in chunk.iter().enumerate() {
                if matched == PAGE_TAG.len() {
                    if b == b'>' || b == b'/' || b.is_ascii_whitespace() {
                        found = Some(i);
                        break;
                    }
                    matched = 0;
                }
                if b == PAGE_TAG[matched] {
                    matched += 1;
                } else {
                    matched = usize::from(b == b'<');
                }
            }
            let used = found.unwrap_or(chunk.len());
            input.consume(used);
            skipped += used as u64;
            if found.is_some() {
                let replay = Cursor::new(PAGE_TAG).chain(input);
                self.base_offset += skipped - PAGE_TAG.len() as u64;
                self.xml = Some(new_xml_reader(Box::new(io::BufReader::new(replay))));
                return Ok(true);
            }
        }
    }

    fn fault_from(&self, err: quick_xml::Error) -> Fault {
        let xml = self.xml.as_ref().expect("xml reader present");
        match err {
            quick_xml::Error::Io(source) => Fault::Io {
                offset: self.base_offset + xml.buffer_position(),
                source,
            },
            other => Fault::Xml {
                offset: self.base_offset + xml.error_position(),
                message: other.to_string(),
            },
        }
    }

    fn token(&mut self) -> Result<Tok, Fault> {
        self.buf.clear();
        let xml = self.xml.as_mut().expect("xml reader present");
        let event = match xml.read_event_into(&mut self.buf) {
            Ok(event) => event,
            Err(err) => {
                let fault = self.fault_from(err);
                return Err(fault);
            }
        };
        let tok = match event {
            Event::Start(e) => Tok::Start(e.name().0.to_owned(), attributes(&e)),
            Event::Empty(e) => Tok::Empty(e.name().0.to_owned(), attributes(&e)),
            Event::End(e) => Tok::End(e.name().0.to_owned()),
            Event::Eof => Tok::Eof,
            _ => Tok::Other,
        };
        Ok(tok)
    }

    fn skip(&mut self, name: &str) -> Result<(), Fault> {
        self.buf.clear();
        let xml = self.xml.as_mut().expect("xml reader present");
        match xml.read_to_end_into(QName(name), &mut self.buf) {
            Ok(_) => Ok(()),
            Err(err) => Err(self.fault_from(err)),
        }
    }

    /// Reads character content up to `</name>`, decoding entities.
    fn text(&mut self, name: &str) -> Result<String, Fault> {
        let mut out = String::new();
        loop {
            self.buf.clear();
            let xml = self.xml.as_mut().expect("xml reader present");
            let event = match xml.read_event_into(&mut self.buf) {
                Ok(event) => event,
                Err(err) => return Err(self.fault_from(err)),
            };
            let message = match event {
                Event::Text(t) => {
                    out.push_str(&t.xml10_content());
                    continue;
                }
                Event::CData(t) => {
                    out.push_str(&t.xml10_content());
                    continue;
                }
                Event::GeneralRef(r) => match r.resolve_char_ref() {
                    Ok(Some(ch)) => {
                        out.push(ch);
                        continue;
                    }
                    Ok(None) => match quick_xml::escape::resolve_predefined_entity(&r) {
                        Some(s) => {
                            out.push_str(s);
                            continue;
                        }
                        None => format!("unknown entity &{};", &*r),
                    },
                    Err(err) => err.to_string(),
                },
                Event::End(e) if e.name().0 == name => return Ok(out),
                Event::End(e) => format!("unexpected </{}> inside <{name}>", e.name().0),
                Event::Start(e) | Event::Empty(e) => {
                    format!("unexpected <{}> inside <{name}>", e.name().0)
                }
                Event::Eof => format!("unexpected end of document inside <{name}>"),
                Event::Comment(_) | Event::PI(_) | Event::Decl(_) | Event::DocType(_) => continue,
            };
            let offset = self.byte_offset();
            return Err(Fault::Xml { offset, message });
        }
    }

    fn page_header(&mut self) -> Result<(PageHeader, PageEdge), (Fault, Option<String>)> {
        let mut header = PageHeader {
            id: None,
            title: String::new(),
            namespace: None,
        };
        loop {
            let id = header.id.clone();
            let tok = self.token().map_err(|f| (f, id.clone()))?;
            match tok {
                Tok::Start(name, _) => match name.as_str() {
                    "title" => header.title = self.text("title").map_err(|f| (f, id))?,
                    "id" => {
                        header.id = Some(self.text("id").map_err(|f| (f, id))?.trim().to_string())
                    }
                    "ns" => {
                        let raw = self.text("ns").map_err(|f| (f, id.clone()))?;
                        let ns = raw.trim().parse().map_err(|_| {
                            let offset = self.byte_offset();
                            let fault = Fault::Xml {
                                offset,
                                message: format!("invalid namespace {raw:?}"),
                            };
                            (fault, id)
                        })?;
                        header.namespace = Some(ns);
                    }
                    "revision" => return Ok((header, PageEdge::Revision)),
                    other => {
                        let other = other.to_string();
                        self.skip(&other).map_err(|f| (f, id))?
                    }
                },
                Tok::End(name) if name == "page" => return Ok((header, PageEdge::End)),
                Tok::End(name) => {
                    let offset = self.byte_offset();
                    let message = format!("unexpected </{name}> inside <page>");
                    return Err((Fault::Xml { offset, message }, id));
                }
                Tok::Eof => {
                    let offset = self.byte_offset();
                    let message = "unexpected end of document inside <page>".to_string();
                    return Err((Fault::Xml { offset, message }, id));
                }
                Tok::Empty(..) | Tok::Other => {}
            }
        }
    }

    /// Parses a `<revision>` whose start tag was just consumed. The outer
    /// error is an XML fault; the inner one a revision missing required data.
    fn revision(&mut self, article_id: &str) -> Result<Result<Block, String>, Fault> {
        let mut revision_id = None;
        let mut timestamp = None;
        let mut contributor = Contributor::default();
        let mut comment = None;
        let mut format = None;
        let mut text = TextPayload::default();
        let mut sha1 = None;

        loop {
            match self.token()? {
                Tok::Start(name, attrs) => match name.as_str() {
                    "id" => revision_id = Some(self.text("id")?.trim().to_string()),
                    "timestamp" => timestamp = Some(self.text("timestamp")?.trim().to_string()),
                    "contributor" => contributor = self.contributor()?,
                    "comment" => comment = Some(self.text("comment")?),
                    "format" => format = Some(self.text("format")?),
                    "text" => {
                        text = text_payload(&attrs);
                        text.text = self.text("text")?;
                    }
                    "sha1" => sha1 = Some(self.text("sha1")?).filter(|s| !s.is_empty()),
                    other => {
                        let other = other.to_string();
                        self.skip(&other)?
                    }
                },
                Tok::Empty(name, attrs) => {
                    if name == "text" {
                        text = text_payload(&attrs);
                    }
                }
                Tok::End(name) if name == "revision" => break,
                Tok::End(name) => {
                    let offset = self.byte_offset();
                    return Err(Fault::Xml {
                        offset,
                        message: format!("unexpected </{name}> inside <revision>"),
                    });
                }
                Tok::Eof => {
                    let offset = self.byte_offset();
                    return Err(Fault::Xml {
                        offset,
                        message: "unexpected end of document inside <revision>".into(),
                    });
                }
                Tok::Other => {}
            }
        }

        let (Some(revision_id), Some(timestamp)) = (revision_id, timestamp) else {
            return Ok(Err("revision lacks <id> or <timestamp>".into()));
        };
        Ok(Ok(Block {
            article_id: article_id.to_string(),
            revision_id,
            timestamp,
            contributor,
            comment,
            format,
            text,
            sha1,
            extras: Default::default(),
        }))
    }

    fn contributor(&mut self) -> Result<Contributor, Fault> {
        let mut contributor = Contributor::default();
        loop {
            match self.token()? {
                Tok::Start(name, _) => match name.as_str() {
                    "username" => contributor.username = Some(self.text("username")?),
                    "id" => contributor.id = Some(self.text("id")?.trim().to_string()),
                    "ip" => contributor.ip = Some(self.text("ip")?.trim().to_string()),
                    other => {
                        let other = other.to_string();
                        self.skip(&other)?
                    }
                },
                Tok::End(name) if name == "contributor" => return Ok(contributor),
                Tok::End(name) => {
                    let offset = self.byte_offset();
                    return Err(Fault::Xml {
                        offset,
                        message: format!("unexpected </{name}> inside <contributor>"),
                    });
                }
                Tok::Eof => {
                    let offset = self.byte_offset();
                    return Err(Fault::Xml {
                        offset,
                        message: "unexpected end of document inside <contributor>".into(),
                    });
                }
                Tok::Empty(..) | Tok::Other => {}
            }
        }
    }
}

impl Iterator for DumpReader {
    type Item = Result<DumpEvent, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_event()
    }
}

fn new_xml_reader(input: Input) -> Reader<Input> {
    let mut reader = Reader::from_reader(input);
    let config = reader.config_mut();
    config.trim_text(false);
    config.check_end_names = true;
    config.allow_unmatched_ends = true;
    config.expand_empty_elements = false;
    reader
}

fn attributes(e: &BytesStart<'_>) -> Vec<(String, String)> {
    e.attributes()
        .filter_map(Result::ok)
        .map(|a| {
            let value = a
                .normalized_value(XmlVersion::Implicit1_0)
                .map(|v| v.into_owned())
                .unwrap_or_else(|_| a.value.to_string());
            (a.key.0.to_string(), value)
        })
        .collect()
}

fn text_payload(attrs: &[(String, String)]) -> TextPayload {
    let mut payload = TextPayload::default();
    for (key, value) in attrs {
        match key.as_str() {
            "bytes" => payload.bytes = Some(value.clone()),
            "deleted" => payload.deleted = true,
            _ => {}
        }
    }
    payload
}

fn fault_to_error(fault: Fault, article_id: Option<String>) -> IngestError {
    match fault {
        Fault::Xml { offset, message } => IngestError::Malformed {
            offset,
            article_id,
            message,
        },
        Fault::Io { offset, source } => IngestError::Io { offset, source },
    }
}
