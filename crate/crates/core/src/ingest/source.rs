use std::fs::File;
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use bzip2::read::MultiBzDecoder;
use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use super::IngestError;

const READ_BUFFER: usize = 256 * 1024;

/// Compression wrapper of a dump file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Codec {
    PlainXml,
    Bz2Stream,
    GzipStream,
}

impl Codec {
    pub fn from_extension(path: &Path) -> Option<Codec> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".bz2") {
            Some(Codec::Bz2Stream)
        } else if name.ends_with(".gz") {
            Some(Codec::GzipStream)
        } else if name.ends_with(".xml") {
            Some(Codec::PlainXml)
        } else {
            None
        }
    }

    pub fn from_magic(head: &[u8]) -> Option<Codec> {
        if head.starts_with(b"BZh") {
            return Some(Codec::Bz2Stream);
        }
        if head.starts_with(&[0x1f, 0x8b]) {
            return Some(Codec::GzipStream);
        }
        let head = head.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(head);
        match head.iter().find(|b| !b.is_ascii_whitespace()) {
            Some(b'<') => Some(Codec::PlainXml),
            _ => None,
        }
    }
}

/// A dump file on disk together with its detected codec.
#[derive(Debug, Clone)]
pub struct DumpSource {
    pub path: PathBuf,
    pub codec: Codec,
    /// Detection notes, e.g. an extension that disagrees with the magic bytes.
    pub warnings: Vec<String>,
}

impl DumpSource {
    /// Detects the codec from the magic bytes, falling back to the extension
    /// only for files too short to carry a signature.
    pub fn detect(path: impl AsRef<Path>) -> Result<Self, IngestError> {
        let path = path.as_ref().to_path_buf();
        let mut head = [0u8; 64];
        let n = File::open(&path)
            .and_then(|mut f| read_up_to(&mut f, &mut head))
            .map_err(|source| IngestError::Open {
                path: path.clone(),
                source,
            })?;
        let by_magic = Codec::from_magic(&head[..n]);
        let by_ext = Codec::from_extension(&path);
        let mut warnings = Vec::new();
        let codec = match (by_magic, by_ext) {
            (Some(magic), Some(ext)) if magic != ext => {
                warnings.push(format!(
                    "{}: extension suggests {ext:?} but content is {magic:?}; using content",
                    path.display()
                ));
                magic
            }
            (Some(magic), _) => magic,
            (None, Some(ext)) if n == 0 => ext,
            _ => return Err(IngestError::UnrecognizedCodec { path }),
        };
        Ok(Self {
            path,
            codec,
            warnings,
        })
    }

    /// Opens a decompressing byte stream; nothing is written to disk.
    pub(crate) fn open_stream(&self) -> Result<Box<dyn BufRead + Send>, IngestError> {
        let file = File::open(&self.path).map_err(|source| IngestError::Open {
            path: self.path.clone(),
            source,
        })?;
        let raw = BufReader::with_capacity(READ_BUFFER, file);
        Ok(match self.codec {
            Codec::PlainXml => Box::new(raw),
            Codec::Bz2Stream => Box::new(BufReader::with_capacity(
                READ_BUFFER,
                MultiBzDecoder::new(raw),
            )),
            Codec::GzipStream => Box::new(BufReader::with_capacity(
                READ_BUFFER,
                MultiGzDecoder::new(raw),
            )),
        })
    }
}

fn read_up_to(reader: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}
