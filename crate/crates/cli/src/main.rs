use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use revblocks_core::builder::{self, BuildError};
use revblocks_core::download::{self, DownloadError, DownloadOptions, DEFAULT_BASE_URL};
use revblocks_core::modifier::{self, ModifyConfig, ModifyError, ModifyOptions};
use revblocks_core::profiles::parse_profile;
use revblocks_core::progress::{ProgressEvent, ProgressSink};
use revblocks_core::warehouse::{inspect_structure, open_segment, read_metadata, StoreError};
use revblocks_core::{BuildConfig, NamespaceFilter};

/// Environment variable holding the log filter, e.g. `info` or `revblocks=debug`.
const LOG_ENV: &str = "REVBLOCKS_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Success = 0,
    Usage = 1,
    Invalid = 2,
    Partial = 3,
    Fatal = 4,
}

struct Failure {
    exit: Exit,
    message: String,
}

impl Failure {
    fn new(exit: Exit, message: impl ToString) -> Self {
        Self {
            exit,
            message: message.to_string(),
        }
    }
}

type Outcome = Result<Exit, Failure>;

#[derive(Parser)]
#[command(
    name = "revblocks",
    version,
    about = "Turn MediaWiki revision-history dumps into randomly accessible JSONL warehouses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch dump files of one snapshot from a mirror.
    Download(DownloadArgs),
    /// Convert dump files into warehouses.
    Build(BuildArgs),
    /// Apply profiles to every segment of a dataset.
    Modify(ModifyArgs),
    /// Summarize a dataset or print one article.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ReportArgs {
    /// Write the JSON report to this file instead of stdout.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Accepted for symmetry with `inspect`; reports are always JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DownloadArgs {
    /// Wiki database name, e.g. enwiki.
    #[arg(long)]
    wiki: String,
    /// Snapshot date as YYYYMMDD.
    #[arg(long)]
    date: String,
    /// File selection pattern (ehd: full edit history as bz2).
    #[arg(long, default_value = "ehd")]
    pattern: String,
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
    /// Parallel transfers; at most 3 are used.
    #[arg(long, default_value_t = 3)]
    workers: usize,
    /// Mirror root holding `<wiki>/<date>/dumpstatus.json`.
    #[arg(long, env = "REVBLOCKS_MIRROR", default_value = DEFAULT_BASE_URL)]
    mirror: String,
    /// Seconds before the first retry after a 503 or dropped connection.
    #[arg(long, default_value_t = 2.0)]
    backoff: f64,
    #[command(flatten)]
    out: ReportArgs,
}

#[derive(Args)]
struct BuildArgs {
    /// Dump file or directory of dump files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Compressed size at which a warehouse is sealed, e.g. 1GiB or 512MiB.
    #[arg(long, value_parser = parse_size, default_value = "1GiB")]
    warehouse_size: u64,
    /// Only process the first N files by name.
    #[arg(long, value_name = "N")]
    limit_files: Option<usize>,
    /// Comma-separated namespace ids, or `all`.
    #[arg(long, value_parser = parse_namespaces, default_value = "0")]
    namespaces: NamespaceFilter,
    /// Gzip level 0-9.
    #[arg(long, default_value_t = 6)]
    compression_level: u32,
    /// Replace dataset files already in the output directory.
    #[arg(long)]
    overwrite: bool,
    #[command(flatten)]
    out: ReportArgs,
}

#[derive(Args)]
struct ModifyArgs {
    /// Dataset directory produced by `build` or `modify`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Profile as NAME[:ARG]; repeat to chain in order.
    #[arg(long = "profile", value_name = "NAME[:ARG]", required = true)]
    profiles: Vec<String>,
    /// Stop at the first failing block or segment and discard the output.
    #[arg(long)]
    strict: bool,
    /// Leave out segments whose blocks were all dropped.
    #[arg(long)]
    omit_empty: bool,
    #[arg(long, value_parser = parse_size, default_value = "1GiB")]
    warehouse_size: u64,
    #[arg(long)]
    overwrite: bool,
    #[command(flatten)]
    out: ReportArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
    /// Number of blocks to decode when collecting key paths.
    #[arg(long, value_name = "N", default_value_t = 10)]
    sample: usize,
    /// Print the blocks of this article, reading only its frame.
    #[arg(long, value_name = "ID")]
    article: Option<String>,
    #[arg(long)]
    json: bool,
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    let (digits, unit) = s.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("invalid size {s:?}"))?;
    let factor: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        "t" | "tb" | "tib" => 1 << 40,
        other => return Err(format!("unknown size unit {other:?}")),
    };
    n.checked_mul(factor)
        .ok_or_else(|| format!("size {s:?} is too large"))
}

fn parse_namespaces(s: &str) -> Result<NamespaceFilter, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(NamespaceFilter::All);
    }
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<i64>()
                .map_err(|_| format!("invalid namespace {part:?}"))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(NamespaceFilter::Only)
}

fn progress_logger() -> ProgressSink {
    Arc::new(|event: &ProgressEvent| {
        let line = serde_json::to_string(event).unwrap_or_default();
        match event {
            ProgressEvent::FileRetry { .. }
            | ProgressEvent::FileFailed { .. }
            | ProgressEvent::SegmentFailed { .. } => {
                warn!("{line}")
            }
            ProgressEvent::Aborted { .. } => error!("{line}"),
            _ => info!("{line}"),
        }
    })
}

/// Prints `report` as the single JSON document on stdout, or writes it to
/// `args.report`.
fn emit(report: &impl Serialize, args: &ReportArgs) -> Result<(), Failure> {
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| Failure::new(Exit::Fatal, e))?;
    text.push('\n');
    match &args.report {
        Some(path) => fs::write(path, text).map_err(|e| {
            Failure::new(
                Exit::Fatal,
                format!("cannot write report {}: {e}", path.display()),
            )
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::new(Exit::Fatal, e))
        }
    }
}

/// 0 when nothing failed, 3 when something failed but output exists, 4
/// when nothing was produced.
fn completion(failures: bool, produced: bool) -> Exit {
    match (failures, produced) {
        (false, _) => Exit::Success,
        (true, true) => Exit::Partial,
        (true, false) => Exit::Fatal,
    }
}

fn store_exit(err: &StoreError) -> Exit {
    match err {
        StoreError::OutputNotEmpty { .. }
        | StoreError::NoWarehouses { .. }
        | StoreError::MissingSidecar { .. }
        | StoreError::BadMetadataLine { .. }
        | StoreError::Contiguity(_) => Exit::Invalid,
        _ => Exit::Fatal,
    }
}

fn run_download(args: DownloadArgs) -> Outcome {
    let files = download::list_files(&args.mirror, &args.wiki, &args.date, &args.pattern).map_err(
        |err| {
            let exit = match err {
                DownloadError::UnknownPattern(_) => Exit::Usage,
                DownloadError::BadDate(_)
                | DownloadError::BadWiki(_)
                | DownloadError::BadUrl { .. } => Exit::Invalid,
                _ => Exit::Fatal,
            };
            Failure::new(exit, err)
        },
    )?;
    if files.is_empty() {
        return Err(Failure::new(
            Exit::Invalid,
            format!("no files match pattern {}", args.pattern),
        ));
    }
    if !args.backoff.is_finite() || args.backoff < 0.0 {
        return Err(Failure::new(
            Exit::Usage,
            "--backoff must be a non-negative number of seconds",
        ));
    }
    info!(
        "{} files selected from {}/{}/{}",
        files.len(),
        args.mirror,
        args.wiki,
        args.date
    );
    let options = DownloadOptions {
        workers: args.workers,
        backoff: Duration::from_secs_f64(args.backoff),
        ..DownloadOptions::default()
    };
    let report = download::download(&files, &args.output, &options)
        .map_err(|e| Failure::new(Exit::Fatal, e))?;
    for file in report.files.iter().filter(|f| f.error.is_some()) {
        warn!(
            "{}: {}",
            file.file_name,
            file.error.as_deref().unwrap_or_default()
        );
    }
    let doc = json!({
        "wiki": args.wiki,
        "date": args.date,
        "pattern": args.pattern,
        "output": args.output,
        "requested_workers": args.workers,
        "effective_workers": report.effective_workers,
        "files": report.files,
        "files_failed": report.failed(),
        "bytes_transferred": report.bytes_transferred,
    });
    emit(&doc, &args.out)?;
    Ok(completion(
        report.failed() > 0,
        report.failed() < report.files.len(),
    ))
}

fn run_build(args: BuildArgs) -> Outcome {
    let invalid = |err: BuildError| {
        let exit = match &err {
            BuildError::Config(_) | BuildError::MissingInput(_) | BuildError::EmptyWorklist(_) => {
                Exit::Invalid
            }
            BuildError::Store(store) => store_exit(store),
            BuildError::Io { .. } => Exit::Fatal,
        };
        Failure::new(exit, err)
    };
    let mut worklist = builder::preload(&args.input).map_err(invalid)?;
    if let Some(n) = args.limit_files {
        worklist.limit(n);
    }
    info!(
        "{} input files, {} bytes",
        worklist.len(),
        worklist.total_bytes()
    );
    let config = BuildConfig {
        num_workers: args.workers,
        warehouse_size_limit: args.warehouse_size,
        compression_level: args.compression_level,
        namespaces: args.namespaces,
        overwrite: args.overwrite,
        ..BuildConfig::new(&args.output)
    };
    let options = builder::BuildOptions {
        progress: progress_logger(),
        ..builder::BuildOptions::default()
    };
    let report = builder::build_with(&worklist, &config, options).map_err(invalid)?;
    for warning in &report.warnings {
        warn!("{warning}");
    }
    emit(&report, &args.out)?;
    if report.aborted.is_some() {
        return Ok(Exit::Fatal);
    }
    Ok(completion(
        report.has_failures(),
        report.files_processed > 0,
    ))
}

fn run_modify(args: ModifyArgs) -> Outcome {
    let profiles = args
        .profiles
        .iter()
        .map(|spec| parse_profile(spec))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::new(Exit::Usage, e))?;
    let failure = |err: ModifyError| {
        let exit = match &err {
            ModifyError::NoProfiles => Exit::Usage,
            ModifyError::Config(_) => Exit::Invalid,
            ModifyError::Store(store) => store_exit(store),
            ModifyError::Strict(_) => Exit::Fatal,
        };
        Failure::new(exit, err)
    };
    let worklist = modifier::preload(&args.input).map_err(failure)?;
    info!("{} segments in {}", worklist.len(), args.input.display());
    let config = ModifyConfig {
        num_workers: args.workers,
        warehouse_size_limit: args.warehouse_size,
        overwrite: args.overwrite,
        strict: args.strict,
        omit_empty_segments: args.omit_empty,
        ..ModifyConfig::new(&args.output)
    };
    let options = ModifyOptions {
        progress: progress_logger(),
    };
    let report = modifier::start_with(&worklist, &profiles, &config, options).map_err(failure)?;
    for message in &report.errors {
        warn!("{message}");
    }
    emit(&report, &args.out)?;
    if report.aborted.is_some() {
        return Ok(Exit::Fatal);
    }
    let produced = report.segments_out > 0 || report.segments_omitted > 0;
    Ok(completion(report.has_failures(), produced))
}

fn run_inspect(args: InspectArgs) -> Outcome {
    let store = |err: StoreError| Failure::new(store_exit(&err), err);
    if let Some(id) = &args.article {
        let dataset = read_metadata(&args.input).map_err(|err| match err {
            // Reading one article does not need the whole dataset to be tidy.
            StoreError::Contiguity(_) => Failure::new(Exit::Invalid, err),
            other => store(other),
        })?;
        let (entry, meta) = dataset.find_article(id).ok_or_else(|| {
            Failure::new(
                Exit::Invalid,
                format!("article {id} not found in {}", args.input.display()),
            )
        })?;
        let lines = open_segment(&entry.path, meta.byte_start, meta.byte_length)
            .map_err(store)?
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::new(Exit::Fatal, e))?;
        let mut out = std::io::stdout().lock();
        let written = if args.json {
            let blocks = lines
                .iter()
                .map(|l| serde_json::from_slice::<Value>(l))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::new(Exit::Fatal, format!("article {id}: {e}")))?;
            let doc = json!({"segment": meta, "blocks": blocks});
            serde_json::to_writer_pretty(&mut out, &doc)
                .map_err(std::io::Error::from)
                .and_then(|_| writeln!(out))
        } else {
            lines.iter().try_for_each(|l| out.write_all(l))
        };
        written
            .and_then(|_| out.flush())
            .map_err(|e| Failure::new(Exit::Fatal, e))?;
        return Ok(Exit::Success);
    }

    let report = inspect_structure(&args.input, args.sample).map_err(store)?;
    let mut out = std::io::stdout().lock();
    let written = if args.json {
        serde_json::to_writer_pretty(&mut out, &report)
            .map_err(std::io::Error::from)
            .and_then(|_| writeln!(out))
    } else {
        print_structure(&mut out, &args.input, &report)
    };
    written
        .and_then(|_| out.flush())
        .map_err(|e| Failure::new(Exit::Fatal, e))?;
    Ok(if report.violations.is_empty() {
        Exit::Success
    } else {
        Exit::Invalid
    })
}

fn print_structure(
    out: &mut impl Write,
    dir: &Path,
    report: &revblocks_core::warehouse::StructureReport,
) -> std::io::Result<()> {
    writeln!(out, "dataset             {}", dir.display())?;
    writeln!(out, "warehouses          {}", report.warehouses)?;
    writeln!(out, "segments            {}", report.segments)?;
    writeln!(out, "revisions           {}", report.total_revisions)?;
    writeln!(out, "compressed bytes    {}", report.compressed_bytes)?;
    writeln!(out, "uncompressed bytes  {}", report.uncompressed_bytes)?;
    writeln!(out, "sampled blocks      {}", report.sampled_blocks)?;
    if report.unparseable_samples > 0 {
        writeln!(out, "unparseable samples {}", report.unparseable_samples)?;
    }
    writeln!(out, "key paths")?;
    for path in &report.key_paths {
        writeln!(out, "  {path}")?;
    }
    for violation in &report.violations {
        writeln!(out, "violation: {violation}")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return ExitCode::from(if err.use_stderr() {
                Exit::Usage as u8
            } else {
                Exit::Success as u8
            });
        }
    };
    let outcome = match cli.command {
        Command::Download(args) => run_download(args),
        Command::Build(args) => run_build(args),
        Command::Modify(args) => run_modify(args),
        Command::Inspect(args) => run_inspect(args),
    };
    let exit = outcome.unwrap_or_else(|failure| {
        eprintln!("error: {}", failure.message);
        failure.exit
    });
    ExitCode::from(exit as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("1GiB"), Ok(1 << 30));
        assert_eq!(parse_size("512MiB"), Ok(512 << 20));
        assert_eq!(parse_size("2048"), Ok(2048));
        assert_eq!(parse_size("3k"), Ok(3072));
        assert!(parse_size("1XB").is_err());
        assert!(parse_size("GiB").is_err());
    }

    #[test]
    fn namespaces() {
        assert_eq!(parse_namespaces("all"), Ok(NamespaceFilter::All));
        assert_eq!(
            parse_namespaces("0, 1"),
            Ok(NamespaceFilter::Only(vec![0, 1]))
        );
        assert!(parse_namespaces("main").is_err());
    }

    #[test]
    fn exit_mapping() {
        assert_eq!(completion(false, false), Exit::Success);
        assert_eq!(completion(true, true), Exit::Partial);
        assert_eq!(completion(true, false), Exit::Fatal);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
