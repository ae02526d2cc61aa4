//! The `spotdiff` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 when data or a model
//! could not be processed.

pub mod args;
pub mod cache;
pub mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::Cli;
use commands::{dispatch, Io};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Parses a `key = value` file. Blank lines and `#` comments are skipped;
/// values may be quoted.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else { bail!("line {}: expected key = value", n + 1) };
        let key = k.trim().replace('_', "-");
        let v = v.trim();
        let value = v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v);
        if key.is_empty() {
            bail!("line {}: empty key", n + 1);
        }
        out.push((key, value.to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Inserts config entries as flags right after the subcommand, so flags on
/// the command line win. Keys the subcommand does not take are ignored;
/// `true` becomes a bare switch and `false` is dropped.
fn inject_config(argv: Vec<OsString>, entries: &[(String, String)]) -> Vec<OsString> {
    let mut pos = 1;
    while pos < argv.len() {
        let s = argv[pos].to_string_lossy();
        if s == "--config" {
            pos += 2;
        } else if s.starts_with('-') {
            pos += 1;
        } else {
            break;
        }
    }
    if pos >= argv.len() {
        return argv;
    }
    let cmd = Cli::command();
    let name = argv[pos].to_string_lossy();
    let Some(sub) = cmd.find_subcommand(name.as_ref()) else { return argv };
    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else { continue };
        let takes_value = arg.get_action().takes_values();
        match (takes_value, value.as_str()) {
            (true, _) => {
                extra.push(format!("--{key}").into());
                extra.push(value.into());
            }
            (false, "true") => extra.push(format!("--{key}").into()),
            _ => {}
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&argv[pos + 1..]);
    out
}

fn expand_argv(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else { return Ok(argv) };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse_config(&text).with_context(|| format!("in config {}", path.display()))?;
    Ok(inject_config(argv, &entries))
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv = match expand_argv(argv.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = if e.use_stderr() { e.render().ansi().to_string() } else { e.render().to_string() };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{text}");
            return code;
        }
    };
    let mut io = Io { out, err };
    match dispatch(&cli.command, &mut io) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e:#}");
            EXIT_DATA
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr());
    run_with(argv, &mut out, &mut err)
}
