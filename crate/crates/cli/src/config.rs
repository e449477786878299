//! `key=value` config files expanded into command-line flags.
//!
//! File entries are inserted right after the subcommand, so flags given on
//! the command line override them.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Manifest keys that describe a run rather than configure it.
const INFO_PREFIX: &str = "info.";
const COMMAND_KEY: &str = "command";

pub const SUBCOMMANDS: [&str; 4] = ["make-data", "train", "sample", "eval"];

/// Parse `key=value` lines into `--key=value` flags. `true` becomes a bare
/// flag and `false` drops the key. Blank lines and `#` comments are skipped.
pub fn flags_from_text(text: &str) -> Result<Vec<OsString>> {
    let mut flags = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("line {}: expected key=value, got `{line}`", no + 1);
        };
        let key = key.trim();
        if key == COMMAND_KEY || key.starts_with(INFO_PREFIX) {
            continue;
        }
        let flag = key.replace('_', "-");
        match value.trim() {
            "true" => flags.push(format!("--{flag}").into()),
            "false" => {}
            v => flags.push(format!("--{flag}={v}").into()),
        }
    }
    Ok(flags)
}

pub fn flags_from_file(path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    flags_from_text(&text).with_context(|| format!("in config {}", path.display()))
}

/// Replace `--config <file>` with the file's flags, placed directly after
/// the subcommand name.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut out = Vec::with_capacity(args.len());
    let mut config = None;
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            let Some(path) = iter.next() else {
                bail!("--config needs a file");
            };
            config = Some(path);
        } else if let Some(path) = s.strip_prefix("--config=") {
            config = Some(path.into());
        } else {
            out.push(arg);
        }
    }
    let Some(path) = config else {
        return Ok(out);
    };
    let flags = flags_from_file(Path::new(&path))?;
    let Some(pos) = out.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        bail!("--config given without a subcommand");
    };
    out.splice(pos + 1..pos + 1, flags);
    Ok(out)
}

/// Renders `key=value` manifest lines.
#[derive(Default)]
pub struct Manifest {
    text: String,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set(COMMAND_KEY, command);
        m
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.text.push_str(&format!("{key}={value}\n"));
        self
    }

    pub fn set_opt<T: std::fmt::Display>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.set(key, v);
        }
        self
    }

    /// A key the config loader skips.
    pub fn info(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.set(&format!("{INFO_PREFIX}{key}"), value)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}
