//! Flag types shared by several subcommands, the optional TOML config file,
//! and flag-over-file merging.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::{EvalArgs, GenArgs, GradcheckArgs, TrainArgs};

/// Bad flag values or combinations; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `HxW`, e.g. `16x16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Dims {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Dims {
            height: parse(h)?,
            width: parse(w)?,
        })
    }
}

impl TryFrom<String> for Dims {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Dims> for String {
    fn from(d: Dims) -> String {
        format!("{}x{}", d.height, d.width)
    }
}

/// Inclusive `A..B` range, or a single count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl FromStr for CountRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        match s.split_once("..") {
            Some((a, b)) => Ok(CountRange {
                min: parse(a)?,
                max: parse(b.trim_start_matches('='))?,
            }),
            None => {
                let n = parse(s)?;
                Ok(CountRange { min: n, max: n })
            }
        }
    }
}

impl TryFrom<String> for CountRange {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<CountRange> for String {
    fn from(r: CountRange) -> String {
        format!("{}..{}", r.min, r.max)
    }
}

/// Comma-separated list, e.g. `20,50,100`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct List(pub Vec<usize>);

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

/// Contents of `--config FILE`. Each table holds the long flag names of one
/// subcommand; explicit flags override it.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub threads: Option<usize>,
    pub gen: GenArgs,
    pub train: TrainArgs,
    pub eval: EvalArgs,
    pub gradcheck: GradcheckArgs,
}

impl ConfigFile {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
    }
}

/// Field-wise `flag.or(file)` for structs of `Option`s.
macro_rules! merge_options {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn merged_over(self, file: $ty) -> $ty {
                $ty { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}
pub(crate) use merge_options;

/// Writes `value` as pretty JSON.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `<file>.config.json` next to a single-file output.
pub fn snapshot_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    output.with_file_name(name)
}
