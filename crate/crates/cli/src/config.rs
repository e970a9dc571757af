//! `key = value` configuration files, spliced into the argument list ahead
//! of the command-line flags. Keys also given as flags are dropped so that
//! flags win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Parses a config file into `(key, value)` pairs. `#` starts a comment.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, found {line:?}", path.display(), n + 1);
        };
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            bail!("{}:{}: bad key {key:?}", path.display(), n + 1);
        }
        out.push((key.replace('_', "-"), value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<(usize, usize, OsString)> {
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return args.get(i + 1).map(|p| (i, 2, p.clone()));
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some((i, 1, OsString::from(p)));
        }
    }
    None
}

fn flag_name(arg: &str) -> Option<&str> {
    arg.strip_prefix("--").map(|f| f.split_once('=').map_or(f, |(k, _)| k))
}

/// Replaces `--config FILE` with the file's settings as `--key=value`
/// flags placed directly after the subcommand name, skipping keys the
/// command line sets itself.
pub fn expand(args: Vec<OsString>, subcommands: &[&str]) -> Result<Vec<OsString>> {
    let Some((at, width, path)) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path).to_path_buf();
    let text = fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
    let settings = parse_config(&text, &path)?;
    let mut rest = args;
    rest.drain(at..at + width);
    let Some(sub) = rest.iter().position(|a| subcommands.contains(&a.to_string_lossy().as_ref())) else {
        bail!("--config needs a subcommand");
    };
    let given: Vec<String> = rest[sub + 1..]
        .iter()
        .filter_map(|a| flag_name(&a.to_string_lossy()).map(str::to_string))
        .collect();
    let flags = settings
        .into_iter()
        .filter(|(k, _)| !given.contains(k))
        .map(|(k, v)| OsString::from(format!("--{k}={v}")));
    rest.splice(sub + 1..sub + 1, flags);
    Ok(rest)
}
