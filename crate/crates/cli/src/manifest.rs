//! Run manifests: flat `key=value` files whose keys are the long flag names
//! of the subcommand that wrote them. Derived facts (config hash, dataset
//! fingerprint) are `# key=value` comment lines and are skipped on replay.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Keys left out of the config hash: where results go does not change them.
const UNHASHED: &[&str] = &["out"];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short SHA-256 of the resolved settings, excluding the output location.
pub fn config_hash(command: &str, pairs: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    h.update(format!("command={command}\n"));
    for (k, v) in pairs.iter().filter(|(k, _)| !UNHASHED.contains(k)) {
        h.update(format!("{k}={v}\n"));
    }
    hex(&h.finalize()[..8])
}

/// First line of every text output.
pub fn stamp(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

/// Short SHA-256 over the contents of `files`, in order; missing files are
/// skipped but their names still count.
pub fn fingerprint(files: &[std::path::PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for f in files {
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        h.update(name.as_bytes());
        if f.exists() {
            h.update(fs::read(f).map_err(|e| CliError::io(f, e))?);
        }
    }
    Ok(hex(&h.finalize()[..8]))
}

pub fn render(command: &str, pairs: &[(&str, String)], comments: &[(&str, String)]) -> String {
    let mut out = String::new();
    for (k, v) in comments {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str(&format!("command={command}\n"));
    for (k, v) in pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub pairs: Vec<(String, String)>,
    pub comments: BTreeMap<String, String>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Argument vector that reruns the recorded command.
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec![self.command.clone()];
        for (k, v) in &self.pairs {
            args.push(format!("--{k}"));
            args.push(v.clone());
        }
        args
    }
}

pub fn parse(text: &str) -> Result<Manifest> {
    let mut command = None;
    let mut pairs = Vec::new();
    let mut comments = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some((k, v)) = c.trim().split_once('=') {
                comments.insert(k.to_string(), v.to_string());
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Manifest(format!("line {} is not key=value", n + 1)))?;
        if k == "command" {
            command = Some(v.to_string());
        } else {
            pairs.push((k.to_string(), v.to_string()));
        }
    }
    let command = command.ok_or_else(|| CliError::Manifest("no command= line".into()))?;
    Ok(Manifest {
        command,
        pairs,
        comments,
    })
}

pub fn read(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text)
}
