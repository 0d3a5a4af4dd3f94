//! Dataset directories: `{split}.ldeb` and `{split}.csv` for each split plus
//! a prompt manifest under `prompts/`.

use std::fs;
use std::path::{Path, PathBuf};

use subpop_core::embed_store::{read_embeddings, read_metadata, read_prompt_manifest};
use subpop_core::{GroupedDataset, PromptSet};

use crate::args::DataArgs;
use crate::error::{CliError, Result};
use crate::manifest::fingerprint;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_paths(dir: &Path, split: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{split}.ldeb")), dir.join(format!("{split}.csv")))
}

pub fn prompts_path(args: &DataArgs) -> PathBuf {
    args.prompts
        .clone()
        .unwrap_or_else(|| args.data.join("prompts").join("prompts.csv"))
}

#[derive(Debug)]
pub struct Loaded {
    pub prompts: PromptSet,
    /// Splits present on disk, in train/val/test order.
    pub splits: Vec<(&'static str, GroupedDataset)>,
    pub fingerprint: String,
}

impl Loaded {
    pub fn split(&self, name: &str) -> Result<&GroupedDataset> {
        self.splits
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, d)| d)
            .ok_or_else(|| CliError::Config(format!("split {name:?} not found in the data directory")))
    }

    /// Held-out splits that carry labels and groups.
    pub fn monitored(&self) -> Vec<(&str, &GroupedDataset)> {
        self.splits
            .iter()
            .filter(|(n, d)| *n != "train" && d.labels().is_some() && d.groups().is_some())
            .map(|(n, d)| (*n, d))
            .collect()
    }
}

fn fingerprint_files(args: &DataArgs) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for s in SPLITS {
        let (e, m) = split_paths(&args.data, s);
        files.push(e);
        files.push(m);
    }
    let manifest = prompts_path(args);
    if let Some(dir) = manifest.parent() {
        let mut ldebs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ldeb"))
            .collect();
        ldebs.sort();
        files.extend(ldebs);
    }
    files.push(manifest);
    Ok(files)
}

/// Loads every split present. The group count is `--groups` or one more
/// than the largest group id over all splits.
pub fn load(args: &DataArgs) -> Result<Loaded> {
    let manifest = prompts_path(args);
    let prompts = read_prompt_manifest(&manifest)?;
    let mut raw = Vec::new();
    for s in SPLITS {
        let (e, m) = split_paths(&args.data, s);
        if !e.exists() {
            continue;
        }
        let emb = read_embeddings(&e)?;
        let meta = read_metadata(&m, emb.count())?;
        raw.push((s, emb, meta));
    }
    if raw.is_empty() {
        return Err(CliError::Config(format!(
            "no split files found in {}",
            args.data.display()
        )));
    }
    let seen = raw
        .iter()
        .filter_map(|(_, _, m)| m.groups.as_ref()?.iter().max().copied())
        .max()
        .map_or(1, |g| g + 1);
    let group_count = args.groups.unwrap_or(seen);
    let splits = raw
        .into_iter()
        .map(|(s, emb, meta)| {
            Ok((
                s,
                GroupedDataset::new(emb, meta.labels, meta.groups, prompts.class_count(), group_count)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Loaded {
        prompts,
        splits,
        fingerprint: fingerprint(&fingerprint_files(args)?)?,
    })
}
