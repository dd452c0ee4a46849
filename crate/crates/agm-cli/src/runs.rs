//! Run-directory layout, atomic result writes, and corpus loading.
//!
//! Layout under the output root:
//!   corpus files:  {data}/{domain}.{train,validation,test,ads}.jsonl
//!                  {data}/vocab.txt, {data}/manifest.json, {data}/suite.toml
//!   grid runs:     {out}/{method}/{target}/seed{N}/
//!                    config.toml, checkpoint.ckpt, log.jsonl, cell.json
//!   warm starts:   {out}/warmup/{target}/seed{N}.ckpt

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use agm_core::data::{
    read_jsonl, write_jsonl, GeneratedSuite, SplitBundle, Tokenizer, Vocab,
};
use agm_core::eval::CellResult;
use agm_core::{Error, Result};

/// Split manifest: example ids per (domain, split).
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct Manifest {
    pub domains: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

/// Write a generated suite as corpus files plus the manifest.
pub fn write_corpus(suite: &GeneratedSuite, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    suite.tokenizer.vocab().save(&dir.join("vocab.txt"))?;
    // Ids in the manifest are file-derived ({domain}.{split}-{line}), the
    // same scheme the loader reconstructs, so split membership survives the
    // id-free external format.
    let mut manifest = Manifest::default();
    for (name, bundle) in &suite.domains {
        let mut splits = BTreeMap::new();
        for (split, examples) in bundle.splits() {
            write_jsonl(examples, &dir.join(format!("{name}.{split}.jsonl")))?;
            splits.insert(
                split.to_string(),
                (0..examples.len())
                    .map(|i| format!("{name}.{split}-{i:06}"))
                    .collect(),
            );
        }
        manifest.domains.insert(name.clone(), splits);
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    let suite_toml = toml::to_string_pretty(&suite.spec)
        .map_err(|e| Error::config(format!("suite spec: {e}")))?;
    fs::write(dir.join("suite.toml"), suite_toml)?;
    Ok(())
}

/// Load corpus files produced by [`write_corpus`].
pub fn load_corpus(dir: &Path, max_seq_len: usize) -> Result<(Tokenizer, Vec<(String, SplitBundle)>)> {
    let vocab = Vocab::load(&dir.join("vocab.txt"))?;
    let tokenizer = Tokenizer::new(vocab, max_seq_len);
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| Error::missing(format!("{}: {e}", manifest_path.display())))?,
    )?;
    let mut out = Vec::new();
    for (domain, _splits) in &manifest.domains {
        let load = |split: &str| -> Result<Vec<agm_core::data::Example>> {
            read_jsonl(
                &dir.join(format!("{domain}.{split}.jsonl")),
                &tokenizer,
                &format!("{domain}.{split}"),
            )
        };
        let bundle = SplitBundle {
            train: load("train")?,
            validation: load("validation")?,
            test: load("test")?,
            ads_heldout: load("ads")?,
        };
        out.push((domain.clone(), bundle));
    }
    if out.is_empty() {
        return Err(Error::missing(format!(
            "no domains found in {}",
            dir.display()
        )));
    }
    Ok((tokenizer, out))
}

/// Directory of one (method, target, seed) cell.
pub fn cell_dir(out: &Path, method: &str, target: &str, seed: u64) -> PathBuf {
    out.join(method).join(target).join(format!("seed{seed}"))
}

pub fn warmup_path(out: &Path, target: &str, seed: u64) -> PathBuf {
    out.join("warmup").join(target).join(format!("seed{seed}.ckpt"))
}

/// Atomically write a cell result: the file appears only when complete.
pub fn write_cell(dir: &Path, cell: &CellResult) -> Result<()> {
    let path = dir.join("cell.json");
    let tmp = dir.join("cell.json.tmp");
    fs::write(&tmp, serde_json::to_string_pretty(cell)?)?;
    fs::rename(&tmp, &path)?;
    Ok(())
}

pub fn read_cell(dir: &Path) -> Result<CellResult> {
    let path = dir.join("cell.json");
    let raw = fs::read_to_string(&path)
        .map_err(|e| Error::missing(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&raw)?)
}

/// Recursively find completed cell directories under a results root.
pub fn find_cells(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()) == Some("cell.json") {
                out.push(dir.clone());
            }
        }
    }
    out.sort();
    Ok(out)
}
